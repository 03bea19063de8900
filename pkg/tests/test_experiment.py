import pytest

from seqdevid import evalstats as es
from seqdevid import models as md
from seqdevid.synth import make_shifted_dataset


def tiny_dataset(seed=11):
    return make_shifted_dataset(n_classes=3, per_class=6, seq_len=5,
                                n_features=4, seed=seed)


def tiny_specs():
    vanilla = md.ModelSpec(arch="vanilla", seq_len=5, n_features=4, classes=3,
                           hidden=6)
    cnn = md.ModelSpec(arch="cnn_lstm", seq_len=5, n_features=4, classes=3,
                       hidden=6, kernels=3, kernel_width=2, pool_window=2)
    return [("Vanilla-LSTM", vanilla), ("CNN-LSTM", cnn)]


def tiny_cfg():
    return md.TrainConfig(epochs=3, batch_size=6, learning_rate=0.01)


def test_run_experiment_fills_the_matrix_deterministically():
    data = tiny_dataset()
    first = es.run_experiment(data, tiny_specs(), tiny_cfg(), repeats=3,
                              master_seed=7)
    assert list(first.runs) == ["Vanilla-LSTM", "CNN-LSTM"]
    assert first.diagnostics == []
    for accs in first.runs.values():
        assert len(accs) == 3
        assert all(0.0 <= a <= 1.0 for a in accs)

    again = es.run_experiment(data, tiny_specs(), tiny_cfg(), repeats=3,
                              master_seed=7)
    assert again.runs == first.runs


def test_repeat_seeds_differ_per_repeat():
    seeds = [es.repeat_seed(7, r) for r in range(5)]
    assert len(set(seeds)) == 5
    assert es.repeat_seed(8, 0) != seeds[0]


def test_architectures_share_repeat_seeds():
    # two entries with identical specs must produce identical run lists,
    # which is what makes the per-repeat pairing meaningful
    data = tiny_dataset()
    spec = tiny_specs()[0][1]
    matrix = es.run_experiment(data, [("A", spec), ("B", spec)], tiny_cfg(),
                               repeats=2, master_seed=3)
    assert matrix.runs["A"] == matrix.runs["B"]


def test_failed_cells_become_diagnostics():
    data = tiny_dataset()
    bad = md.ModelSpec(arch="vanilla", seq_len=5, n_features=99, classes=3,
                       hidden=6)
    good = tiny_specs()[0][1]
    matrix = es.run_experiment(data, [("Broken", bad), ("Fine", good)],
                               tiny_cfg(), repeats=2, master_seed=1)
    assert matrix.runs["Broken"] == [None, None]
    assert None not in matrix.runs["Fine"]
    assert len(matrix.diagnostics) == 2
    assert "Broken repeat 0" in matrix.diagnostics[0]
    with pytest.raises(es.IncompleteRuns):
        es.compare_architectures(matrix)


def test_too_few_repeats_rejected():
    with pytest.raises(ValueError):
        es.run_experiment(tiny_dataset(), tiny_specs(), tiny_cfg(), repeats=1,
                          master_seed=0)


def test_parallel_jobs_match_serial():
    data = tiny_dataset()
    serial = es.run_experiment(data, tiny_specs(), tiny_cfg(), repeats=2,
                               master_seed=5, jobs=1)
    parallel = es.run_experiment(data, tiny_specs(), tiny_cfg(), repeats=2,
                                 master_seed=5, jobs=2)
    assert serial.runs == parallel.runs
    assert serial.diagnostics == parallel.diagnostics
