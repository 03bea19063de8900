"""The four sequence classifiers and their training loop.

All of them read a (T, F) session matrix and emit a class distribution:

  vanilla          lstm(last) -> softmax
  stacked          lstm(all) -> lstm(last) -> softmax
  cnn_lstm         conv1d -> maxpool -> lstm(last) -> softmax
  encoder_decoder  lstm(last) -> repeat -> lstm(last) -> softmax

Training is plain mini-batch Adam on cross entropy with a loss-plateau
early stop. The min-max normalizer is fitted on the training split only
and travels with the model, so raw matrices go in everywhere.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nncore as nn
from .features import LabelCodec, Normalizer, SessionMatrix

__all__ = [
    "ModelError",
    "UnknownArchitecture",
    "ShapeMismatch",
    "ClassTooSmall",
    "EmptyTestSet",
    "ARCH_LABELS",
    "TABLE_ORDER",
    "ModelSpec",
    "TrainConfig",
    "default_arch_specs",
    "build_model",
    "split_dataset",
    "train",
    "TrainedModel",
    "EvalResult",
    "evaluate",
    "save_model",
    "load_model",
]


class ModelError(Exception):
    pass


class UnknownArchitecture(ModelError):
    pass


class ShapeMismatch(ModelError):
    pass


class ClassTooSmall(ModelError):
    pass


class EmptyTestSet(ModelError):
    pass


ARCH_LABELS = {
    "vanilla": "Vanilla-LSTM",
    "stacked": "Stacked-LSTM",
    "cnn_lstm": "CNN-LSTM",
    "encoder_decoder": "ED-LSTM",
}

# column order used by the comparison tables
TABLE_ORDER = ("CNN-LSTM", "ED-LSTM", "Stacked-LSTM", "Vanilla-LSTM")

_LABEL_TO_ARCH = {v: k for k, v in ARCH_LABELS.items()}


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    seq_len: int = 12
    n_features: int = 25
    classes: int = 27
    hidden: int = 64
    stacked_layers: int = 2
    kernels: int = 32
    kernel_width: int = 3
    pool_window: int = 2
    context_steps: int = 4

    def __post_init__(self):
        if self.arch not in ARCH_LABELS:
            raise UnknownArchitecture(
                f"unknown architecture {self.arch!r}; "
                f"pick one of {sorted(ARCH_LABELS)}")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        for name in ("seq_len", "n_features", "hidden", "stacked_layers",
                     "kernels", "kernel_width", "pool_window", "context_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    train_fraction: float = 0.75
    patience: int = 30
    min_delta: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie strictly inside (0, 1)")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be positive")


def default_arch_specs(**overrides) -> list[tuple[str, ModelSpec]]:
    """(display label, spec) pairs in table column order."""
    return [(label, ModelSpec(arch=_LABEL_TO_ARCH[label], **overrides))
            for label in TABLE_ORDER]


def build_model(spec: ModelSpec, rng: np.random.Generator) -> nn.Network:
    F, H, C = spec.n_features, spec.hidden, spec.classes
    if spec.arch == "vanilla":
        layers = [nn.LstmLayer(F, H, "last", rng)]
    elif spec.arch == "stacked":
        layers = []
        in_dim = F
        for _ in range(spec.stacked_layers - 1):
            layers.append(nn.LstmLayer(in_dim, H, "all", rng))
            in_dim = H
        layers.append(nn.LstmLayer(in_dim, H, "last", rng))
    elif spec.arch == "cnn_lstm":
        layers = [
            nn.Conv1dLayer(F, spec.kernels, spec.kernel_width, rng),
            nn.MaxPool1dLayer(spec.pool_window),
            nn.LstmLayer(spec.kernels, H, "last", rng),
        ]
    else:  # encoder_decoder; ModelSpec already rejected unknown names
        layers = [
            nn.LstmLayer(F, H, "last", rng),
            nn.RepeatVector(spec.context_steps),
            nn.LstmLayer(H, H, "last", rng),
        ]
    layers.append(nn.DenseSoftmax(H, C, rng))
    return nn.Network(layers)


# --------------------------------------------------------------------------
# splitting and training


def split_dataset(dataset: Sequence[SessionMatrix], train_fraction: float,
                  seed: int) -> tuple[list[int], list[int]]:
    """Stratified train/test index split, deterministic in the seed.

    Every class keeps at least one item on each side, so classes with a
    single session are rejected.
    """
    by_class: dict[str, list[int]] = {}
    for i, m in enumerate(dataset):
        by_class.setdefault(m.device_label, []).append(i)
    rng = np.random.default_rng(seed)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for label in sorted(by_class):
        idxs = by_class[label]
        if len(idxs) < 2:
            raise ClassTooSmall(
                f"class {label!r} has {len(idxs)} session(s), need at least 2")
        perm = rng.permutation(len(idxs))
        n_train = min(max(1, round(train_fraction * len(idxs))), len(idxs) - 1)
        train_idx.extend(idxs[j] for j in perm[:n_train])
        test_idx.extend(idxs[j] for j in perm[n_train:])
    return train_idx, test_idx


def _check_shapes(spec: ModelSpec, dataset: Sequence[SessionMatrix]):
    want = (spec.seq_len, spec.n_features)
    for m in dataset:
        if m.values.shape != want:
            raise ShapeMismatch(
                f"{m.device_label}/{m.session_id}: matrix is "
                f"{m.values.shape}, model expects {want}")


def train(spec: ModelSpec, dataset: Sequence[SessionMatrix],
          cfg: TrainConfig) -> "TrainedModel":
    if not dataset:
        raise ModelError("cannot train on an empty dataset")
    _check_shapes(spec, dataset)
    codec = LabelCodec.fit(m.device_label for m in dataset)
    if len(codec) != spec.classes:
        raise ShapeMismatch(
            f"model emits {spec.classes} classes, dataset holds {len(codec)}")

    train_idx, _ = split_dataset(dataset, cfg.train_fraction, cfg.seed)
    normalizer = Normalizer().fit([dataset[i] for i in train_idx])
    examples = [(normalizer.apply(dataset[i]).values,
                 codec.encode(dataset[i].device_label)) for i in train_idx]

    rng = np.random.default_rng(cfg.seed)
    net = build_model(spec, rng)
    adam = nn.Adam(net.params(), lr=cfg.learning_rate)

    history: list[float] = []
    best = np.inf
    wait = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(examples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            net.zero_grads()
            for i in batch:
                x, y = examples[i]
                losses.append(net.loss_and_backprop(x, y))
            inv = 1.0 / len(batch)
            for g in net.grads().values():
                g *= inv
            adam.step(net.grads())
        epoch_loss = float(np.mean(losses))
        history.append(epoch_loss)
        if epoch_loss < best - cfg.min_delta:
            best = epoch_loss
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    return TrainedModel(spec=spec, net=net, normalizer=normalizer,
                        codec=codec, history=history, seed=cfg.seed)


# --------------------------------------------------------------------------
# the trained artifact


@dataclass
class TrainedModel:
    spec: ModelSpec
    net: nn.Network
    normalizer: Normalizer
    codec: LabelCodec
    history: list[float] = field(default_factory=list)
    seed: int = 0

    def _forward(self, matrix: SessionMatrix) -> np.ndarray:
        want = (self.spec.seq_len, self.spec.n_features)
        if matrix.values.shape != want:
            raise ShapeMismatch(
                f"matrix is {matrix.values.shape}, model expects {want}")
        return self.net.forward(self.normalizer.apply(matrix).values)

    def predict_proba(self, matrix: SessionMatrix) -> np.ndarray:
        return self._forward(matrix)

    def predict(self, matrix: SessionMatrix) -> str:
        return self.codec.decode(int(np.argmax(self._forward(matrix))))


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    n_correct: int
    n_total: int


def evaluate(model: TrainedModel, matrices: Sequence[SessionMatrix]) -> EvalResult:
    """Top-1 accuracy; labels the model never saw count as misses."""
    if not matrices:
        raise EmptyTestSet("no sessions to evaluate")
    known = {label: i for i, label in enumerate(model.codec.classes)}
    n_correct = 0
    for m in matrices:
        pred = int(np.argmax(model._forward(m)))
        if known.get(m.device_label, -1) == pred:
            n_correct += 1
    return EvalResult(accuracy=n_correct / len(matrices),
                      n_correct=n_correct, n_total=len(matrices))


# --------------------------------------------------------------------------
# persistence: metadata json next to a binary tensor file

MODEL_FORMAT = "seqdevid-model"
MODEL_VERSION = 1


def save_model(model: TrainedModel, path) -> None:
    path = Path(path)
    params_path = path.with_suffix(".params")
    # the tensor file is 1-D/2-D only; conv kernels flatten their trailing
    # axes and load_model folds them back
    tensors = {name: arr.reshape(arr.shape[0], -1) if arr.ndim > 2 else arr
               for name, arr in model.net.params().items()}
    tensors["norm/lo"] = model.normalizer.lo
    tensors["norm/hi"] = model.normalizer.hi
    nn.save_params(params_path, tensors)
    blob = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "spec": asdict(model.spec),
        "classes": list(model.codec.classes),
        "seed": model.seed,
        "history": model.history,
        "params_file": params_path.name,
    }
    path.write_text(json.dumps(blob, sort_keys=True, indent=2) + "\n")


def load_model(path) -> TrainedModel:
    path = Path(path)
    try:
        blob = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelError(f"{path}: unreadable model file: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != MODEL_FORMAT:
        raise ModelError(f"{path}: not a model file")
    if blob.get("version") != MODEL_VERSION:
        raise ModelError(f"{path}: unsupported version {blob.get('version')!r}")
    try:
        spec = ModelSpec(**blob["spec"])
        classes = tuple(blob["classes"])
        seed = int(blob["seed"])
        history = [float(v) for v in blob["history"]]
        params_file = blob["params_file"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"{path}: bad model metadata: {exc}") from exc

    try:
        tensors = nn.load_params(path.parent / params_file)
    except nn.BadParamFile as exc:
        raise ModelError(str(exc)) from exc

    net = build_model(spec, np.random.default_rng(0))
    for name, arr in net.params().items():
        if name not in tensors:
            raise ModelError(f"{path}: tensor {name} missing from {params_file}")
        stored = tensors[name]
        flat = (arr.shape[0], int(np.prod(arr.shape[1:]))) if arr.ndim > 2 else None
        if stored.shape == flat:
            stored = stored.reshape(arr.shape)
        if stored.shape != arr.shape:
            raise ModelError(
                f"{path}: tensor {name} has shape {stored.shape}, "
                f"expected {arr.shape}")
        arr[...] = stored
    for key in ("norm/lo", "norm/hi"):
        if key not in tensors:
            raise ModelError(f"{path}: tensor {key} missing from {params_file}")
    normalizer = Normalizer(lo=tensors["norm/lo"], hi=tensors["norm/hi"])
    return TrainedModel(spec=spec, net=net, normalizer=normalizer,
                        codec=LabelCodec(classes=classes), history=history,
                        seed=seed)
