"""Command line entry points.

Four subcommands share one JSON config file:

  extract   pcap manifest -> feature matrices -> dataset CSV
  train     dataset -> one trained model (json + params pair)
  compare   dataset -> R repeats x 4 architectures -> report.json + renders
  report    report.json -> markdown, CSV and SVG renders

Relative paths inside the config resolve against the config file's
directory. Seed precedence: --seed flag, then SEQDEVID_SEED, then the
config value, then 0.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import capture as cap
from . import evalstats as es
from . import features as ft
from . import models as md
from . import report as rp
from . import synth

__all__ = ["main", "ConfigError"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class ConfigError(Exception):
    pass


_TOP_KEYS = {"data", "features", "model", "train", "repeats", "seed",
             "out_dir", "jobs"}
_DATA_KEYS = {"manifest", "capture_root", "dataset", "synthetic"}
_MODEL_KEYS = {"arch", "hidden", "stacked_layers", "kernels", "kernel_width",
               "pool_window", "context_steps"}
_TRAIN_KEYS = {"epochs", "batch_size", "learning_rate", "train_fraction",
               "patience", "min_delta"}
_SYNTH_KEYS = {"n_classes", "per_class", "seq_len", "n_features", "shift",
               "noise", "seed"}


class Config:
    def __init__(self, path: Path, blob: dict):
        self.base = path.parent

        unknown = set(blob) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")

        data = blob.get("data", {})
        if not isinstance(data, dict):
            raise ConfigError("data must be an object")
        if set(data) - _DATA_KEYS:
            raise ConfigError(f"unknown data keys: {sorted(set(data) - _DATA_KEYS)}")
        sources = [k for k in ("manifest", "dataset", "synthetic") if k in data]
        if len(sources) != 1:
            raise ConfigError(
                "data needs exactly one of manifest, dataset or synthetic; "
                f"got {sources or 'none'}")
        if "capture_root" in data and "manifest" not in data:
            raise ConfigError("capture_root only makes sense with a manifest")
        self.data = data

        features = blob.get("features")
        if features is None:
            self.features = None
        elif isinstance(features, str):
            try:
                self.features = ft.builtin_manifest(features)
            except ft.FeatureError:
                self.features = self._load_manifest_file(features)
        else:
            raise ConfigError("features must be a built-in name or a file path")

        self.model = dict(blob.get("model", {}))
        if set(self.model) - _MODEL_KEYS:
            raise ConfigError(
                f"unknown model keys: {sorted(set(self.model) - _MODEL_KEYS)}")
        self.train = dict(blob.get("train", {}))
        if set(self.train) - _TRAIN_KEYS:
            raise ConfigError(
                f"unknown train keys: {sorted(set(self.train) - _TRAIN_KEYS)}")

        synthetic = data.get("synthetic")
        if synthetic is not None:
            if not isinstance(synthetic, dict) or set(synthetic) - _SYNTH_KEYS:
                raise ConfigError("bad synthetic block")

        self.repeats = int(blob.get("repeats", 50))
        self.seed = int(blob.get("seed", 0))
        self.jobs = int(blob.get("jobs", 1))
        if self.jobs < 1:
            raise ConfigError("jobs must be positive")
        self.out_dir = self.resolve(blob.get("out_dir", "out"))

    def resolve(self, path_text) -> Path:
        path = Path(path_text)
        return path if path.is_absolute() else self.base / path

    def _load_manifest_file(self, text: str) -> ft.FeatureManifest:
        path = self.resolve(text)
        try:
            return ft.manifest_from_json(path.read_text())
        except OSError as exc:
            raise ConfigError(
                f"features {text!r} is neither a built-in manifest "
                f"nor a readable file: {exc}") from exc


def load_config(path_text: str) -> Config:
    path = Path(path_text)
    try:
        blob = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(blob, dict):
        raise ConfigError("config must be a JSON object")
    return Config(path, blob)


# --------------------------------------------------------------------------
# shared plumbing


def _load_sessions(cfg: Config):
    manifest = cfg.resolve(cfg.data["manifest"])
    root = cfg.resolve(cfg.data["capture_root"]) if "capture_root" in cfg.data else None
    return cap.ingest_sessions(manifest, capture_root=root)


def _load_dataset(cfg: Config) -> list[ft.SessionMatrix]:
    if "dataset" in cfg.data:
        return ft.load_dataset(cfg.resolve(cfg.data["dataset"]))
    if "synthetic" in cfg.data:
        return synth.make_shifted_dataset(**cfg.data["synthetic"])
    if cfg.features is None:
        raise ConfigError("a pcap manifest data source needs a features entry")
    return ft.sessions_to_matrices(_load_sessions(cfg), cfg.features)


def _dims(dataset) -> tuple[int, int, int]:
    if not dataset:
        raise ft.SchemaMismatch("dataset is empty")
    t_len, n_feat = dataset[0].values.shape
    classes = len({m.device_label for m in dataset})
    return t_len, n_feat, classes


def _train_config(cfg: Config, seed: int) -> md.TrainConfig:
    try:
        return md.TrainConfig(seed=seed, **cfg.train)
    except ValueError as exc:
        raise ConfigError(f"bad train block: {exc}") from exc


def _resolve_seed(cfg: Config, flag_seed) -> int:
    if flag_seed is not None:
        return flag_seed
    env = os.environ.get("SEQDEVID_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"SEQDEVID_SEED must be an integer: {env!r}") from exc
    return cfg.seed


# --------------------------------------------------------------------------
# subcommands


def cmd_extract(cfg: Config, out) -> int:
    if "manifest" not in cfg.data:
        raise ConfigError("extract needs a pcap manifest data source")
    if cfg.features is None:
        raise ConfigError("extract needs a features entry")
    matrices = ft.sessions_to_matrices(_load_sessions(cfg), cfg.features)
    out_path = Path(out) if out else cfg.out_dir / "dataset.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    ft.save_dataset(out_path, matrices, n_features=cfg.features.n_features)
    print(f"{len(matrices)} sessions, "
          f"{cfg.features.seq_len}x{cfg.features.n_features}")
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_train(cfg: Config, out, seed: int) -> int:
    dataset = _load_dataset(cfg)
    t_len, n_feat, classes = _dims(dataset)
    model_kw = dict(cfg.model)
    arch = model_kw.pop("arch", "vanilla")
    try:
        spec = md.ModelSpec(arch=arch, seq_len=t_len, n_features=n_feat,
                            classes=classes, **model_kw)
    except ValueError as exc:
        raise ConfigError(f"bad model block: {exc}") from exc
    tcfg = _train_config(cfg, seed)

    model = md.train(spec, dataset, tcfg)
    _, test_idx = md.split_dataset(dataset, tcfg.train_fraction, seed)
    result = md.evaluate(model, [dataset[i] for i in test_idx])

    out_path = Path(out) if out else cfg.out_dir / "model.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    md.save_model(model, out_path)
    print(f"wrote {out_path}")
    print(f"test accuracy {result.accuracy:.3f} "
          f"({result.n_correct}/{result.n_total})")
    return EXIT_OK


def cmd_compare(cfg: Config, out, seed: int, repeats, jobs) -> int:
    repeats = repeats if repeats is not None else cfg.repeats
    if repeats < 2:
        raise ConfigError("compare needs at least 2 repeats")
    jobs = jobs if jobs is not None else cfg.jobs

    dataset = _load_dataset(cfg)
    t_len, n_feat, classes = _dims(dataset)
    model_kw = dict(cfg.model)
    model_kw.pop("arch", None)  # compare always runs all four architectures
    try:
        specs = md.default_arch_specs(seq_len=t_len, n_features=n_feat,
                                      classes=classes, **model_kw)
    except ValueError as exc:
        raise ConfigError(f"bad model block: {exc}") from exc
    tcfg = _train_config(cfg, seed)

    matrix = es.run_experiment(dataset, specs, tcfg, repeats=repeats,
                               master_seed=seed, jobs=jobs)
    for line in matrix.diagnostics:
        print(f"warning: {line}", file=sys.stderr)
    comparison = es.compare_architectures(matrix)

    out_dir = Path(out) if out else cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    report_path.write_text(es.report_to_json(comparison))
    rendered = rp.render_report(comparison, out_dir)

    print(f"wrote {report_path}")
    for path in rendered:
        print(f"wrote {path}")
    for label in comparison.architectures:
        print(f"{label} mean accuracy {comparison.means[label]:.3f}")
    anova = comparison.anova
    print(f"ANOVA F({anova.df_between}, {anova.df_within}) = {anova.f_stat:.3f}, "
          f"p = {anova.p_value:.3g}")
    return EXIT_OK


def cmd_report(in_path, out) -> int:
    path = Path(in_path)
    try:
        comparison = es.report_from_json(path.read_text())
    except OSError as exc:
        raise es.StatsError(f"cannot read report: {exc}") from exc
    out_dir = Path(out) if out else path.parent
    for rendered in rp.render_report(comparison, out_dir):
        print(f"wrote {rendered}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument plumbing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqdevid",
        description="sequence models for network device identification")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default=None, help="output path override")

    p_extract = sub.add_parser("extract", help="pcaps to a dataset CSV")
    with_config(p_extract)

    p_train = sub.add_parser("train", help="train one model")
    with_config(p_train)

    p_compare = sub.add_parser("compare", help="run the architecture comparison")
    with_config(p_compare)
    p_compare.add_argument("--repeats", type=int, default=None,
                           help="override the config repeat count")
    p_compare.add_argument("--jobs", type=int, default=None,
                           help="parallel training processes")

    p_report = sub.add_parser("report", help="re-render files from a report.json")
    p_report.add_argument("report_json", help="path to a report.json")
    p_report.add_argument("--out", default=None, help="output directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    try:
        if args.command == "report":
            return cmd_report(args.report_json, args.out)
        cfg = load_config(args.config)
        seed = _resolve_seed(cfg, args.seed)
        if args.command == "extract":
            return cmd_extract(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out, seed)
        return cmd_compare(cfg, args.out, seed, args.repeats, args.jobs)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (cap.CaptureError, ft.FeatureError, FileNotFoundError,
            IsADirectoryError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (md.ModelError, es.StatsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
