"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage or environment
error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from . import gradcheck
from .data import load_image, scan_dataset
from .errors import (CheckpointError, ConfigError, DatasetError, DecodeError, DivergenceError,
                     WasteCNNError)
from .models import (ARCHITECTURES, CLASS_NAMES, ModelConfig, architecture_specs, build_model,
                     layer_table, load_checkpoint, save_checkpoint)
from .training import TrainConfig, evaluate, export_curves, train

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

CHECKPOINT_NAME = "checkpoint.wgck"
CURVES_NAME = "curves.csv"
REPORT_NAME = "report.txt"
ECHO_NAME = "config.echo"

log = logging.getLogger("wastecnn")


class UsageError(WasteCNNError):
    pass


# ------------------------------------------------------------ run config

@dataclass
class RunConfig:
    arch: str = "proposed"
    data: str = "DATASET"
    out: str = "runs"
    run_id: str = ""
    checkpoint: str = ""
    input: int = 224
    width_scale: str = "1"
    head: str = ""
    epochs: int = 10
    batch: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    patience: int = 3
    val_fraction: float = 0.1
    seed: int = 0

    def model_config(self) -> ModelConfig:
        try:
            scale = Fraction(self.width_scale)
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"width_scale must be a positive rational, got {self.width_scale!r}")
        return ModelConfig(architecture=self.arch, input_extent=self.input, head=self.head or None,
                           width_scale=scale, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch, learning_rate=self.lr,
                           momentum=self.momentum, early_stop_patience=self.patience,
                           validation_fraction=self.val_fraction, seed=self.seed)

    def resolved_run_id(self) -> str:
        return self.run_id or f"{self.arch}-seed{self.seed}"

    def run_dir(self) -> Path:
        return Path(self.out) / self.resolved_run_id()

    def echo(self) -> str:
        lines = [f"{k}={getattr(self, k)}" for k in self.__dataclass_fields__]
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {name: type(value) for name, value in vars(RunConfig()).items()}


def read_config_file(path) -> dict[str, str]:
    """Parse flat ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    items = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        items[key.replace("-", "_")] = value
    return items


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then explicit command-line options."""
    merged = {}
    if getattr(args, "config", None):
        merged.update(read_config_file(args.config))
    for key in _FIELD_TYPES:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    unknown = set(merged) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    values = {}
    for key, value in merged.items():
        try:
            values[key] = _FIELD_TYPES[key](value)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {value!r}") from None
    return RunConfig(**values)


# --------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = resolve_config(args)
    model_config, train_config = cfg.model_config(), cfg.train_config()
    data_root = Path(cfg.data)
    if not data_root.is_dir():
        raise UsageError(f"dataset directory not found: {data_root}")
    index = scan_dataset(data_root, "TRAIN")
    if len(index) < 2:
        raise UsageError(f"training split under {data_root} has fewer than two images")
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / ECHO_NAME).write_text(cfg.echo(), encoding="utf-8")

    model = build_model(model_config)
    try:
        model, report = train(model, index, train_config)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(model, run_dir / CHECKPOINT_NAME)
    export_curves(report, run_dir / CURVES_NAME)
    best = report.records[report.best_epoch - 1] if report.best_epoch else report.records[-1]
    print(f"trained {model_config.architecture}: stopped at epoch {report.stopped_epoch}, "
          f"best epoch {report.best_epoch} (val_acc {best.val_acc:.4f})")
    print(f"artifacts in {run_dir}")
    return EXIT_OK


def _load_checkpoint(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from None


def cmd_evaluate(args) -> int:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    model = _load_checkpoint(args.checkpoint)
    cfg = resolve_config(args)
    if args.arch is None:
        cfg.arch = model.config.architecture
    if args.seed is None:
        cfg.seed = model.config.seed
    data_root = Path(cfg.data)
    if not data_root.is_dir():
        raise UsageError(f"dataset directory not found: {data_root}")
    index = scan_dataset(data_root, "TEST")
    if len(index) == 0:
        raise UsageError(f"test split under {data_root} is empty")
    report = evaluate(model, index, cfg.batch)
    text = report.to_text()
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / REPORT_NAME).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    image = load_image(args.image, model.config.input_extent)
    score = float(model.positive_score(image[None])[0])
    label = CLASS_NAMES[int(score >= 0.5)]
    print(f"{label} {score:.3f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    print(f"finite-difference check: eps={args.eps:g} threshold={args.threshold:g}")
    results = gradcheck.run_suite(args.eps, args.threshold, args.seed)
    for r in results:
        print(f"{r.kind:<22} max_rel_err={r.max_rel_error:.3e}  {'PASS' if r.passed else 'FAIL'}")
    failed = [r.kind for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_VERIFY
    print("all layers pass")
    return EXIT_OK


def census(specs) -> Counter:
    return Counter(s.kind for s in specs)


def cmd_inspect(args) -> int:
    cfg = resolve_config(args)
    config = cfg.model_config()
    specs = architecture_specs(config)
    rows = layer_table(specs, config.input_shape())
    shape = "x".join(map(str, config.input_shape()))
    print(f"{config.architecture} (input {shape}, width_scale {config.width_scale}, head {config.head})")
    print(f"{'#':>3}  {'kind':<14} {'hyperparams':<56} {'output':<16} {'params':>12}")
    for row in rows:
        out = "x".join(map(str, row.output_shape))
        print(f"{row.index:>3}  {row.kind:<14} {row.hyperparams:<56} {out:<16} {row.params:>12}")
    counts = census(specs)
    print("census: " + ", ".join(f"{kind}={counts[kind]}" for kind in
                                 ("Conv2D", "MaxPool2D", "Dense", "ResidualBlock") if counts[kind]))
    if config.architecture == "resnet34":
        blocks = [s for s in specs if s.kind == "ResidualBlock"]
        stages, channels = [], []
        for b in blocks:
            if not channels or b.hp["channels"] != channels[-1]:
                channels.append(b.hp["channels"])
                stages.append(0)
            stages[-1] += 1
        print(f"residual stages: blocks={stages} channels={channels}")
    print(f"total params: {sum(r.params for r in rows)}")
    return EXIT_OK


# ----------------------------------------------------------------- parser

def _add_model_options(p):
    p.add_argument("--arch", default=None, help=f"one of {', '.join(ARCHITECTURES)}")
    p.add_argument("--input", type=int, default=None, help="input image extent (default 224)")
    p.add_argument("--width-scale", dest="width_scale", default=None,
                   help="uniform layer-width multiplier, e.g. 1/8")
    p.add_argument("--head", default=None, help="sigmoid1 or softmax2")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="key=value config file")


def _add_run_options(p):
    p.add_argument("--data", default=None, help="dataset root with TRAIN/ and TEST/")
    p.add_argument("--out", default=None, help="output directory (default runs)")
    p.add_argument("--run-id", dest="run_id", default=None)
    p.add_argument("--batch", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wastecnn",
                                     description="Organic/recyclable waste image classifiers")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint and curves")
    _add_model_options(p)
    _add_run_options(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="classification report on the TEST split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--arch", default=None, help=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=None, help=argparse.SUPPRESS)
    p.add_argument("--config", default=None)
    _add_run_options(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="classify one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("image")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--eps", type=float, default=gradcheck.DEFAULT_EPS)
    p.add_argument("--threshold", type=float, default=gradcheck.DEFAULT_THRESHOLD)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="layer table of an architecture")
    _add_model_options(p)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError, DecodeError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
