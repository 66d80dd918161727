"""Training loop with early stopping, and the test-set evaluation harness."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetIndex, batch_order, load_images
from .errors import ConfigError, DatasetError, DivergenceError
from .losses import OptimizerState, binary_cross_entropy, cross_entropy, sgd_step
from .models import CLASS_NAMES, Model

log = logging.getLogger(__name__)

# SeedSequence stream used for the validation split, disjoint from epoch numbers
VALIDATION_STREAM = 2 ** 31 - 1
MIN_IMPROVEMENT = 1e-6


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    early_stop_patience: int = 3
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie strictly between 0 and 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    seconds: float = 0.0


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0

    @property
    def epoch_seconds(self) -> list[float]:
        return [r.seconds for r in self.records]


class EarlyStopping:
    """Stop once validation accuracy has failed to beat the best by more than
    ``min_delta`` for ``patience`` consecutive epochs."""

    def __init__(self, patience: int, min_delta: float = MIN_IMPROVEMENT):
        self.patience, self.min_delta = patience, min_delta
        self.best = -np.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record one epoch; returns True if this was the new best."""
        if value > self.best + self.min_delta:
            self.best, self.best_epoch, self.stale = value, epoch, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


def simulate_early_stop(val_accs, patience: int, max_epochs: int | None = None) -> tuple[int, int]:
    """(stopped_epoch, best_epoch), 1-based, for an injected accuracy sequence."""
    max_epochs = len(val_accs) if max_epochs is None else min(max_epochs, len(val_accs))
    rule = EarlyStopping(patience)
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        rule.update(epoch, val_accs[epoch - 1])
        if rule.should_stop:
            break
    return epoch, rule.best_epoch


def _targets(model: Model, labels: np.ndarray) -> np.ndarray:
    if model.config.head == "sigmoid1":
        return labels.astype(np.float64).reshape(-1, 1)
    return np.eye(2)[labels]


def _loss(model: Model, logits, targets):
    if model.config.head == "sigmoid1":
        return binary_cross_entropy(logits, targets)
    return cross_entropy(logits, targets)


def _logit_predictions(logits: np.ndarray) -> np.ndarray:
    # same as the positive-class probability >= 0.5 rule, evaluated on logits
    if logits.shape[1] == 1:
        return (logits[:, 0] >= 0).astype(np.int64)
    return (logits[:, 1] >= logits[:, 0]).astype(np.int64)


def split_validation(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (train, validation) index split of ``range(n)``."""
    n_val = int(round(n * fraction))
    n_val = min(max(n_val, 1), n - 1)
    if n < 2:
        raise DatasetError("need at least two training images to carve a validation split")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, VALIDATION_STREAM])))
    perm = rng.permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _measure(model: Model, images, labels, batch_size) -> tuple[float, float]:
    total_loss, correct = 0.0, 0
    targets = _targets(model, labels)
    for start in range(0, len(labels), batch_size):
        sl = slice(start, start + batch_size)
        logits = model.forward(images[sl], train=False)
        total_loss += _loss(model, logits, targets[sl]).value * len(logits)
        correct += int((_logit_predictions(logits) == labels[sl]).sum())
    return total_loss / len(labels), correct / len(labels)


def train(model: Model, train_index: DatasetIndex, config: TrainConfig,
          images: np.ndarray | None = None) -> tuple[Model, TrainReport]:
    """Train ``model`` in place and return it with its per-epoch report.

    The best-validation-accuracy parameters are restored before returning.
    ``images`` may carry the pre-loaded [n, 3, e, e] pixels of ``train_index``.
    """
    labels = train_index.labels
    if images is None:
        images = load_images([p for p, _ in train_index.entries], model.config.input_extent)
    if len(images) != len(labels):
        raise DatasetError("image array and index disagree in length")
    tr_idx, val_idx = split_validation(len(labels), config.validation_fraction, config.seed)
    x_tr, y_tr = images[tr_idx], labels[tr_idx]
    x_val, y_val = images[val_idx], labels[val_idx]
    t_tr = _targets(model, y_tr)

    opt = OptimizerState(config.learning_rate, config.momentum)
    stopper = EarlyStopping(config.early_stop_patience)
    report = TrainReport()
    best_state = [p.copy() for _, p in model.state()]

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        total_loss, correct = 0.0, 0
        for b, idx in enumerate(batch_order(len(y_tr), config.batch_size, config.seed, epoch)):
            logits = model.forward(x_tr[idx], train=True)
            loss = _loss(model, logits, t_tr[idx])
            if not np.isfinite(loss.value):
                raise DivergenceError(f"divergence: non-finite loss at epoch {epoch}, batch {b + 1}")
            model.backward(loss.grad)
            try:
                sgd_step(model.parameters(), model.gradients(), opt)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} at epoch {epoch}, batch {b + 1}") from None
            total_loss += loss.value * len(idx)
            correct += int((_logit_predictions(logits) == y_tr[idx]).sum())
        val_loss, val_acc = _measure(model, x_val, y_val, config.batch_size)
        record = EpochRecord(epoch, total_loss / len(y_tr), correct / len(y_tr), val_loss, val_acc,
                             time.perf_counter() - t0)
        report.records.append(record)
        log.info("epoch %d: loss %.4f acc %.4f val_loss %.4f val_acc %.4f", epoch,
                 record.train_loss, record.train_acc, val_loss, val_acc)
        if stopper.update(epoch, val_acc):
            best_state = [p.copy() for _, p in model.state()]
        if stopper.should_stop:
            break

    report.stopped_epoch = report.records[-1].epoch
    report.best_epoch = stopper.best_epoch
    for (_, p), saved in zip(model.state(), best_state):
        p[...] = saved
    return model, report


# ----------------------------------------------------------------- metrics

def confusion_matrix(y_true, y_pred) -> np.ndarray:
    """[[TN, FP], [FN, TP]] with Recyclable (1) as the positive class."""
    cm = np.zeros((2, 2), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def _ratio(num, den) -> float:
    return float(num / den) if den else 0.0


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


def f1_score(precision: float, recall: float) -> float:
    return _ratio(2 * precision * recall, precision + recall)


def precision_recall_f1(cm) -> list[ClassMetrics]:
    """Per-class metrics from a 2x2 confusion matrix (rows true, columns predicted).

    Any 0/0 ratio is reported as 0.
    """
    cm = np.asarray(cm)
    out = []
    for c in range(cm.shape[0]):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        p, r = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
        out.append(ClassMetrics(p, r, f1_score(p, r), int(cm[c, :].sum())))
    return out


@dataclass
class EvalReport:
    confusion: np.ndarray
    per_class: list[ClassMetrics]
    accuracy: float

    @classmethod
    def from_confusion(cls, cm) -> "EvalReport":
        cm = np.asarray(cm, dtype=np.int64)
        total = int(cm.sum())
        return cls(cm, precision_recall_f1(cm), _ratio(int(np.trace(cm)), total))

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def to_text(self) -> str:
        lines = []
        for metric in ("precision", "recall", "f1", "support"):
            for name, m in zip(CLASS_NAMES, self.per_class):
                value = getattr(m, metric)
                lines.append(f"{metric}.{name}: {value if metric == 'support' else f'{value:.4f}'}")
        (tn, fp), (fn, tp) = self.confusion.tolist()
        lines += [f"accuracy: {self.accuracy:.4f}", f"total: {self.total}",
                  f"confusion.TN: {tn}", f"confusion.FP: {fp}",
                  f"confusion.FN: {fn}", f"confusion.TP: {tp}"]
        return "\n".join(lines) + "\n"


def parse_report_text(text: str) -> dict[str, str]:
    return dict(line.split(": ", 1) for line in text.splitlines() if line)


def evaluate(model: Model, test_index: DatasetIndex, batch_size: int = 64,
             images: np.ndarray | None = None) -> EvalReport:
    if len(test_index) == 0:
        raise DatasetError("cannot evaluate on an empty test index")
    labels = test_index.labels
    if images is None:
        images = load_images([p for p, _ in test_index.entries], model.config.input_extent)
    preds = np.concatenate([model.predict(images[i:i + batch_size])
                            for i in range(0, len(labels), batch_size)])
    return EvalReport.from_confusion(confusion_matrix(labels, preds))


# ------------------------------------------------------------------ curves

CURVE_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


def export_curves(report: TrainReport, path) -> None:
    if not report.records:
        raise ValueError("refusing to export an empty training report")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CURVE_HEADER)
        for r in report.records:
            writer.writerow([r.epoch] + [f"{v:.9g}" for v in
                                         (r.train_loss, r.train_acc, r.val_loss, r.val_acc)])


def read_curves(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["train_acc"]),
                        float(r["val_loss"]), float(r["val_acc"])) for r in rows]
