from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wastecnn.data import scan_dataset
from wastecnn.errors import ConfigError, DivergenceError
from wastecnn.models import ModelConfig, build_model
from wastecnn.synthetic import write_dataset
from wastecnn.training import (EarlyStopping, EpochRecord, EvalReport, TrainConfig, TrainReport,
                               confusion_matrix, evaluate, export_curves, precision_recall_f1,
                               read_curves, simulate_early_stop, split_validation, train)

TINY = dict(input_extent=16, width_scale=Fraction(1, 8))


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    write_dataset(root, (6, 6), (4, 4), extent=16, seed=3, kind="brightness")
    return root


# ----------------------------------------------------------- early stop

def test_early_stop_plateau_sequence():
    # best at epoch 2, then three epochs without improvement exhaust patience 3
    assert simulate_early_stop([.80, .85, .85, .85, .85], patience=3) == (5, 2)
    assert simulate_early_stop([.80, .85, .85, .85], patience=3) == (4, 2)


def test_early_stop_min_delta():
    rule = EarlyStopping(1)
    assert rule.update(1, 0.5)
    assert not rule.update(2, 0.5 + 5e-7)
    assert rule.should_stop


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(validation_fraction=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(early_stop_patience=0)


def test_split_validation_deterministic():
    a = split_validation(50, 0.1, seed=4)
    b = split_validation(50, 0.1, seed=4)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    tr, val = a
    assert len(val) == 5 and sorted(np.concatenate(a).tolist()) == list(range(50))
    assert not np.array_equal(split_validation(50, 0.1, seed=5)[1], val)


# --------------------------------------------------------------- train

def test_zero_learning_rate_is_frozen(tiny_data):
    index = scan_dataset(tiny_data, "TRAIN")
    model = build_model(ModelConfig("proposed", **TINY))
    before = [p.copy() for _, p in model.parameters()]
    _, report = train(model, index, TrainConfig(epochs=3, batch_size=4, learning_rate=0.0,
                                                early_stop_patience=5))
    for b, (_, p) in zip(before, model.parameters()):
        assert b.tobytes() == p.tobytes()
    losses = [r.train_loss for r in report.records]
    assert max(losses) - min(losses) < 1e-12


def test_report_invariants(tiny_data):
    index = scan_dataset(tiny_data, "TRAIN")
    model = build_model(ModelConfig("proposed", **TINY))
    config = TrainConfig(epochs=4, batch_size=4, learning_rate=0.01, early_stop_patience=2)
    _, report = train(model, index, config)
    assert report.best_epoch <= report.stopped_epoch <= config.epochs
    assert [r.epoch for r in report.records] == list(range(1, report.stopped_epoch + 1))
    assert len(report.epoch_seconds) == report.stopped_epoch


def test_training_deterministic(tiny_data):
    index = scan_dataset(tiny_data, "TRAIN")
    config = TrainConfig(epochs=3, batch_size=4, learning_rate=0.02, seed=9)
    runs = []
    for _ in range(2):
        model, report = train(build_model(ModelConfig("proposed", **TINY, seed=2)), index, config)
        runs.append((model, report))
    (ma, ra), (mb, rb) = runs
    for x, y in zip(ra.records, rb.records):
        assert (x.train_loss, x.train_acc, x.val_loss, x.val_acc) == \
               (y.train_loss, y.train_acc, y.val_loss, y.val_acc)
    for (_, p), (_, q) in zip(ma.state(), mb.state()):
        assert p.tobytes() == q.tobytes()


def test_best_weights_restored(tiny_data):
    index = scan_dataset(tiny_data, "TRAIN")
    config = TrainConfig(epochs=3, batch_size=4, learning_rate=0.05, early_stop_patience=3)
    model, report = train(build_model(ModelConfig("proposed", **TINY)), index, config)
    # restored parameters reproduce the best epoch's validation accuracy
    from wastecnn.training import _measure
    from wastecnn.data import load_images
    images = load_images([p for p, _ in index.entries], 16)
    _, val = split_validation(len(index), config.validation_fraction, config.seed)
    _, acc = _measure(model, images[val], index.labels[val], 4)
    assert acc == report.records[report.best_epoch - 1].val_acc


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected(tiny_data):
    index = scan_dataset(tiny_data, "TRAIN")
    model = build_model(ModelConfig("proposed", **TINY))
    model.parameters()[0][1][...] = np.inf
    with pytest.raises(DivergenceError, match="epoch 1, batch 1"):
        train(model, index, TrainConfig(epochs=1, batch_size=4))


def test_softmax_head_trains(tiny_data):
    index = scan_dataset(tiny_data, "TRAIN")
    model = build_model(ModelConfig("proposed", head="softmax2", **TINY))
    _, report = train(model, index, TrainConfig(epochs=2, batch_size=4, learning_rate=0.01))
    assert np.isfinite(report.records[-1].train_loss)


# ------------------------------------------------------------- metrics

def test_perfect_predictor():
    report = EvalReport.from_confusion(confusion_matrix([0] * 5 + [1] * 5, [0] * 5 + [1] * 5))
    np.testing.assert_array_equal(report.confusion, [[5, 0], [0, 5]])
    assert report.accuracy == 1.0
    assert all(m.precision == m.recall == m.f1 == 1.0 for m in report.per_class)


def test_constant_organic_on_reference_test_counts():
    y_true = [0] * 1401 + [1] * 1112
    report = EvalReport.from_confusion(confusion_matrix(y_true, [0] * len(y_true)))
    assert report.accuracy == pytest.approx(1401 / 2513)
    assert round(report.accuracy, 4) == 0.5575
    assert report.per_class[1].precision == 0.0 and report.per_class[1].f1 == 0.0


def test_all_wrong_predictor():
    report = EvalReport.from_confusion([[0, 4], [6, 0]])
    assert report.accuracy == 0.0
    assert [m.f1 for m in report.per_class] == [0.0, 0.0]


def test_precision_recall_f1_symmetric():
    # rows true, cols predicted; class 1 has TP=90, FP=10, FN=10
    m = precision_recall_f1([[0, 10], [10, 90]])[1]
    assert (m.precision, m.recall) == (0.9, 0.9)
    assert m.f1 == pytest.approx(0.9)


def test_zero_tp_row():
    m = precision_recall_f1([[0, 0], [0, 7]])[0]
    assert (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 500), min_size=4, max_size=4).filter(lambda v: sum(v) > 0))
def test_accuracy_is_support_weighted_recall(entries):
    cm = np.array(entries).reshape(2, 2)
    report = EvalReport.from_confusion(cm)
    assert report.confusion.sum() == cm.sum()
    weighted = sum(m.recall * m.support for m in report.per_class) / cm.sum()
    assert report.accuracy == pytest.approx(weighted, abs=1e-15)
    assert all(0 <= v <= 1 for m in report.per_class for v in (m.precision, m.recall, m.f1))


def test_evaluate_constant_model(tiny_data):
    index = scan_dataset(tiny_data, "TEST")
    model = build_model(ModelConfig("proposed", **TINY))
    for name, p in model.parameters():
        if name.startswith(f"{len(model.layers) - 2}.Dense"):
            p[...] = 0.0
    model.parameters()[-1][1][...] = -5.0  # final bias: always Organic
    report = evaluate(model, index, batch_size=3)
    np.testing.assert_array_equal(report.confusion, [[4, 0], [4, 0]])
    assert report.total == len(index)


def test_report_text_structure():
    text = EvalReport.from_confusion([[40, 10], [5, 45]]).to_text()
    fields = dict(line.split(": ") for line in text.splitlines())
    assert fields["accuracy"] == "0.8500"
    assert fields["precision.Organic"] == "0.8889"
    assert fields["recall.Recyclable"] == "0.9000"
    assert (fields["confusion.TN"], fields["confusion.FP"], fields["confusion.FN"],
            fields["confusion.TP"]) == ("40", "10", "5", "45")
    assert fields["support.Organic"] == "50"


# -------------------------------------------------------------- curves

def _report(n):
    return TrainReport([EpochRecord(i + 1, 0.6931471805599453 / (i + 1), 0.5 + i / 7,
                                    0.123456789123 * (i + 1), 1 / 3) for i in range(n)], n, 1)


def test_export_curves_format(tmp_path):
    path = tmp_path / "c.csv"
    export_curves(_report(2), path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,train_loss,train_acc,val_loss,val_acc"
    assert len(lines) == 3
    assert lines[1] == "1,0.693147181,0.5,0.123456789,0.333333333"


def test_curves_roundtrip(tmp_path):
    report = _report(4)
    export_curves(report, tmp_path / "c.csv")
    back = read_curves(tmp_path / "c.csv")
    for a, b in zip(report.records, back):
        assert a.epoch == b.epoch
        for field in ("train_loss", "train_acc", "val_loss", "val_acc"):
            x, y = getattr(a, field), getattr(b, field)
            # 9 significant digits: absolute 1e-9 below 1, relative 5e-9 above
            assert abs(x - y) <= max(1e-9, 5e-9 * abs(x))


def test_curves_byte_identical(tmp_path):
    export_curves(_report(3), tmp_path / "a.csv")
    export_curves(_report(3), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_empty_report_refused(tmp_path):
    with pytest.raises(ValueError):
        export_curves(TrainReport(), tmp_path / "c.csv")
    assert not (tmp_path / "c.csv").exists()


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        export_curves(_report(1), tmp_path / "missing" / "c.csv")


def _reference_early_stop(accs, patience):
    # written out independently: count epochs since the last strict improvement
    best, best_at, since = None, 0, 0
    for epoch, acc in enumerate(accs, 1):
        if best is None or acc - best > 1e-6:
            best, best_at, since = acc, epoch, 0
        else:
            since += 1
            if since == patience:
                return epoch, best_at
    return len(accs), best_at


@settings(max_examples=300, deadline=None)
@given(st.lists(st.sampled_from([0.5, 0.6, 0.7, 0.75, 0.8, 0.9, 1.0]), min_size=1, max_size=25),
       st.integers(1, 6))
def test_early_stop_matches_reference(accs, patience):
    assert simulate_early_stop(accs, patience) == _reference_early_stop(accs, patience)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=200))
def test_confusion_mass_conservation(pairs):
    y_true, y_pred = zip(*pairs)
    cm = confusion_matrix(y_true, y_pred)
    assert cm.sum() == len(pairs)
    assert cm[1, 1] == sum(t == p == 1 for t, p in pairs)
    assert cm[0, 1] == sum(t == 0 and p == 1 for t, p in pairs)
