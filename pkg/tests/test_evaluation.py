import csv

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fakes import color_classes

from colorcnn.checkpoint import state_checksum
from colorcnn.errors import ConfigError
from colorcnn.evaluation import (CSV_COLUMNS, ClassicQuantizer, EvalRecord, IdentityQuantizer,
                                 LearnedQuantizer, QuantizerFamily, average_precision,
                                 evaluate_accuracy, evaluate_jpeg, evaluate_multilabel,
                                 make_quantizer, mean_average_precision, multilabel_accuracy,
                                 rate_accuracy_curve, read_records)
from colorcnn.quantnet import BackboneConfig, build_quantnet
from colorcnn.training import TrainSchedule, load_classifier, train_classifier


def ap_oracle(scores, labels):
    """All-points interpolated AP by enumerating every score threshold."""
    thresholds = sorted(set(scores), reverse=True)
    n_pos = sum(labels)
    pts = []
    for t in thresholds:
        pred = [s >= t for s in scores]
        tp = sum(p and l for p, l in zip(pred, labels))
        pts.append((tp / n_pos, tp / sum(pred)))
    ap, prev_r = 0.0, 0.0
    for i, (r, _) in enumerate(pts):
        best = max(p for rr, p in pts[i:])
        ap += (r - prev_r) * best
        prev_r = r
    return ap


@settings(max_examples=60, deadline=None)
@given(data=st.data(), n=st.integers(1, 100))
def test_ap_matches_brute_force(data, n):
    labels = data.draw(st.lists(st.booleans(), min_size=n, max_size=n))
    if not any(labels):
        assert np.isnan(average_precision(np.zeros(n), np.array(labels)))
        return
    scores = data.draw(st.lists(st.integers(0, 12).map(lambda v: v / 4), min_size=n, max_size=n))
    assert average_precision(np.array(scores), np.array(labels)) == \
        pytest.approx(ap_oracle(scores, labels), abs=1e-12)


def test_ap_hand_case():
    # ranks: + - + -  -> precision 1, 2/3 at recall 0.5, 1.0
    assert average_precision(np.array([0.9, 0.8, 0.7, 0.1]), np.array([1, 0, 1, 0])) == \
        pytest.approx(0.5 * 1 + 0.5 * 2 / 3)


def test_perfect_predictions():
    labels = np.array([[1, 0, 1], [0, 1, 0], [1, 1, 0], [0, 0, 1]])
    logits = np.where(labels == 1, 5.0, -5.0)
    assert multilabel_accuracy(logits, labels) == 100.0
    assert mean_average_precision(logits, labels) == pytest.approx(100.0)
    logits[0, 1] = 0.1  # one wrong label
    assert multilabel_accuracy(logits, labels) == 75.0


def test_eval_record_invariants():
    with pytest.raises(ValueError):
        EvalRecord("mediancut", 1, 101.0, 1.0, "d", "c")
    with pytest.raises(ValueError):
        EvalRecord("mediancut", 1, 50.0, 0.0, "d", "c")


@pytest.fixture(scope="module")
def setup():
    train, test = color_classes(60, seed=0), color_classes(30, seed=1)
    ckpt = train_classifier("resnet18", train, test,
                            TrainSchedule(epochs=8, batch_size=16, peak_lr=0.05), width=0.125)
    return load_classifier(ckpt), test


def test_identity_reproduces_classifier_accuracy(setup):
    clf, test = setup
    rec = evaluate_accuracy(IdentityQuantizer(), clf, test, 24)
    assert rec.accuracy == clf.accuracy
    assert rec.bpp > 0 and rec.map is None


def test_quantized_accuracy_and_bpp(setup):
    clf, test = setup
    recs = [evaluate_accuracy(ClassicQuantizer("mediancut"), clf, test, b) for b in range(1, 7)]
    assert all(a.bpp <= b.bpp for a, b in zip(recs, recs[1:]))
    assert all(r.colors_per_image <= 2 ** r.bits for r in recs)
    # pass-through is an upper bound up to noise (one image here)
    assert max(r.accuracy for r in recs) <= clf.accuracy + 0.5 + 100 / len(test)


def test_learned_quantizer_checks_bits(setup):
    clf, test = setup
    fixed = build_quantnet(BackboneConfig(mode="colorcnn", colors=4, base_channels=4, levels=2))
    q = LearnedQuantizer(fixed)
    rec = evaluate_accuracy(q, clf, test, 2)
    assert rec.method == "colorcnn" and rec.colors_per_image <= 4
    with pytest.raises(ConfigError):
        evaluate_accuracy(q, clf, test, 3)
    with pytest.raises(ConfigError):
        make_quantizer("colorcnn_plus", fixed)


def test_plus_multi_matches_single(setup):
    _, test = setup
    model = build_quantnet(BackboneConfig(base_channels=4, levels=2, feature_dim=16,
                                          bottleneck_dim=4)).eval()
    q = LearnedQuantizer(model)
    multi = q.quantize_multi(test.images[:4], [1, 3])
    for b in (1, 3):
        assert all(x == y for x, y in zip(multi[b], q.quantize(test.images[:4], b)))


def test_quantizer_family_loads_per_bits(setup):
    clf, test = setup
    loaded = []

    def loader(bits):
        loaded.append(bits)
        return build_quantnet(BackboneConfig(mode="colorcnn", colors=2 ** bits,
                                             base_channels=4, levels=2))

    fam = QuantizerFamily("colorcnn", loader)
    for b in (1, 2, 1):
        evaluate_accuracy(fam, clf, test.head(6), b)
    assert loaded == [1, 2]


def test_evaluation_side_effect_free_and_deterministic(setup):
    clf, test = setup
    model = build_quantnet(BackboneConfig(base_channels=4, levels=2, feature_dim=16,
                                          bottleneck_dim=4)).eval()
    before = (state_checksum(clf.model), state_checksum(model))
    a = evaluate_accuracy(LearnedQuantizer(model), clf, test, 2)
    b = evaluate_accuracy(LearnedQuantizer(model), clf, test, 2)
    assert a == b
    assert (state_checksum(clf.model), state_checksum(model)) == before


def test_multilabel_path():
    train = color_classes(40, seed=0, multilabel=True)
    test = color_classes(20, seed=1, multilabel=True)
    clf = load_classifier(train_classifier("alexnet", train, test,
                                           TrainSchedule(epochs=2, batch_size=8), width=0.05))
    rec = evaluate_accuracy(ClassicQuantizer("mediancut"), clf, test, 1)
    assert rec.map is not None and 0 <= rec.map <= 100
    assert evaluate_multilabel(ClassicQuantizer("octree"), clf, test, 2).map is not None
    assert evaluate_jpeg(clf, test, 50).map is not None


def test_multilabel_rejects_single_label_checkpoint(setup):
    clf, test = setup
    ml = color_classes(6, multilabel=True)
    with pytest.raises(TypeError):
        evaluate_multilabel(ClassicQuantizer("mediancut"), clf, ml, 1)


def test_curve_rows_and_plots(tmp_path, setup):
    clf, test = setup
    quantizers = {"mediancut": ClassicQuantizer("mediancut"), "octree": ClassicQuantizer("octree")}
    recs = rate_accuracy_curve(quantizers, clf, test.head(10), range(1, 7), [10, 50, 90],
                               tmp_path, seed=7)
    rows = read_records(tmp_path / "curve.csv")
    assert len(recs) == len(rows) == 2 * 6 + 3
    assert tuple(rows[0]) == CSV_COLUMNS
    assert {r["seed"] for r in rows} == {"7"}
    for m in quantizers:
        bpp = [float(r["bpp"]) for r in rows if r["method"] == m]
        assert all(a <= b for a, b in zip(bpp, bpp[1:]))
    assert [r["bits"] for r in rows if r["method"] == "jpeg"] == ["10", "50", "90"]
    assert (tmp_path / "curve.png").stat().st_size > 0
    assert (tmp_path / "curve.svg").read_text().lstrip().startswith("<?xml")


def test_curve_empty_methods(tmp_path, setup):
    clf, test = setup
    assert rate_accuracy_curve({}, clf, test, range(1, 7), [], tmp_path) == []
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert lines == [",".join(CSV_COLUMNS)]


def test_curve_records_failures_and_continues(tmp_path, setup):
    clf, test = setup
    fixed = LearnedQuantizer(build_quantnet(BackboneConfig(mode="colorcnn", colors=2,
                                                           base_channels=4, levels=2)))
    recs = rate_accuracy_curve({"colorcnn": fixed, "mediancut": ClassicQuantizer("mediancut")},
                               clf, test.head(6), [1, 2], [], tmp_path)
    assert [(r.method, r.bits) for r in recs] == [("colorcnn", 1), ("mediancut", 1),
                                                  ("mediancut", 2)]
    rows = list(csv.DictReader(open(tmp_path / "curve.csv")))
    assert len(rows) == 4
    failed = [r for r in rows if not r["accuracy"]]
    assert [(r["method"], r["bits"]) for r in failed] == [("colorcnn", "2")]
    assert "colorcnn\t2" in (tmp_path / "curve_errors.txt").read_text()
