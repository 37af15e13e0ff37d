"""Tests for the linear probe: splitting, fitting, metrics, prediction.

Oracles are independent of the implementation: a brute-force confusion
matrix for accuracy/F1, a from-scratch gradient of the regularized
log-loss evaluated at the returned parameters for the fit, and direct
counting on the track-grouped split. The duplicate-rows check exercises
the scaling invariance of the argmin: doubling every row and doubling
l2 must leave the decision function unchanged.
"""

import numpy as np
import pytest

from dynaclr.errors import ConfigurationError, LeakageError, ValidationError
from dynaclr.model import EmbeddingTable
from dynaclr.probe import (
    ProbeModel,
    evaluate_probe,
    predict_states,
    split_annotations,
    train_probe,
)
from dynaclr.store import AnnotationRecord


def make_records(n_pos_tracks, n_neg_tracks, frames=4, label_type="infection"):
    """Single-FOV records: first n_pos_tracks carry value 1 at every frame."""
    recs = []
    for k in range(n_pos_tracks + n_neg_tracks):
        value = 1 if k < n_pos_tracks else 0
        for t in range(frames):
            recs.append(
                AnnotationRecord("A1", k, t, label_type, value, "ground_truth")
            )
    return recs


def table_from(keys, features):
    feats = np.asarray(features, dtype=np.float32)
    projs = np.zeros((feats.shape[0], 4), dtype=np.float32)
    projs[:, 0] = 1.0
    return EmbeddingTable(keys=list(keys), features=feats, projections=projs)


def noisy_fixture(seed, n=80, d=4):
    """Non-separable binary problem with a planted linear signal."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    margin = x[:, 0] - 0.5 * x[:, 1] + 1.2 * rng.normal(size=n)
    y = (margin > 0).astype(np.float64)
    return x, y


# ---------------------------------------------------------------- splits


def test_split_even_fixture_halves_tracks():
    recs = make_records(50, 50, frames=3)
    train, evl = split_annotations(recs, fraction=0.5, seed=0)
    train_tracks = {(f, tr) for f, tr, _ in train}
    eval_tracks = {(f, tr) for f, tr, _ in evl}
    assert len(train_tracks) == 50
    assert len(eval_tracks) == 50
    by_key = {r.node_key: r.value for r in recs}
    assert {by_key[k] for k in train} == {0, 1}
    assert {by_key[k] for k in evl} == {0, 1}


def test_split_groups_whole_tracks():
    # Onset tracks flip 0 -> 1 midway; grouping must still hold per track.
    recs = []
    for k in range(20):
        for t in range(4):
            recs.append(AnnotationRecord("A1", k, t, "infection",
                                         int(t >= 2), "ground_truth"))
    for k in range(20, 40):
        for t in range(4):
            recs.append(AnnotationRecord("A1", k, t, "infection", 0,
                                         "ground_truth"))
    train, evl = split_annotations(recs, fraction=0.5, seed=7)
    train_tracks = {(f, tr) for f, tr, _ in train}
    eval_tracks = {(f, tr) for f, tr, _ in evl}
    assert not train_tracks & eval_tracks
    for f, tr, t in train:
        assert (f, tr) in train_tracks and (f, tr) not in eval_tracks


def test_split_disjoint_sorted_and_complete():
    recs = make_records(6, 6, frames=5)
    train, evl = split_annotations(recs, fraction=0.5, seed=3)
    assert not set(train) & set(evl)
    assert train == sorted(train)
    assert evl == sorted(evl)
    assert set(train) | set(evl) == {r.node_key for r in recs}


def test_split_fraction_bounds_rejected():
    recs = make_records(4, 4)
    for fraction in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(ValidationError, match="fraction"):
            split_annotations(recs, fraction=fraction, seed=0)


def test_split_seed_determinism():
    recs = make_records(50, 50)
    first = split_annotations(recs, fraction=0.5, seed=11)
    second = split_annotations(recs, fraction=0.5, seed=11)
    assert first == second
    other = split_annotations(recs, fraction=0.5, seed=12)
    assert other[0] != first[0]


def test_split_empty_and_single_class_rejected():
    with pytest.raises(ValidationError, match="no records"):
        split_annotations([], fraction=0.5, seed=0)
    all_neg = make_records(0, 6)
    with pytest.raises(ValidationError, match="both classes"):
        split_annotations(all_neg, fraction=0.5, seed=0)


def test_split_mixed_label_types_rejected():
    recs = make_records(2, 2, label_type="infection")
    recs += make_records(2, 2, label_type="division")
    with pytest.raises(ValidationError, match="label types"):
        split_annotations(recs, fraction=0.5, seed=0)


def test_split_side_missing_class_rejected():
    # Two negative tracks, one positive: round(0.5) = 0 positives go to
    # train, so the train side sees only class 0.
    recs = make_records(1, 2)
    with pytest.raises(ValidationError, match="missing a class"):
        split_annotations(recs, fraction=0.5, seed=0)


def test_split_empty_side_rejected():
    # One track per class: round(0.5) = 0 from each stratum leaves the
    # train side empty.
    recs = make_records(1, 1)
    with pytest.raises(ValidationError, match="one side of the split empty"):
        split_annotations(recs, fraction=0.5, seed=0)


# ---------------------------------------------------------------- training


def test_separable_pair_boundary_near_zero():
    h = np.array([[-1.0], [1.0]])
    y = np.array([0.0, 1.0])
    model = train_probe(h, y)
    assert model.weights[0] > 0
    # Symmetric fixture: the optimum has zero bias, so the decision
    # boundary sits at the origin up to solver tolerance.
    assert abs(model.bias / model.weights[0]) < 1e-5
    metrics = evaluate_probe(model, h, y)
    assert metrics["accuracy"] == 1.0
    assert metrics["f1"] == 1.0


def test_null_labels_heldout_accuracy_near_half():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2000, 4))
    y = rng.integers(0, 2, size=2000).astype(np.float64)
    model = train_probe(x[:1000], y[:1000])
    metrics = evaluate_probe(model, x[1000:], y[1000:])
    assert abs(metrics["accuracy"] - 0.5) < 0.06


def test_duplicated_rows_with_doubled_l2_match():
    x, y = noisy_fixture(seed=1, n=60, d=3)
    base = train_probe(x, y, l2=1.0)
    doubled = train_probe(np.vstack([x, x]), np.concatenate([y, y]), l2=2.0)
    probes = np.random.default_rng(5).normal(size=(50, 3))
    assert np.max(np.abs(base.logits(probes) - doubled.logits(probes))) < 1e-6


def test_gradient_vanishes_at_returned_parameters():
    x, y = noisy_fixture(seed=2, n=80, d=4)
    l2 = 1.0
    model = train_probe(x, y, l2=l2)
    assert model.status == "converged"
    # Recompute the standardized objective gradient from scratch at the
    # published raw-space parameters.
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    scale = np.where(std > 0, std, 1.0)
    xs = (x - mean) / scale
    w_std = model.weights * scale
    b_std = model.bias + float(model.weights @ mean)
    s = xs @ w_std + b_std
    assert np.allclose(s, model.logits(x), atol=1e-9)
    p = 1.0 / (1.0 + np.exp(-s))
    grad_w = xs.T @ (p - y) + l2 * w_std
    grad_b = float((p - y).sum())
    assert np.max(np.abs(np.append(grad_w, grad_b))) < 5e-6


def test_iteration_cap_reported_not_raised():
    x, y = noisy_fixture(seed=4)
    model = train_probe(x, y, max_iter=2)
    assert model.status == "iteration_cap"
    assert np.all(np.isfinite(model.weights)) and np.isfinite(model.bias)
    metrics = evaluate_probe(model, x, y)
    assert 0.0 <= metrics["accuracy"] <= 1.0


def test_constant_feature_column_gets_zero_weight():
    x, y = noisy_fixture(seed=6, n=60, d=3)
    x = np.column_stack([x, np.full(60, 5.0)])
    model = train_probe(x, y)
    assert abs(model.weights[3]) < 1e-12


def test_train_validation_errors():
    x, y = noisy_fixture(seed=8, n=10, d=2)
    with pytest.raises(ValidationError, match="misaligned"):
        train_probe(x, y[:-1])
    with pytest.raises(ValidationError, match="misaligned"):
        train_probe(x[:, 0], y)
    with pytest.raises(ValidationError, match="binary"):
        train_probe(x, y + 1.0)
    with pytest.raises(ConfigurationError, match="l2"):
        train_probe(x, y, l2=-0.5)


# ---------------------------------------------------------------- metrics


def test_metrics_match_confusion_matrix_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(40, 2))
    y = rng.integers(0, 2, size=40)
    model = ProbeModel(weights=np.array([1.0, 0.0]), bias=-0.2,
                       label_type="infection")
    metrics = evaluate_probe(model, x, y)
    tp = tn = fp = fn = 0
    for row, label in zip(x, y):
        pred = 1 if row[0] * 1.0 + 0.0 * row[1] - 0.2 >= 0 else 0
        if pred == 1 and label == 1:
            tp += 1
        elif pred == 0 and label == 0:
            tn += 1
        elif pred == 1 and label == 0:
            fp += 1
        else:
            fn += 1
    assert metrics["accuracy"] == (tp + tn) / 40
    assert metrics["f1"] == 2 * tp / (2 * tp + fp + fn)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    harmonic = (2 * precision * recall / (precision + recall)
                if precision + recall else 0.0)
    assert metrics["f1"] == pytest.approx(harmonic, abs=1e-12)


def test_perfect_predictions_score_one():
    model = ProbeModel(weights=np.array([2.0]), bias=0.0,
                       label_type="infection")
    h = np.array([[-1.0], [1.0], [-2.0], [3.0]])
    y = np.array([0, 1, 0, 1])
    metrics = evaluate_probe(model, h, y)
    assert metrics == {"accuracy": 1.0, "f1": 1.0}


def test_all_negative_predictor_on_balanced_labels():
    model = ProbeModel(weights=np.array([0.0]), bias=-3.0,
                       label_type="infection")
    h = np.ones((10, 1))
    y = np.array([0] * 5 + [1] * 5)
    metrics = evaluate_probe(model, h, y)
    assert metrics["accuracy"] == 0.5
    assert metrics["f1"] == 0.0


def test_evaluation_key_overlap_is_leakage():
    model = ProbeModel(weights=np.array([1.0]), bias=0.0,
                       label_type="infection",
                       train_keys=(("A1", 0, 0), ("A1", 0, 1)))
    h = np.array([[1.0], [-1.0]])
    y = np.array([1, 0])
    with pytest.raises(LeakageError, match="overlap the train manifest"):
        evaluate_probe(model, h, y, keys=[("A1", 0, 1), ("B1", 2, 0)])
    # Disjoint keys and omitted keys both evaluate normally.
    ok = evaluate_probe(model, h, y, keys=[("B1", 2, 0), ("B1", 2, 1)])
    assert ok["accuracy"] == 1.0
    assert evaluate_probe(model, h, y)["accuracy"] == 1.0


def test_evaluate_misaligned_labels_rejected():
    model = ProbeModel(weights=np.array([1.0]), bias=0.0,
                       label_type="infection")
    with pytest.raises(ValidationError, match="misaligned"):
        evaluate_probe(model, np.ones((4, 1)), np.array([1, 0]))


# ---------------------------------------------------------------- prediction


def test_predict_states_contract():
    keys = [("A1", 0, t) for t in range(3)]
    keys += [("A1", 1, 0), ("B1", 7, 0), ("B1", 7, 1), ("B1", 8, 2)]
    feats = np.array([[-2.0, 1.0], [-1.0, 0.5], [0.5, -0.2], [3.0, -1.0],
                      [2.0, 0.0], [-0.5, 0.1], [1.0, 1.0]])
    table = table_from(keys, feats)
    model = ProbeModel(weights=np.array([1.0, -1.0]), bias=0.1,
                       label_type="infection")
    preds = predict_states(model, table)
    assert len(preds) == len(table)
    assert [p.node_key for p in preds] == table.keys
    for pred in preds:
        assert 0.0 < pred.probability < 1.0
        assert pred.value == int(pred.probability >= 0.5)
        assert pred.label_type == "infection"
    assert {p.value for p in preds} == {0, 1}


def test_predict_threshold_flips_exactly_at_half():
    keys = [("A1", 0, t) for t in range(5)]
    feats = np.array([[-2.0], [-1e-6], [0.0], [1e-6], [2.0]])
    table = table_from(keys, feats)
    model = ProbeModel(weights=np.array([1.0]), bias=0.0,
                       label_type="division")
    values = [p.value for p in predict_states(model, table)]
    # sigmoid(0) = 0.5 sits on the positive side of the threshold.
    assert values == [0, 0, 1, 1, 1]


def test_predict_dimension_mismatch_rejected():
    table = table_from([("A1", 0, 0)], np.ones((1, 3)))
    model = ProbeModel(weights=np.array([1.0, 2.0]), bias=0.0,
                       label_type="infection")
    with pytest.raises(ValidationError, match="does not match"):
        predict_states(model, table)


def test_probabilities_clipped_inside_open_interval():
    model = ProbeModel(weights=np.array([1000.0]), bias=0.0,
                       label_type="infection")
    p = model.probabilities(np.array([[100.0], [-100.0]]))
    assert 0.0 < p[1] < p[0] < 1.0


# ---------------------------------------------------------------- model io


def test_probe_model_json_round_trip(tmp_path):
    x, y = noisy_fixture(seed=9, n=40, d=3)
    keys = [("A1", k, 0) for k in range(40)]
    model = train_probe(x, y, label_type="division", l2=0.5, keys=keys)
    path = model.save(tmp_path / "probe.json")
    loaded = ProbeModel.load(path)
    assert np.array_equal(loaded.weights, model.weights)
    assert loaded.bias == model.bias
    assert loaded.label_type == "division"
    assert loaded.l2 == 0.5
    assert loaded.status == model.status
    assert loaded.n_iter == model.n_iter
    assert loaded.train_keys == model.train_keys


def test_probe_model_nonfinite_parameters_rejected():
    with pytest.raises(ValidationError, match="finite"):
        ProbeModel(weights=np.array([np.nan]), bias=0.0,
                   label_type="infection")
    with pytest.raises(ValidationError, match="finite"):
        ProbeModel(weights=np.array([1.0]), bias=float("inf"),
                   label_type="infection")


def test_probe_model_malformed_dict_rejected():
    with pytest.raises(ValidationError, match="malformed"):
        ProbeModel.from_dict({"weights": [1.0]})
