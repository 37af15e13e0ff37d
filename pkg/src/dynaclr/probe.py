"""Linear probing of embeddings: logistic regression on frozen features.

The probe is trained on full-length features h, never on projections z.
Splits are stratified by class and grouped by track, so every node of a
track lands on one side and temporal self-similarity cannot leak across
the split. The fit is a deterministic full-batch minimization of the
L2-regularized logistic loss (bias unregularized); features are
standardized internally for conditioning and the scaler is folded back
into the published weights, so a ProbeModel is a plain linear function
of raw embeddings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize
from scipy.special import expit

from .errors import ConfigurationError, LeakageError, ValidationError
from .model import EmbeddingTable
from .store import NodeKey

GRAD_TOL = 1e-6
MAX_ITER = 500
_PROB_EPS = 1e-12


@dataclass(frozen=True)
class ProbeModel:
    weights: np.ndarray  # [feature_dim]
    bias: float
    label_type: str
    l2: float = 1.0
    status: str = "converged"  # "converged" | "iteration_cap"
    n_iter: int = 0
    train_keys: tuple[NodeKey, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not np.all(np.isfinite(self.weights)) or not np.isfinite(self.bias):
            raise ValidationError("probe parameters must be finite")

    def logits(self, h: np.ndarray) -> np.ndarray:
        h = np.asarray(h, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.weights.shape[0]:
            raise ValidationError(
                f"embedding dim {h.shape} does not match probe dim "
                f"{self.weights.shape[0]}"
            )
        return h @ self.weights + self.bias

    def probabilities(self, h: np.ndarray) -> np.ndarray:
        p = expit(self.logits(h))
        return np.clip(p, _PROB_EPS, 1.0 - _PROB_EPS)

    def to_dict(self) -> dict:
        return {
            "weights": [float(w) for w in self.weights],
            "bias": float(self.bias),
            "label_type": self.label_type,
            "l2": self.l2,
            "status": self.status,
            "n_iter": self.n_iter,
            "train_keys": [[k[0], k[1], k[2]] for k in self.train_keys],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeModel":
        try:
            return cls(
                weights=np.asarray(d["weights"], dtype=np.float64),
                bias=float(d["bias"]),
                label_type=str(d["label_type"]),
                l2=float(d.get("l2", 1.0)),
                status=str(d.get("status", "converged")),
                n_iter=int(d.get("n_iter", 0)),
                train_keys=tuple(
                    (str(f), int(tr), int(t)) for f, tr, t in d.get("train_keys", [])
                ),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"malformed probe model: {e}") from e

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ProbeModel":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def split_annotations(
    records, fraction: float = 0.5, seed: int = 0
) -> tuple[list[NodeKey], list[NodeKey]]:
    """Track-grouped stratified split of annotation records.

    Tracks are stratified by whether they contain any positive label;
    within each stratum a seeded shuffle sends a `fraction` share of
    tracks to the train side. Every node of a track lands on one side.
    """
    records = list(records)
    if not records:
        raise ValidationError("no records to split")
    label_types = {r.label_type for r in records}
    if len(label_types) != 1:
        raise ValidationError(f"records mix label types {sorted(label_types)}")
    if not (0.0 < fraction < 1.0):
        raise ValidationError("fraction must be in (0, 1)")
    values = {r.value for r in records}
    if values != {0, 1}:
        raise ValidationError(
            f"both classes must be present, got values {sorted(values)}"
        )
    by_track: dict[tuple[str, int], list] = {}
    for r in records:
        by_track.setdefault((r.fov_id, r.track_id), []).append(r)

    strata: dict[int, list[tuple[str, int]]] = {0: [], 1: []}
    for track, recs in sorted(by_track.items()):
        strata[int(any(r.value == 1 for r in recs))].append(track)

    rng = np.random.default_rng(seed)
    train_tracks: set[tuple[str, int]] = set()
    for label in (0, 1):
        tracks = strata[label]
        if not tracks:
            continue
        order = rng.permutation(len(tracks))
        n_train = int(round(fraction * len(tracks)))
        train_tracks.update(tracks[i] for i in order[:n_train])

    train_keys, eval_keys = [], []
    for r in records:
        key = (r.fov_id, r.track_id, r.t)
        if (r.fov_id, r.track_id) in train_tracks:
            train_keys.append(key)
        else:
            eval_keys.append(key)
    if not train_keys or not eval_keys:
        raise ValidationError(
            f"fraction {fraction} leaves one side of the split empty"
        )
    train_set, eval_set = set(train_keys), set(eval_keys)
    for side, key_set in (("train", train_set), ("eval", eval_set)):
        labels = {r.value for r in records
                  if (r.fov_id, r.track_id, r.t) in key_set}
        if labels != {0, 1}:
            raise ValidationError(f"{side} side is missing a class: {sorted(labels)}")
    return sorted(train_set), sorted(eval_set)


def train_probe(
    h: np.ndarray,
    labels: np.ndarray,
    label_type: str = "infection",
    l2: float = 1.0,
    keys: list[NodeKey] | None = None,
    max_iter: int = MAX_ITER,
) -> ProbeModel:
    """Fit the regularized logistic regression on features h.

    Deterministic full-batch quasi-Newton minimization to gradient norm
    below 1e-6; hitting the iteration cap is reported as status
    "iteration_cap", not a failure (perfect separability never converges
    in norm).
    """
    x = np.asarray(h, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValidationError(f"misaligned shapes {x.shape} vs {y.shape}")
    if not set(np.unique(y)) <= {0.0, 1.0}:
        raise ValidationError("labels must be binary 0/1")
    if l2 < 0:
        raise ConfigurationError("l2 must be >= 0")

    mean = x.mean(axis=0)
    std = x.std(axis=0)
    scale = np.where(std > 0, std, 1.0)
    xs = (x - mean) / scale
    n, d = xs.shape

    def objective(theta: np.ndarray) -> tuple[float, np.ndarray]:
        w, b = theta[:d], theta[d]
        s = xs @ w + b
        # log(1 + exp(s)) - y*s, stable for either sign of s
        loss = float(np.logaddexp(0.0, s).sum() - (y * s).sum())
        loss += 0.5 * l2 * float(w @ w)
        p = expit(s)
        grad_w = xs.T @ (p - y) + l2 * w
        grad_b = float((p - y).sum())
        return loss, np.concatenate([grad_w, [grad_b]])

    result = optimize.minimize(
        objective,
        np.zeros(d + 1),
        jac=True,
        method="L-BFGS-B",
        # ftol 0 so the only stop conditions are the gradient norm target
        # and the iteration cap
        options={"maxiter": max_iter, "gtol": GRAD_TOL, "ftol": 0.0},
    )
    theta = result.x
    status = "converged" if result.status == 0 else "iteration_cap"

    w_std, b_std = theta[:d], float(theta[d])
    weights = w_std / scale
    bias = b_std - float((w_std * mean / scale).sum())
    return ProbeModel(
        weights=weights,
        bias=bias,
        label_type=label_type,
        l2=l2,
        status=status,
        n_iter=int(result.nit),
        train_keys=tuple(keys) if keys else (),
    )


def evaluate_probe(
    model: ProbeModel,
    h: np.ndarray,
    labels: np.ndarray,
    keys: list[NodeKey] | None = None,
) -> dict[str, float]:
    """Accuracy and positive-class F1 on held-out rows.

    When keys are given they must be disjoint from the model's training
    manifest; overlap is a leakage error, not a warning.
    """
    if keys is not None and model.train_keys:
        overlap = set(keys) & set(model.train_keys)
        if overlap:
            raise LeakageError(
                f"{len(overlap)} evaluation keys overlap the train manifest, "
                f"e.g. {sorted(overlap)[:3]}"
            )
    y = np.asarray(labels, dtype=np.int64)
    pred = (model.logits(h) >= 0.0).astype(np.int64)
    if y.shape != pred.shape:
        raise ValidationError(f"misaligned labels {y.shape} vs {pred.shape}")
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    accuracy = float(np.mean(pred == y))
    denom = 2 * tp + fp + fn
    f1 = (2 * tp / denom) if denom > 0 else 0.0
    return {"accuracy": accuracy, "f1": float(f1)}


@dataclass(frozen=True)
class PredictedLabel:
    fov_id: str
    track_id: int
    t: int
    label_type: str
    value: int
    probability: float

    @property
    def node_key(self) -> NodeKey:
        return (self.fov_id, self.track_id, self.t)

    def to_dict(self) -> dict:
        return {
            "fov_id": self.fov_id,
            "track_id": self.track_id,
            "t": self.t,
            "label_type": self.label_type,
            "value": self.value,
            "probability": self.probability,
        }


def predict_states(model: ProbeModel, table: EmbeddingTable) -> list[PredictedLabel]:
    """One predicted label and probability per embedding row."""
    probs = model.probabilities(table.features)
    out = []
    for key, p in zip(table.keys, probs):
        out.append(
            PredictedLabel(
                fov_id=key[0],
                track_id=key[1],
                t=key[2],
                label_type=model.label_type,
                value=int(p >= 0.5),
                probability=float(p),
            )
        )
    return out
