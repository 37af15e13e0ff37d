"""Embedding analytics: temporal smoothness, PCA, rank, image features.

All distance metrics here operate on L2-normalized vectors, so values
live in [0, 2] and are invariant to positive rescaling of any embedding
row. Smoothness is reported per time lag tau: displacements are pooled
over every (track, t) pair with both endpoints embedded, then summarized
as mean and standard deviation per tau. PCA is a mean-centered SVD with
a deterministic sign convention (the largest-magnitude loading of each
component is positive).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, stats

from .errors import ValidationError
from .model import EmbeddingTable
from .patches import PHASE_CHANNEL, Patch
from .store import DatasetMeta

SMOOTHNESS_SPACES = ("features", "projection2d")
FEATURE_NAMES = ("fluor_radial_slope", "fluor_area", "phase_iqr", "phase_std")
FLUOR_AREA_THRESHOLD = 0.5  # normalized units: halfway between median and p99


@dataclass(frozen=True)
class SmoothnessCurve:
    taus: tuple[int, ...]
    mean: tuple[float, ...]
    std: tuple[float, ...]
    count: tuple[int, ...]
    space: str

    def at(self, tau: int) -> tuple[float, float, int]:
        i = self.taus.index(tau)
        return self.mean[i], self.std[i], self.count[i]

    def to_dict(self) -> dict:
        return {
            "space": self.space,
            "taus": list(self.taus),
            "mean": list(self.mean),
            "std": list(self.std),
            "count": list(self.count),
        }


@dataclass(frozen=True)
class ProjectionResult:
    components: np.ndarray  # [k, d] orthonormal rows
    scores: np.ndarray  # [n, k]
    explained_variance_ratio: np.ndarray  # [k]
    mean: np.ndarray  # [d] of the training rows

    def project(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T


def _normalize_rows(x: np.ndarray, what: str, keys=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    bad = np.nonzero(norms == 0.0)[0]
    if bad.size:
        row = int(bad[0])
        ident = keys[row] if keys is not None else row
        raise ValidationError(f"zero-norm embedding in {what} at row {ident}")
    return x / norms[:, None]


def distance_from_start(track_rows: np.ndarray) -> np.ndarray:
    """Per-frame normalized distance from the track's first embedding."""
    x = np.asarray(track_rows, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValidationError("expected a [T, d] stack of track embeddings")
    unit = _normalize_rows(x, "track")
    d = np.linalg.norm(unit - unit[0], axis=1)
    d[0] = 0.0
    return d


def displacement_at_lag(
    table: EmbeddingTable,
    tau_max: int,
    space: str = "features",
    coords: np.ndarray | None = None,
) -> SmoothnessCurve:
    """Pooled per-lag displacement of normalized embeddings.

    space "features" reads the full-length features; "projection2d" uses
    the supplied [n, 2] coordinates aligned to table rows (external
    projector output), or the built-in 2-component PCA scores when none
    are given. Lags with no eligible pair are absent from the curve.
    """
    if tau_max < 0:
        raise ValidationError("tau_max must be >= 0")
    if space not in SMOOTHNESS_SPACES:
        raise ValidationError(f"space {space!r} not one of {SMOOTHNESS_SPACES}")
    if space == "features":
        data = table.features
    else:
        if coords is None:
            coords = pca_project(table.features, 2).scores
        coords = np.asarray(coords, dtype=np.float64)
        if coords.shape != (len(table), 2):
            raise ValidationError(
                f"projection coords shape {coords.shape} != ({len(table)}, 2)"
            )
        data = coords
    unit = _normalize_rows(data, space, keys=table.keys)

    tracks: dict[tuple[str, int], dict[int, int]] = {}
    for i, (fov, track, t) in enumerate(table.keys):
        tracks.setdefault((fov, track), {})[t] = i

    pooled: dict[int, list[np.ndarray]] = {tau: [] for tau in range(tau_max + 1)}
    for by_t in tracks.values():
        ts = np.array(sorted(by_t), dtype=int)
        rows = np.array([by_t[t] for t in ts], dtype=int)
        for tau in range(tau_max + 1):
            if tau == 0:
                pooled[0].append(np.zeros(len(ts)))
                continue
            # pair frames exactly tau apart, tolerating gaps in the track
            future = {t: r for t, r in zip(ts, rows)}
            a = [r for t, r in zip(ts, rows) if t + tau in future]
            b = [future[t + tau] for t in ts if t + tau in future]
            if a:
                pooled[tau].append(
                    np.linalg.norm(unit[b] - unit[a], axis=1)
                )
    taus, means, stds, counts = [], [], [], []
    for tau in range(tau_max + 1):
        if not pooled[tau]:
            continue
        values = np.concatenate(pooled[tau])
        if values.size == 0:
            continue
        taus.append(tau)
        means.append(float(values.mean()))
        stds.append(float(values.std(ddof=1)) if values.size > 1 else 0.0)
        counts.append(int(values.size))
    return SmoothnessCurve(
        taus=tuple(taus), mean=tuple(means), std=tuple(stds),
        count=tuple(counts), space=space,
    )


def pca_project(x: np.ndarray | EmbeddingTable, k: int) -> ProjectionResult:
    """Mean-centered SVD projection onto the top k components."""
    if isinstance(x, EmbeddingTable):
        x = x.features
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError("expected a [n, d] matrix")
    n, d = x.shape
    if not (1 <= k <= min(n, d)):
        raise ValidationError(f"k={k} outside [1, min(n={n}, d={d})]")
    mean = x.mean(axis=0)
    centered = x - mean
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    # deterministic orientation: largest-magnitude loading positive
    for j in range(k):
        pivot = int(np.argmax(np.abs(vt[j])))
        if vt[j, pivot] < 0:
            vt[j] = -vt[j]
            u[:, j] = -u[:, j]
    total = float((s ** 2).sum())
    ratio = (s[:k] ** 2) / total if total > 0 else np.zeros(k)
    return ProjectionResult(
        components=vt[:k].copy(),
        scores=u[:, :k] * s[:k],
        explained_variance_ratio=ratio,
        mean=mean,
    )


def embedding_rank(table: EmbeddingTable | np.ndarray, rel_tol: float = 1e-6) -> int:
    """Count of singular values above sigma_max * rel_tol after centering."""
    x = table.features if isinstance(table, EmbeddingTable) else np.asarray(table)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValidationError("expected a non-empty [n, d] matrix")
    centered = x - x.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s.size == 0 or s[0] <= 0.0:
        return 0
    return int(np.count_nonzero(s > s[0] * rel_tol))


def compute_image_features(patch: Patch) -> dict[str, float]:
    """Hand-crafted intensity features of one normalized patch.

    fluor_radial_slope: least-squares slope of mean fluorescence per
    integer lateral radius (full circles only, pooled over z).
    fluor_area: fraction of fluorescence voxels above 0.5.
    phase_iqr / phase_std: interquartile range and standard deviation of
    the phase channel.
    """
    data = patch.require_valid()
    if PHASE_CHANNEL not in patch.channels:
        raise ValidationError("patch has no phase channel")
    fluor_names = [c for c in patch.channels if c != PHASE_CHANNEL]
    if not fluor_names:
        raise ValidationError("patch has no fluorescence channel")
    phase = data[patch.channels.index(PHASE_CHANNEL)].astype(np.float64)
    fluor = data[patch.channels.index(fluor_names[0])].astype(np.float64)

    _, ydim, xdim = fluor.shape
    cy, cx = (ydim - 1) / 2.0, (xdim - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(ydim), np.arange(xdim), indexing="ij")
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    rbin = np.floor(r + 0.5).astype(int)
    rmax = int(min(cy, cx))  # only radii with a full circle in the patch
    radii = []
    means = []
    for rad in range(rmax + 1):
        mask = rbin == rad
        # even-sized patches have a half-integer center, leaving bin 0 empty
        if mask.any():
            radii.append(rad)
            means.append(float(fluor[:, mask].mean()))
    if len(radii) >= 2:
        slope = float(np.polyfit(radii, means, 1)[0])
    else:
        slope = 0.0

    q25, q75 = np.percentile(phase, [25, 75])
    return {
        "fluor_radial_slope": slope,
        "fluor_area": float(np.mean(fluor > FLUOR_AREA_THRESHOLD)),
        "phase_iqr": float(q75 - q25),
        "phase_std": float(phase.std()),
    }


def feature_matrix(pipeline, table, keys) -> np.ndarray:
    """[n, len(FEATURE_NAMES)] matrix aligned to the given node keys."""
    rows = []
    for key in keys:
        patch = pipeline.center(table.node(key))
        record = compute_image_features(patch)
        rows.append([record[name] for name in FEATURE_NAMES])
    return np.array(rows, dtype=np.float64)


def correlate_features_with_pcs(features: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Spearman rank correlation per (feature, component) pair.

    Ties get average ranks; a constant column yields NaN, the explicit
    undefined marker (serialized as null).
    """
    features = np.asarray(features, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if features.ndim != 2 or scores.ndim != 2 or features.shape[0] != scores.shape[0]:
        raise ValidationError(
            f"misaligned inputs {features.shape} vs {scores.shape}"
        )
    m, k = features.shape[1], scores.shape[1]
    out = np.full((m, k), np.nan)
    feat_ranks = [stats.rankdata(features[:, i]) for i in range(m)]
    score_ranks = [stats.rankdata(scores[:, j]) for j in range(k)]
    for i in range(m):
        fr = feat_ranks[i]
        if np.ptp(fr) == 0.0:
            continue
        for j in range(k):
            sr = score_ranks[j]
            if np.ptp(sr) == 0.0:
                continue
            fc = fr - fr.mean()
            sc = sr - sr.mean()
            denom = np.sqrt((fc ** 2).sum() * (sc ** 2).sum())
            out[i, j] = float((fc * sc).sum() / denom)
    return out


def infection_fraction_timeseries(records, meta: DatasetMeta) -> dict[str, list[dict]]:
    """Per-condition infected fraction over time.

    records: objects with fov_id, t and a binary value (ground-truth
    annotations or probe predictions), already filtered to one label
    type. Frames with no labeled node are absent from the series.
    """
    counts: dict[tuple[str, int], list[int]] = {}
    for rec in records:
        if rec.value not in (0, 1):
            raise ValidationError(f"non-binary label value {rec.value!r}")
        if rec.fov_id not in meta.conditions:
            raise ValidationError(f"fov {rec.fov_id!r} has no condition in meta")
        cond = meta.conditions[rec.fov_id]
        key = (cond, rec.t)
        entry = counts.setdefault(key, [0, 0])
        entry[0] += int(rec.value)
        entry[1] += 1
    series: dict[str, list[dict]] = {}
    for (cond, t), (pos, n) in sorted(counts.items()):
        series.setdefault(cond, []).append({
            "t": t,
            "hpi_minutes": meta.t0_hpi_minutes + t * meta.dt_minutes,
            "fraction": pos / n,
            "n": n,
        })
    return series


def median_smooth(values, window: int = 3) -> np.ndarray:
    """Odd-window median filter with edge replication."""
    if window < 1 or window % 2 == 0:
        raise ValidationError("window must be odd and >= 1")
    return ndimage.median_filter(
        np.asarray(values, dtype=np.float64), size=window, mode="nearest"
    )
