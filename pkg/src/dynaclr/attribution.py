"""Input-space attribution for probe decisions on single-cell patches.

Two methods over a frozen scorer (encoder features through a linear
probe head, or any callable mapping a patch to a scalar logit):

  occlusion           : slide a baseline-filled window over the patch,
                         re-score, and average the logit drop over every
                         window covering each voxel.
  integrated gradients: midpoint-rule path integral of the gradient
                         from a baseline to the input; satisfies the
                         completeness property (attributions sum to the
                         score difference) for smooth scorers.

Both are deterministic given (parameters, patch, settings). The zero
baseline is meaningful here because normalization places the
fluorescence median and the phase mean at zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CapabilityError, ConfigurationError, ValidationError
from .model import Encoder
from .patches import Patch
from .probe import ProbeModel

FULL_SCALE_WINDOW = (15, 8, 8)
FULL_SCALE_STRIDE = (15, 4, 4)


@dataclass(frozen=True)
class AttributionMap:
    values: np.ndarray  # [C, Z, Y, X], aligned to the input patch
    method: str  # "occlusion" | "integrated_gradients"
    head: str  # probe label type, e.g. "infection"
    predicted_probability: float | None = None
    true_class: int | None = None
    settings: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.ndim != 4:
            raise ValidationError("attribution values must be [C, Z, Y, X]")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("attribution values must be finite")


def _as_array(patch) -> np.ndarray:
    if isinstance(patch, Patch):
        return patch.require_valid()
    arr = np.asarray(patch)
    if arr.ndim != 4:
        raise ValidationError("patch must be [C, Z, Y, X]")
    return arr


def default_occlusion_geometry(
    shape: tuple[int, int, int]
) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    """Window/stride for a given (Z, Y, X): full depth, lateral size/16
    windows with size/32 strides (the full-scale values at 128 pixels)."""
    z, y, x = shape
    window = (z, max(1, y // 16), max(1, x // 16))
    stride = (z, max(1, y // 32), max(1, x // 32))
    return window, stride


def _axis_positions(dim: int, win: int, stride: int) -> list[int]:
    positions = list(range(0, dim - win + 1, stride))
    if positions[-1] != dim - win:
        positions.append(dim - win)  # keep the final window flush
    return positions


def occlusion_map(
    score_fn,
    patch,
    window: tuple[int, int, int] = FULL_SCALE_WINDOW,
    stride: tuple[int, int, int] = FULL_SCALE_STRIDE,
    baseline: float = 0.0,
    head: str = "infection",
    per_channel: bool = False,
    true_class: int | None = None,
) -> AttributionMap:
    """Mean logit drop per voxel over all baseline-filled windows.

    Windows replace all channels jointly by default; per_channel=True
    occludes one channel at a time, giving channel-resolved values.
    """
    x = _as_array(patch).astype(np.float64)
    c, zdim, ydim, xdim = x.shape
    wz, wy, wx = window
    sz, sy, sx = stride
    if wz > zdim or wy > ydim or wx > xdim:
        raise ConfigurationError(
            f"occlusion window {window} exceeds patch shape {(zdim, ydim, xdim)}"
        )
    if min(window) < 1 or min(stride) < 1:
        raise ConfigurationError("window and stride must be >= 1")

    base_score = float(score_fn(x))
    drops = np.zeros_like(x)
    cover = np.zeros_like(x)
    channel_groups = [[i] for i in range(c)] if per_channel else [list(range(c))]
    for chans in channel_groups:
        for z0 in _axis_positions(zdim, wz, sz):
            for y0 in _axis_positions(ydim, wy, sy):
                for x0 in _axis_positions(xdim, wx, sx):
                    occluded = x.copy()
                    occluded[chans, z0:z0 + wz, y0:y0 + wy, x0:x0 + wx] = baseline
                    drop = base_score - float(score_fn(occluded))
                    region = np.s_[chans, z0:z0 + wz, y0:y0 + wy, x0:x0 + wx]
                    drops[region] += drop
                    cover[region] += 1.0
    values = np.divide(drops, cover, out=np.zeros_like(drops), where=cover > 0)
    prob = 1.0 / (1.0 + np.exp(-base_score))
    return AttributionMap(
        values=values,
        method="occlusion",
        head=head,
        predicted_probability=float(prob),
        true_class=true_class,
        settings={
            "window": list(window),
            "stride": list(stride),
            "baseline": baseline,
            "per_channel": per_channel,
        },
    )


def integrated_gradients_map(
    score_fn,
    patch,
    baseline: float | np.ndarray = 0.0,
    steps: int = 32,
    multiply_inputs: bool = False,
    head: str = "infection",
    true_class: int | None = None,
) -> AttributionMap:
    """Midpoint-rule path integral of the score gradient.

    IG_v = (x_v - x'_v) * mean_k grad_v at x' + a_k (x - x'), with
    a_k = (k - 0.5) / steps. multiply_inputs applies the extra
    elementwise product with the input (off by default; standard IG
    already carries the x - x' factor).
    """
    gradient = getattr(score_fn, "gradient", None)
    if gradient is None:
        raise CapabilityError(
            "score_fn exposes no gradient(patch); integrated gradients "
            "needs a differentiable scorer"
        )
    if steps < 2:
        raise ConfigurationError("steps must be >= 2")
    x = _as_array(patch).astype(np.float64)
    if np.isscalar(baseline):
        ref = np.full_like(x, float(baseline))
    else:
        ref = np.asarray(baseline, dtype=np.float64)
        if ref.shape != x.shape:
            raise ValidationError(
                f"baseline shape {ref.shape} does not match patch {x.shape}"
            )
    delta = x - ref
    total = np.zeros_like(x)
    for k in range(1, steps + 1):
        alpha = (k - 0.5) / steps
        total += np.asarray(gradient(ref + alpha * delta), dtype=np.float64)
    values = delta * total / steps
    if multiply_inputs:
        values = values * x
    score = float(score_fn(x))
    prob = 1.0 / (1.0 + np.exp(-score))
    return AttributionMap(
        values=values,
        method="integrated_gradients",
        head=head,
        predicted_probability=float(prob),
        true_class=true_class,
        settings={
            "baseline": "array" if not np.isscalar(baseline) else float(baseline),
            "steps": steps,
            "multiply_inputs": multiply_inputs,
        },
    )


def clip_for_display(
    amap: AttributionMap, low_pct: float = 1.0, high_pct: float = 99.0
) -> AttributionMap:
    """Clamp values to the [low_pct, high_pct] percentile range.

    Percentiles are anchored to actual order statistics (nearest rank)
    so the anchors survive the clamp and reclipping with the same
    percentiles is an exact no-op.
    """
    if low_pct >= high_pct:
        raise ValidationError(f"low percentile {low_pct} >= high {high_pct}")
    lo, hi = np.percentile(amap.values, [low_pct, high_pct], method="nearest")
    clipped = np.clip(amap.values, lo, hi)
    settings = dict(amap.settings)
    settings["clip_percentiles"] = [low_pct, high_pct]
    return AttributionMap(
        values=clipped,
        method=amap.method,
        head=amap.head,
        predicted_probability=amap.predicted_probability,
        true_class=amap.true_class,
        settings=settings,
    )


class ProbeScore:
    """Frozen encoder + linear probe head as a differentiable scorer.

    Calls map a [C, Z, Y, X] patch to the probe logit on features h;
    gradient() backpropagates that logit to the input voxels. The score
    runs in the dtype of the supplied model's parameters, so a model
    cast to double gives a double-precision path integral.
    """

    def __init__(self, model: Encoder, probe: ProbeModel):
        self.model = model
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.dtype = next(model.parameters()).dtype
        self.weights = torch.as_tensor(probe.weights, dtype=self.dtype)
        self.bias = float(probe.bias)
        self.head = probe.label_type

    def _logit(self, x: torch.Tensor) -> torch.Tensor:
        h, _ = self.model(x)
        return h[0] @ self.weights + self.bias

    def __call__(self, patch: np.ndarray) -> float:
        x = torch.as_tensor(np.asarray(patch)[None], dtype=self.dtype)
        with torch.no_grad():
            return float(self._logit(x))

    def gradient(self, patch: np.ndarray) -> np.ndarray:
        x = torch.as_tensor(np.asarray(patch)[None], dtype=self.dtype)
        x.requires_grad_(True)
        logit = self._logit(x)
        logit.backward()
        return x.grad[0].detach().numpy()


def save_attribution(amap: AttributionMap, base: str | Path) -> tuple[Path, Path]:
    """Write <base>.bin (raw little-endian float32) and <base>.json."""
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    bin_path = base.with_suffix(".bin")
    np.ascontiguousarray(amap.values, dtype="<f4").tofile(bin_path)
    sidecar = {
        "method": amap.method,
        "head": amap.head,
        "predicted_probability": amap.predicted_probability,
        "true_class": amap.true_class,
        "shape": list(amap.values.shape),
        "settings": amap.settings,
    }
    json_path = base.with_suffix(".json")
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")
    return bin_path, json_path
