"""Single-cell patch extraction, normalization and augmentation.

A patch is cut from the full volume as an oversized source crop centered
on the tracked centroid, normalized per channel, then spatially augmented
and reduced to its final size. The source crop carries enough lateral
margin that rotation and scaling never sample outside real data; the
margin requirement is checked once at pipeline construction.

Normalization conventions:
  fluorescence: (v - median) / (p99 - median), statistics per 3D volume
                 per timepoint, so median maps to 0 and p99 to 1.
  phase       : (v - mean) / std with statistics pooled over the FOV's
                 whole time series.

Augmentations follow a fixed order (spatial scaling, rotation, shearing,
contrast, intensity scaling, smoothing, noise), each gated by its own
probability. The three spatial transforms compose into a single lateral
affine resampling (z is never rotated or sheared); the final center crop
happens at that resampling step, so later intensity filters cannot smear
out-of-crop values into the output. All randomness comes from the seed
passed per call: one generator, documented draw order, so identical seeds
give identical patches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from .errors import (
    ConfigurationError,
    DegenerateStatisticsError,
    ValidationError,
)
from .store import DatasetHandle, TrackNode

PHASE_CHANNEL = "phase"
_EPS = 1e-12


def channel_kind(name: str) -> str:
    """Normalization family for a channel: label-free phase vs reporter."""
    return "phase" if name == PHASE_CHANNEL else "fluorescence"


@dataclass(frozen=True)
class PatchSpec:
    final_size: tuple[int, int, int] = (5, 32, 32)  # (Z, Y, X) after augmentation
    source_crop: tuple[int, int, int] = (5, 64, 64)  # initial crop before spatial ops
    channels: tuple[str, ...] = ("phase", "rfp")

    def validate(self, max_scale: float = 0.0) -> None:
        if len(self.final_size) != 3 or len(self.source_crop) != 3:
            raise ConfigurationError("final_size and source_crop must be (Z, Y, X)")
        if any(s < 1 for s in self.final_size + self.source_crop):
            raise ConfigurationError("patch dimensions must be >= 1")
        if not self.channels:
            raise ConfigurationError("channels must be non-empty")
        for ax in range(3):
            if self.source_crop[ax] < self.final_size[ax]:
                raise ConfigurationError(
                    f"source_crop {self.source_crop} smaller than "
                    f"final_size {self.final_size} on axis {ax}"
                )
        if max_scale > 0.0:
            for ax in (1, 2):
                need = math.ceil(self.final_size[ax] * math.sqrt(2.0) * (1.0 + max_scale))
                if self.source_crop[ax] < need:
                    raise ConfigurationError(
                        f"lateral source_crop {self.source_crop[ax]} < {need} "
                        f"required for rotation with max scale {max_scale}"
                    )

    @classmethod
    def for_final(
        cls,
        final_size: tuple[int, int, int],
        channels: tuple[str, ...] = ("phase", "rfp"),
        max_scale: float = 0.3,
    ) -> "PatchSpec":
        """Spec whose source crop carries the rotation+scale margin.

        Lateral crops round the margin ceil(final * sqrt(2) * (1+max_scale))
        up to a multiple of 8: 64 for 32-pixel patches, 240 for 128.
        """
        z, y, x = final_size

        def lat(final: int) -> int:
            need = math.ceil(final * math.sqrt(2.0) * (1.0 + max_scale))
            return ((need + 7) // 8) * 8

        return cls(final_size=(z, y, x), source_crop=(z, lat(y), lat(x)),
                   channels=tuple(channels))

    @classmethod
    def full_scale(cls, channels: tuple[str, ...] = ("phase", "rfp")) -> "PatchSpec":
        return cls.for_final((15, 128, 128), channels)

    def to_dict(self) -> dict:
        return {
            "final_size": list(self.final_size),
            "source_crop": list(self.source_crop),
            "channels": list(self.channels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PatchSpec":
        try:
            return cls(
                final_size=tuple(int(v) for v in d["final_size"]),
                source_crop=tuple(int(v) for v in d["source_crop"]),
                channels=tuple(str(c) for c in d["channels"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError(f"malformed patch spec: {e}") from e


@dataclass(frozen=True)
class Patch:
    data: np.ndarray | None  # float32 [C, Z, Y, X], None when invalid
    key: tuple[str, int, int] | None  # (fov_id, track_id, t)
    valid: bool
    channels: tuple[str, ...] = ()

    def require_valid(self) -> np.ndarray:
        if not self.valid or self.data is None:
            raise ValidationError(f"patch {self.key} is invalid")
        return self.data


@dataclass(frozen=True)
class AugmentationConfig:
    """Per-transform parameter ranges and gate probabilities.

    Lateral spatial scaling resamples the output grid by a factor (1 + a)
    per axis. Transforms without a listed probability run every time
    (p = 1). Intensity scaling and noise carry per-channel probabilities
    and ranges keyed by channel name.
    """

    scale_range: tuple[float, float] = (-0.3, 0.3)
    scale_p: float = 0.8
    rotation_range: tuple[float, float] = (0.0, math.pi)
    rotation_p: float = 0.8
    shear_range: tuple[float, float] = (0.0, 0.01)
    shear_p: float = 1.0
    gamma_range: tuple[float, float] = (0.8, 1.2)
    gamma_p: float = 0.5
    intensity_scale_range: tuple[float, float] = (-0.5, 0.5)
    intensity_scale_p: dict[str, float] = field(
        default_factory=lambda: {"phase": 0.5, "rfp": 0.7}
    )
    smoothing_sigma_range: tuple[float, float] = (0.25, 0.75)
    smoothing_p: float = 1.0
    noise_sigma_range: dict[str, tuple[float, float]] = field(
        default_factory=lambda: {"phase": (0.0, 0.2), "rfp": (0.0, 0.5)}
    )
    noise_p: float = 0.5

    def validate(self, channels: tuple[str, ...] | None = None) -> None:
        probs = [self.scale_p, self.rotation_p, self.shear_p, self.gamma_p,
                 self.smoothing_p, self.noise_p]
        probs += list(self.intensity_scale_p.values())
        for p in probs:
            if not (0.0 <= p <= 1.0):
                raise ConfigurationError(f"probability {p} outside [0, 1]")
        ranges = [self.scale_range, self.rotation_range, self.shear_range,
                  self.gamma_range, self.intensity_scale_range,
                  self.smoothing_sigma_range]
        ranges += list(self.noise_sigma_range.values())
        for lo, hi in ranges:
            if hi < lo:
                raise ConfigurationError(f"range ({lo}, {hi}) is not ordered")
        if channels is not None:
            for name in channels:
                if name not in self.intensity_scale_p:
                    raise ConfigurationError(
                        f"intensity_scale_p has no entry for channel {name!r}"
                    )
                if name not in self.noise_sigma_range:
                    raise ConfigurationError(
                        f"noise_sigma_range has no entry for channel {name!r}"
                    )

    @property
    def max_scale(self) -> float:
        if self.scale_p <= 0.0:
            return 0.0
        return max(abs(self.scale_range[0]), abs(self.scale_range[1]))

    @classmethod
    def identity(cls, channels: tuple[str, ...] = ("phase", "rfp")) -> "AugmentationConfig":
        return cls(
            scale_range=(0.0, 0.0), scale_p=0.0,
            rotation_range=(0.0, 0.0), rotation_p=0.0,
            shear_range=(0.0, 0.0), shear_p=0.0,
            gamma_range=(1.0, 1.0), gamma_p=0.0,
            intensity_scale_range=(0.0, 0.0),
            intensity_scale_p={c: 0.0 for c in channels},
            smoothing_sigma_range=(0.0, 0.0), smoothing_p=0.0,
            noise_sigma_range={c: (0.0, 0.0) for c in channels},
            noise_p=0.0,
        )

    def to_dict(self) -> dict:
        return {
            "spatial_scaling": {"alpha_range": list(self.scale_range), "p": self.scale_p},
            "rotation": {"theta_z_range": list(self.rotation_range), "p": self.rotation_p},
            "shearing": {"s_range": list(self.shear_range), "p": self.shear_p},
            "adjust_contrast": {"gamma_range": list(self.gamma_range), "p": self.gamma_p},
            "intensity_scaling": {
                "alpha_range": list(self.intensity_scale_range),
                "p": dict(self.intensity_scale_p),
            },
            "gaussian_smoothing": {
                "sigma_range": list(self.smoothing_sigma_range),
                "p": self.smoothing_p,
            },
            "gaussian_noise": {
                "sigma_range": {k: list(v) for k, v in self.noise_sigma_range.items()},
                "p": self.noise_p,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        try:
            cfg = cls(
                scale_range=tuple(d["spatial_scaling"]["alpha_range"]),
                scale_p=float(d["spatial_scaling"]["p"]),
                rotation_range=tuple(d["rotation"]["theta_z_range"]),
                rotation_p=float(d["rotation"]["p"]),
                shear_range=tuple(d["shearing"]["s_range"]),
                shear_p=float(d["shearing"]["p"]),
                gamma_range=tuple(d["adjust_contrast"]["gamma_range"]),
                gamma_p=float(d["adjust_contrast"]["p"]),
                intensity_scale_range=tuple(d["intensity_scaling"]["alpha_range"]),
                intensity_scale_p={k: float(v) for k, v in d["intensity_scaling"]["p"].items()},
                smoothing_sigma_range=tuple(d["gaussian_smoothing"]["sigma_range"]),
                smoothing_p=float(d["gaussian_smoothing"]["p"]),
                noise_sigma_range={
                    k: tuple(v) for k, v in d["gaussian_noise"]["sigma_range"].items()
                },
                noise_p=float(d["gaussian_noise"]["p"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError(f"malformed augmentation config: {e}") from e
        cfg.validate()
        return cfg


def normalize_channel(
    volume: np.ndarray,
    kind: str,
    fov_stats: tuple[float, float] | None = None,
    channel: str | None = None,
) -> np.ndarray:
    """Normalize one channel volume.

    fluorescence: (v - median) / (p99 - median); statistics come from the
    input itself unless precomputed (median, p99) are passed as fov_stats.
    phase: (v - mean) / std with fov_stats = (mean, std) pooled over the
    FOV's whole series (required).
    """
    name = channel if channel is not None else kind
    v = np.asarray(volume, dtype=np.float32)
    if kind == "fluorescence":
        if fov_stats is not None:
            med, p99 = fov_stats
        else:
            med = float(np.median(v))
            p99 = float(np.percentile(v, 99))
        scale = p99 - med
        if not np.isfinite(scale) or scale <= _EPS:
            raise DegenerateStatisticsError(
                name, f"p99 ({p99}) does not exceed median ({med})"
            )
        return ((v - np.float32(med)) / np.float32(scale)).astype(np.float32)
    if kind == "phase":
        if fov_stats is None:
            raise ConfigurationError(
                "phase normalization requires per-FOV series (mean, std)"
            )
        mean, std = fov_stats
        if not np.isfinite(std) or std <= _EPS:
            raise DegenerateStatisticsError(name, f"series std is {std}")
        return ((v - np.float32(mean)) / np.float32(std)).astype(np.float32)
    raise ConfigurationError(f"unknown normalization kind {kind!r}")


def _round_voxel(c: float) -> int:
    return int(math.floor(c + 0.5))


def extract_patch(
    volume: np.ndarray,
    centroid: tuple[float, float, float],
    spec: PatchSpec,
    channel_indices: list[int] | None = None,
    key: tuple[str, int, int] | None = None,
) -> Patch:
    """Cut the source crop centered at the rounded centroid.

    Any overlap with the volume boundary yields valid=False with no data;
    downstream samplers treat such nodes as missing.
    """
    sz, sy, sx = spec.source_crop
    cz, cy, cx = (_round_voxel(c) for c in centroid)
    z0, y0, x0 = cz - sz // 2, cy - sy // 2, cx - sx // 2
    _, zdim, ydim, xdim = volume.shape
    if z0 < 0 or y0 < 0 or x0 < 0 or z0 + sz > zdim or y0 + sy > ydim or x0 + sx > xdim:
        return Patch(data=None, key=key, valid=False, channels=spec.channels)
    if channel_indices is None:
        channel_indices = list(range(volume.shape[0]))
    data = np.stack(
        [
            np.asarray(volume[c, z0:z0 + sz, y0:y0 + sy, x0:x0 + sx], dtype=np.float32)
            for c in channel_indices
        ]
    )
    return Patch(data=data, key=key, valid=True, channels=spec.channels)


def center_crop(data: np.ndarray, final_size: tuple[int, int, int]) -> np.ndarray:
    starts = [(data.shape[1 + ax] - final_size[ax]) // 2 for ax in range(3)]
    z0, y0, x0 = starts
    fz, fy, fx = final_size
    return np.ascontiguousarray(data[:, z0:z0 + fz, y0:y0 + fy, x0:x0 + fx])


def _spatial_matrix(rng: np.random.Generator, cfg: AugmentationConfig) -> np.ndarray:
    """Composed 2x2 output-to-source sampling matrix on (y, x) offsets.

    Draw order: scale gate then (a_y, a_x); rotation gate then theta;
    shear gate then (s_y, s_x). Scaling multiplies the sampling grid by
    (1 + a) per axis, rotation and shear act on sampling coordinates, so
    the operator norm stays below (1 + max_scale)(1 + max_shear).
    """
    mat = np.eye(2)
    if cfg.scale_p > 0.0 and rng.random() < cfg.scale_p:
        ay, ax_ = rng.uniform(cfg.scale_range[0], cfg.scale_range[1], size=2)
        mat = np.diag([1.0 + ay, 1.0 + ax_]) @ mat
    if cfg.rotation_p > 0.0 and rng.random() < cfg.rotation_p:
        theta = rng.uniform(cfg.rotation_range[0], cfg.rotation_range[1])
        c, s = math.cos(theta), math.sin(theta)
        mat = np.array([[c, -s], [s, c]]) @ mat
    if cfg.shear_p > 0.0 and rng.random() < cfg.shear_p:
        sy, sx = rng.uniform(cfg.shear_range[0], cfg.shear_range[1], size=2)
        mat = np.array([[1.0, sy], [sx, 1.0]]) @ mat
    return mat


def _apply_spatial(
    data: np.ndarray, mat: np.ndarray, final_size: tuple[int, int, int]
) -> np.ndarray:
    """Lateral affine resample into the final grid (z center-cropped).

    Sampling uses linear interpolation with a NaN fill value; the crop
    margin invariant guarantees no output voxel touches the fill, which
    the finiteness check enforces.
    """
    fz, fy, fx = final_size
    z0 = (data.shape[1] - fz) // 2
    src = data[:, z0:z0 + fz]
    if np.allclose(mat, np.eye(2), atol=0.0):
        return center_crop(data, final_size)
    out_center = np.array([(fy - 1) / 2.0, (fx - 1) / 2.0])
    src_center = np.array([(src.shape[2] - 1) / 2.0, (src.shape[3] - 1) / 2.0])
    offset_yx = src_center - mat @ out_center
    matrix4 = np.eye(4)
    matrix4[2:, 2:] = mat
    offset4 = np.array([0.0, 0.0, offset_yx[0], offset_yx[1]])
    out = ndimage.affine_transform(
        src.astype(np.float64),
        matrix4,
        offset=offset4,
        output_shape=(src.shape[0], fz, fy, fx),
        order=1,
        mode="constant",
        cval=np.nan,
        prefilter=False,
    )
    if not np.all(np.isfinite(out)):
        raise ConfigurationError(
            "spatial augmentation sampled outside the source crop; "
            "source_crop margin is too small for the configured ranges"
        )
    return out.astype(np.float32)


def _apply_gamma(ch: np.ndarray, gamma: float) -> np.ndarray:
    vmin = float(ch.min())
    vmax = float(ch.max())
    span = vmax - vmin
    if span <= _EPS:
        return ch
    x = (ch - vmin) / span
    return (vmin + span * np.power(x, gamma)).astype(np.float32)


def augment_patch(
    patch: Patch,
    cfg: AugmentationConfig,
    rng_seed,
    spec: PatchSpec,
) -> Patch:
    """Apply the augmentation stack and reduce to spec.final_size.

    Stages run in a fixed order, drawing from one generator seeded with
    rng_seed: spatial matrix (see _spatial_matrix), then per channel in
    patch order gamma gate+value, intensity-scale gate+value, smoothing
    sigmas, noise gate+sigma+noise field. Identical seeds give identical
    outputs.
    """
    data = patch.require_valid()
    cfg.validate(patch.channels)
    rng = np.random.default_rng(rng_seed)

    out = _apply_spatial(data, _spatial_matrix(rng, cfg), spec.final_size)
    out = out.copy()

    for i, name in enumerate(patch.channels):
        if cfg.gamma_p > 0.0 and rng.random() < cfg.gamma_p:
            out[i] = _apply_gamma(out[i], rng.uniform(*cfg.gamma_range))
    for i, name in enumerate(patch.channels):
        if cfg.intensity_scale_p[name] > 0.0 and rng.random() < cfg.intensity_scale_p[name]:
            alpha = rng.uniform(*cfg.intensity_scale_range)
            out[i] = out[i] * np.float32(1.0 + alpha)
    for i, name in enumerate(patch.channels):
        if cfg.smoothing_p > 0.0 and rng.random() < cfg.smoothing_p:
            sy, sx = rng.uniform(cfg.smoothing_sigma_range[0],
                                 cfg.smoothing_sigma_range[1], size=2)
            if sy > 0.0 or sx > 0.0:
                out[i] = ndimage.gaussian_filter(out[i], sigma=(0.0, sy, sx))
    for i, name in enumerate(patch.channels):
        if cfg.noise_p > 0.0 and rng.random() < cfg.noise_p:
            sigma = rng.uniform(*cfg.noise_sigma_range[name])
            if sigma > 0.0:
                out[i] = out[i] + rng.normal(0.0, sigma, size=out[i].shape).astype(np.float32)

    out = np.ascontiguousarray(out, dtype=np.float32)
    if not np.all(np.isfinite(out)):
        raise ValidationError(f"augmented patch {patch.key} contains non-finite values")
    return Patch(data=out, key=patch.key, valid=True, channels=patch.channels)


class PatchPipeline:
    """Dataset-backed patch factory: crop, normalize, augment.

    Construction validates the channel subset, the crop margins against
    the augmentation's scale range, and the per-channel augmentation
    entries, so per-sample calls cannot hit configuration errors.
    """

    def __init__(
        self,
        handle: DatasetHandle,
        spec: PatchSpec | None = None,
        aug: AugmentationConfig | None = None,
    ):
        self.handle = handle
        self.spec = spec if spec is not None else PatchSpec()
        self.aug = aug
        self.spec.validate(max_scale=aug.max_scale if aug is not None else 0.0)
        if aug is not None:
            aug.validate(self.spec.channels)
        missing = [c for c in self.spec.channels if c not in handle.meta.channels]
        if missing:
            raise ConfigurationError(
                f"channels {missing} not in dataset channels {handle.meta.channels}"
            )
        self._channel_indices = [handle.meta.channels.index(c) for c in self.spec.channels]

    def patch_valid(self, fov_id: str, t: int, centroid: tuple[float, float, float]) -> bool:
        sz, sy, sx = self.spec.source_crop
        _, zdim, ydim, xdim = self.handle.meta.volume_shape
        cz, cy, cx = (_round_voxel(c) for c in centroid)
        z0, y0, x0 = cz - sz // 2, cy - sy // 2, cx - sx // 2
        return (z0 >= 0 and y0 >= 0 and x0 >= 0
                and z0 + sz <= zdim and y0 + sy <= ydim and x0 + sx <= xdim)

    def node_valid(self, node: TrackNode) -> bool:
        return self.patch_valid(node.fov_id, node.t, node.centroid)

    def source_patch(self, node: TrackNode) -> Patch:
        """Normalized source-crop patch for a track node."""
        volume = self.handle.volume_memmap(node.fov_id, node.t)
        raw = extract_patch(volume, node.centroid, self.spec,
                            self._channel_indices, key=node.key)
        if not raw.valid:
            return raw
        data = raw.data.copy()
        for i, name in enumerate(self.spec.channels):
            ch_idx = self._channel_indices[i]
            if channel_kind(name) == "phase":
                stats = self.handle.fov_series_stats(node.fov_id, ch_idx)
                data[i] = normalize_channel(data[i], "phase", stats, channel=name)
            else:
                stats = self.handle.volume_stats(node.fov_id, node.t, ch_idx)
                data[i] = normalize_channel(data[i], "fluorescence", stats, channel=name)
        return Patch(data=data, key=node.key, valid=True, channels=self.spec.channels)

    def augmented(self, node: TrackNode, rng_seed) -> Patch:
        if self.aug is None:
            raise ConfigurationError("pipeline constructed without augmentations")
        return augment_patch(self.source_patch(node), self.aug, rng_seed, self.spec)

    def center(self, node: TrackNode) -> Patch:
        """Un-augmented final-size center crop (embedding input)."""
        src = self.source_patch(node)
        if not src.valid:
            return src
        return Patch(
            data=center_crop(src.data, self.spec.final_size),
            key=src.key,
            valid=True,
            channels=src.channels,
        )
