"""Deterministic synthetic time-lapse generator with ground-truth labels.

Two imaging channels are rendered per cell:

  phase : anisotropic Gaussian blob; during a mitotic window the blob
           rounds up (eccentricity drops) and brightens.
  rfp   : peri-nuclear ring that crossfades to a nuclear disk over three
           frames once that cell's infection onset is reached.

Cells follow a reflected random walk; a cell may divide, ending its track
and spawning two daughter tracks linked by parent_track_id. Ground-truth
infection and division labels are written for every node. Output is
byte-identical for identical (config, seed): each FOV draws from its own
RNG stream derived from (seed, fov index), so FOVs could be rendered by
parallel workers without changing the result.
"""

from __future__ import annotations

import json
import math
import shutil
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ValidationError
from .store import (
    AnnotationRecord,
    DatasetMeta,
    TrackNode,
    save_meta,
    write_tracks_csv,
    write_volume,
)

MOCK_CONDITION = "mock"
INFECTED_CONDITION = "moi5"

# rendered geometry constants (voxels)
EDGE_MARGIN = 24.0
DAUGHTER_OFFSET = 5.0
NUCLEUS_SIGMA = 2.6
MITOSIS_ECC_FACTOR = 0.15
MITOSIS_AMP_FACTOR = 1.9
TRANSLOCATION_FRAMES = 3  # ring -> disk linear crossfade length


@dataclass(frozen=True)
class SynthConfig:
    n_fovs: int = 4  # split evenly: first half mock (A*), second half infected (B*)
    cells_per_fov: int = 50
    n_timepoints: int = 20
    volume_shape: tuple[int, int, int, int] = (2, 5, 256, 256)
    dt_minutes: float = 30.0
    t0_hpi_minutes: float = 120.0
    onset_midpoint_frames: float = 8.0  # logistic-CDF onset, infected condition
    onset_scale_frames: float = 2.0
    division_rate: float = 0.005  # per cell per frame
    motion_sigma: float = 1.5  # lateral voxels per frame
    seed: int = 7

    def validate(self) -> None:
        if self.n_fovs < 2 or self.n_fovs % 2:
            raise ConfigurationError("n_fovs must be even and >= 2")
        if self.cells_per_fov < 1 or self.n_timepoints < 1:
            raise ConfigurationError("cells_per_fov and n_timepoints must be >= 1")
        if len(self.volume_shape) != 4 or self.volume_shape[0] != 2:
            raise ConfigurationError("volume_shape must be (2, Z, Y, X)")
        if any(s < 1 for s in self.volume_shape):
            raise ConfigurationError("volume_shape components must be >= 1")
        if not (0.0 <= self.division_rate <= 1.0):
            raise ConfigurationError("division_rate must be in [0, 1]")
        if self.onset_scale_frames <= 0:
            raise ConfigurationError("onset_scale_frames must be > 0")
        if self.motion_sigma < 0:
            raise ConfigurationError("motion_sigma must be >= 0")

    def fov_layout(self) -> list[tuple[str, str]]:
        """[(fov_id, condition)]: A1..An mock, B1..Bn infected."""
        half = self.n_fovs // 2
        layout = [(f"A{i + 1}", MOCK_CONDITION) for i in range(half)]
        layout += [(f"B{i + 1}", INFECTED_CONDITION) for i in range(self.n_fovs - half)]
        return layout

    def to_dict(self) -> dict:
        d = asdict(self)
        d["volume_shape"] = list(self.volume_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        kwargs = dict(d)
        if "volume_shape" in kwargs:
            kwargs["volume_shape"] = tuple(int(s) for s in kwargs["volume_shape"])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclass
class _Cell:
    track_id: int
    t_start: int
    onset_frame: float  # inf = never infected
    parent_track_id: int | None
    # morphology
    sigma_lat: float
    sigma_z: float
    eccentricity: float
    orientation: float
    phase_amp: float
    ring_radius: float
    ring_width: float
    rfp_amp: float
    positions: list[tuple[float, float, float]] = field(default_factory=list)
    t_end: int = -1  # inclusive last frame, filled by the simulation
    divides_at: int | None = None  # == t_end when the track ends in division


def _reflect(value: float, lo: float, hi: float) -> float:
    """Fold value into [lo, hi] by reflection at the boundaries."""
    span = hi - lo
    if span <= 0:
        return lo
    v = (value - lo) % (2 * span)
    if v > span:
        v = 2 * span - v
    return lo + v


def _sample_onset(rng: np.random.Generator, cfg: SynthConfig, infected: bool) -> float:
    if not infected:
        return math.inf
    u = rng.uniform(1e-9, 1 - 1e-9)
    return cfg.onset_midpoint_frames + cfg.onset_scale_frames * math.log(u / (1 - u))


def _new_cell(
    rng: np.random.Generator,
    cfg: SynthConfig,
    track_id: int,
    t_start: int,
    start_pos: tuple[float, float, float],
    onset_frame: float,
    parent: int | None,
) -> _Cell:
    return _Cell(
        track_id=track_id,
        t_start=t_start,
        onset_frame=onset_frame,
        parent_track_id=parent,
        sigma_lat=rng.uniform(4.0, 6.0),
        sigma_z=rng.uniform(1.0, 1.4),
        eccentricity=rng.uniform(0.25, 0.45),
        orientation=rng.uniform(0.0, math.pi),
        phase_amp=rng.uniform(0.9, 1.3),
        ring_radius=rng.uniform(5.5, 7.5),
        ring_width=rng.uniform(1.2, 1.8),
        rfp_amp=rng.uniform(0.9, 1.3),
        positions=[start_pos],
    )


def _simulate_fov(
    rng: np.random.Generator, cfg: SynthConfig, infected: bool
) -> list[_Cell]:
    """Trajectories, divisions and onsets for one FOV (no rendering yet)."""
    _, zdim, ydim, xdim = cfg.volume_shape
    # Adherent cells stay in a monolayer near the mid focal plane, so a
    # full-depth axial crop centered on the rounded centroid always fits.
    z_mid = zdim // 2
    z_lo, z_hi = z_mid - 0.4, z_mid + 0.4
    lat_lo_y, lat_hi_y = EDGE_MARGIN, ydim - 1 - EDGE_MARGIN
    lat_lo_x, lat_hi_x = EDGE_MARGIN, xdim - 1 - EDGE_MARGIN

    cells: list[_Cell] = []
    next_track_id = 1
    for _ in range(cfg.cells_per_fov):
        pos = (
            rng.uniform(z_lo, z_hi),
            rng.uniform(lat_lo_y, lat_hi_y),
            rng.uniform(lat_lo_x, lat_hi_x),
        )
        cells.append(
            _new_cell(rng, cfg, next_track_id, 0, pos,
                      _sample_onset(rng, cfg, infected), None)
        )
        next_track_id += 1

    active = list(cells)
    for t in range(1, cfg.n_timepoints):
        still_active: list[_Cell] = []
        for cell in active:
            prev = cell.positions[-1]
            divide = (
                cfg.division_rate > 0
                and t < cfg.n_timepoints  # daughters need frame t
                and rng.random() < cfg.division_rate
            )
            if divide:
                cell.t_end = t - 1
                cell.divides_at = t - 1
                angle = rng.uniform(0.0, 2 * math.pi)
                dy = DAUGHTER_OFFSET * math.sin(angle)
                dx = DAUGHTER_OFFSET * math.cos(angle)
                for sign in (1.0, -1.0):
                    pos = (
                        _reflect(prev[0], z_lo, z_hi),
                        _reflect(prev[1] + sign * dy, lat_lo_y, lat_hi_y),
                        _reflect(prev[2] + sign * dx, lat_lo_x, lat_hi_x),
                    )
                    daughter = _new_cell(
                        rng, cfg, next_track_id, t, pos,
                        cell.onset_frame, cell.track_id,
                    )
                    daughter.sigma_lat = cell.sigma_lat * 0.85
                    next_track_id += 1
                    cells.append(daughter)
                    still_active.append(daughter)
            else:
                step_z = rng.normal(0.0, 0.15)
                step_y = rng.normal(0.0, cfg.motion_sigma)
                step_x = rng.normal(0.0, cfg.motion_sigma)
                cell.positions.append(
                    (
                        _reflect(prev[0] + step_z, z_lo, z_hi),
                        _reflect(prev[1] + step_y, lat_lo_y, lat_hi_y),
                        _reflect(prev[2] + step_x, lat_lo_x, lat_hi_x),
                    )
                )
                still_active.append(cell)
        active = still_active
    for cell in active:
        cell.t_end = cfg.n_timepoints - 1
    # cells created on the last simulated step may have t_end already set
    for cell in cells:
        if cell.t_end < 0:
            cell.t_end = cell.t_start + len(cell.positions) - 1
    return cells


def _mitotic_frames(cell: _Cell, cells_by_id: dict[int, _Cell]) -> set[int]:
    """Frames of this cell rendered/labeled as mitotic.

    Two-frame window per division event: the parent's last frame and the
    daughters' first frame.
    """
    frames = set()
    if cell.divides_at is not None:
        frames.add(cell.divides_at)
    if cell.parent_track_id is not None:
        parent = cells_by_id.get(cell.parent_track_id)
        if parent is not None and parent.divides_at is not None:
            frames.add(cell.t_start)
    return frames


def _render_frame(
    cfg: SynthConfig,
    cells: list[_Cell],
    cells_by_id: dict[int, _Cell],
    t: int,
    noise: tuple[np.ndarray, np.ndarray],
) -> np.ndarray:
    _, zdim, ydim, xdim = cfg.volume_shape
    vol = np.zeros(cfg.volume_shape, dtype=np.float32)
    vol[0] = noise[0]
    vol[1] = 0.05 + noise[1]

    zs = np.arange(zdim, dtype=np.float64)
    for cell in cells:
        if not (cell.t_start <= t <= cell.t_end):
            continue
        cz, cy, cx = cell.positions[t - cell.t_start]
        mitotic = t in _mitotic_frames(cell, cells_by_id)
        ecc = cell.eccentricity * (MITOSIS_ECC_FACTOR if mitotic else 1.0)
        amp = cell.phase_amp * (MITOSIS_AMP_FACTOR if mitotic else 1.0)
        sig_major = cell.sigma_lat * (1.0 + ecc)
        sig_minor = cell.sigma_lat * (1.0 - ecc)

        half = int(math.ceil(3.5 * sig_major + cell.ring_radius))
        y0, y1 = max(0, int(cy) - half), min(ydim, int(cy) + half + 1)
        x0, x1 = max(0, int(cx) - half), min(xdim, int(cx) + half + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        dy = np.arange(y0, y1, dtype=np.float64) - cy
        dx = np.arange(x0, x1, dtype=np.float64) - cx
        dz = zs - cz
        zfall = np.exp(-0.5 * (dz / cell.sigma_z) ** 2)[:, None, None]

        cos_o, sin_o = math.cos(cell.orientation), math.sin(cell.orientation)
        u = cos_o * dy[:, None] + sin_o * dx[None, :]
        v = -sin_o * dy[:, None] + cos_o * dx[None, :]
        blob = np.exp(-0.5 * ((u / sig_major) ** 2 + (v / sig_minor) ** 2))
        vol[0, :, y0:y1, x0:x1] += (amp * zfall * blob[None, :, :]).astype(np.float32)

        r = np.sqrt(dy[:, None] ** 2 + dx[None, :] ** 2)
        ring = np.exp(-0.5 * ((r - cell.ring_radius) / cell.ring_width) ** 2)
        disk = 1.6 * np.exp(-0.5 * (r / NUCLEUS_SIGMA) ** 2)
        w = float(np.clip((t - cell.onset_frame + 1) / TRANSLOCATION_FRAMES, 0.0, 1.0)) \
            if math.isfinite(cell.onset_frame) else 0.0
        rfp = cell.rfp_amp * ((1.0 - w) * ring + w * disk)
        vol[1, :, y0:y1, x0:x1] += (zfall * rfp[None, :, :]).astype(np.float32)
    return vol


def generate_dataset(
    config: SynthConfig, out: str | Path, overwrite: bool = False
) -> DatasetMeta:
    """Render a full dataset into `out` using the store layout.

    Refuses to write over an existing dataset unless `overwrite` is set.
    """
    config.validate()
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise ValidationError(
                f"output dir {out} is not empty; pass overwrite to replace it"
            )
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)

    layout = config.fov_layout()
    meta = DatasetMeta(
        channels=("phase", "rfp"),
        dt_minutes=config.dt_minutes,
        fov_ids=tuple(fov for fov, _ in layout),
        volume_shape=config.volume_shape,
        n_timepoints=config.n_timepoints,
        conditions={fov: cond for fov, cond in layout},
        t0_hpi_minutes=config.t0_hpi_minutes,
    )

    all_nodes: list[TrackNode] = []
    annotations: list[AnnotationRecord] = []
    _, zdim, ydim, xdim = config.volume_shape

    for fov_index, (fov_id, condition) in enumerate(layout):
        rng = np.random.default_rng([config.seed, fov_index])
        cells = _simulate_fov(rng, config, infected=(condition == INFECTED_CONDITION))
        cells_by_id = {c.track_id: c for c in cells}

        for t in range(config.n_timepoints):
            noise_phase = rng.normal(0.0, 0.05, size=config.volume_shape[1:]).astype(np.float32)
            noise_rfp = rng.normal(0.0, 0.02, size=config.volume_shape[1:]).astype(np.float32)
            frame = _render_frame(config, cells, cells_by_id, t, (noise_phase, noise_rfp))
            write_volume(out, fov_id, t, frame)

        for cell in sorted(cells, key=lambda c: c.track_id):
            mitotic = _mitotic_frames(cell, cells_by_id)
            for i, pos in enumerate(cell.positions):
                t = cell.t_start + i
                if t > cell.t_end:
                    break
                all_nodes.append(
                    TrackNode(
                        fov_id=fov_id,
                        track_id=cell.track_id,
                        t=t,
                        centroid=(round(pos[0], 3), round(pos[1], 3), round(pos[2], 3)),
                        parent_track_id=cell.parent_track_id,
                    )
                )
                infected_now = int(math.isfinite(cell.onset_frame) and t >= cell.onset_frame)
                annotations.append(
                    AnnotationRecord(fov_id, cell.track_id, t, "infection",
                                     infected_now, "ground_truth")
                )
                annotations.append(
                    AnnotationRecord(fov_id, cell.track_id, t, "division",
                                     int(t in mitotic), "ground_truth")
                )

    write_tracks_csv(out, all_nodes)
    with open(out / "annotations.jsonl", "w", encoding="utf-8") as f:
        for rec in annotations:
            f.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    save_meta(out, meta)
    return meta


def onset_cdf(config: SynthConfig, t_frames: np.ndarray) -> np.ndarray:
    """Logistic CDF of infection onset for the infected condition."""
    x = (np.asarray(t_frames, dtype=np.float64) - config.onset_midpoint_frames)
    return 1.0 / (1.0 + np.exp(-x / config.onset_scale_frames))
