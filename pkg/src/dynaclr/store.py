"""On-disk 5D image store with track table and annotation persistence.

Layout (all paths relative to the dataset directory):

    meta.json                   dataset metadata, UTF-8 JSON
    fovs/<fov_id>/t<k>.bin      raw little-endian float32, C-order, C*Z*Y*X values
    tracks.csv                  header: fov_id,track_id,t,z,y,x,parent_track_id
    annotations.jsonl           one annotation record per line

Volumes are read lazily (memory-mapped); opening a dataset only parses the
metadata and stat()s the volume files. Annotation writes are serialized by
the handle, so any number of concurrent readers is safe.
"""

from __future__ import annotations

import csv
import json
import os
import threading
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import (
    IntegrityError,
    MetaError,
    RangeError,
    TrackRelinkWarning,
    ValidationError,
)

META_FILE = "meta.json"
TRACKS_FILE = "tracks.csv"
ANNOTATIONS_FILE = "annotations.jsonl"
FOV_DIR = "fovs"

LABEL_TYPES = ("infection", "division")
ANNOTATION_SOURCES = ("ground_truth", "human")

NodeKey = tuple[str, int, int]  # (fov_id, track_id, t)


@dataclass(frozen=True)
class DatasetMeta:
    channels: tuple[str, ...]
    dt_minutes: float
    fov_ids: tuple[str, ...]
    volume_shape: tuple[int, int, int, int]  # (C, Z, Y, X)
    n_timepoints: int
    conditions: dict[str, str]
    t0_hpi_minutes: float = 0.0
    dtype: str = "float32"

    def validate(self) -> None:
        if not self.channels:
            raise MetaError("channels", "must be non-empty")
        if self.dt_minutes <= 0:
            raise MetaError("dt_minutes", "must be > 0")
        if self.n_timepoints < 1:
            raise MetaError("n_timepoints", "must be >= 1")
        if len(self.volume_shape) != 4 or any(s < 1 for s in self.volume_shape):
            raise MetaError("volume_shape", "must be 4 components, each >= 1")
        if self.volume_shape[0] != len(self.channels):
            raise MetaError(
                "volume_shape",
                f"C={self.volume_shape[0]} does not match {len(self.channels)} channels",
            )
        if self.dtype != "float32":
            raise MetaError("dtype", f"only 'float32' is supported, got {self.dtype!r}")
        missing = [f for f in self.fov_ids if f not in self.conditions]
        if missing:
            raise MetaError("conditions", f"no condition for fov(s) {missing}")

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels),
            "dt_minutes": self.dt_minutes,
            "fov_ids": list(self.fov_ids),
            "volume_shape": list(self.volume_shape),
            "n_timepoints": self.n_timepoints,
            "conditions": dict(self.conditions),
            "t0_hpi_minutes": self.t0_hpi_minutes,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetMeta":
        required = [
            "channels", "dt_minutes", "fov_ids", "volume_shape",
            "n_timepoints", "conditions",
        ]
        for key in required:
            if key not in d:
                raise MetaError(key, "missing required field")
        try:
            meta = cls(
                channels=tuple(str(c) for c in d["channels"]),
                dt_minutes=float(d["dt_minutes"]),
                fov_ids=tuple(str(f) for f in d["fov_ids"]),
                volume_shape=tuple(int(s) for s in d["volume_shape"]),
                n_timepoints=int(d["n_timepoints"]),
                conditions={str(k): str(v) for k, v in d["conditions"].items()},
                t0_hpi_minutes=float(d.get("t0_hpi_minutes", 0.0)),
                dtype=str(d.get("dtype", "float32")),
            )
        except (TypeError, ValueError) as e:
            raise MetaError("<structure>", str(e)) from e
        meta.validate()
        return meta


@dataclass(frozen=True)
class TrackNode:
    fov_id: str
    track_id: int
    t: int
    centroid: tuple[float, float, float]  # (z, y, x) voxels
    parent_track_id: int | None = None

    @property
    def key(self) -> NodeKey:
        return (self.fov_id, self.track_id, self.t)


class TrackTable:
    """Validated set of track nodes indexed by (fov_id, track_id).

    Within one track, frame indices are strictly increasing with no
    duplicates, and all nodes agree on at most one parent.
    """

    def __init__(self, nodes: list[TrackNode], meta: DatasetMeta | None = None):
        self.nodes = list(nodes)
        self._index: dict[tuple[str, int], list[TrackNode]] = {}
        self._by_key: dict[NodeKey, TrackNode] = {}
        self._validate_and_index(meta)

    def _validate_and_index(self, meta: DatasetMeta | None) -> None:
        for i, node in enumerate(self.nodes):
            if node.parent_track_id is not None and node.parent_track_id == node.track_id:
                raise ValidationError(
                    f"node {i} ({node.key}): parent_track_id equals track_id"
                )
            if meta is not None:
                if not (0 <= node.t < meta.n_timepoints):
                    raise ValidationError(
                        f"node {i} ({node.key}): t outside [0, {meta.n_timepoints})"
                    )
                _, zdim, ydim, xdim = meta.volume_shape
                z, y, x = node.centroid
                if not (0 <= z < zdim and 0 <= y < ydim and 0 <= x < xdim):
                    raise ValidationError(
                        f"node {i} ({node.key}): centroid {node.centroid} outside "
                        f"volume bounds ({zdim}, {ydim}, {xdim})"
                    )
            if node.key in self._by_key:
                raise ValidationError(f"node {i}: duplicate key {node.key}")
            self._by_key[node.key] = node
            self._index.setdefault((node.fov_id, node.track_id), []).append(node)
        for (fov, tid), track_nodes in self._index.items():
            track_nodes.sort(key=lambda n: n.t)
            parents = {n.parent_track_id for n in track_nodes if n.parent_track_id is not None}
            if len(parents) > 1:
                raise ValidationError(
                    f"track ({fov}, {tid}) claims multiple parents: {sorted(parents)}"
                )

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, key: NodeKey) -> bool:
        return key in self._by_key

    def node(self, key: NodeKey) -> TrackNode:
        return self._by_key[key]

    def track(self, fov_id: str, track_id: int) -> list[TrackNode]:
        """Time-sorted nodes of one track (empty list if unknown)."""
        return list(self._index.get((fov_id, track_id), []))

    def track_ids(self) -> list[tuple[str, int]]:
        return sorted(self._index.keys())

    def tracks(self) -> Iterator[tuple[tuple[str, int], list[TrackNode]]]:
        for tid in self.track_ids():
            yield tid, list(self._index[tid])

    def parent_of(self, fov_id: str, track_id: int) -> int | None:
        nodes = self._index.get((fov_id, track_id))
        if not nodes:
            return None
        for n in nodes:
            if n.parent_track_id is not None:
                return n.parent_track_id
        return None

    def daughters_of(self, fov_id: str, track_id: int) -> list[int]:
        out = []
        for (fov, tid), nodes in self._index.items():
            if fov != fov_id:
                continue
            if any(n.parent_track_id == track_id for n in nodes):
                out.append(tid)
        return sorted(out)


@dataclass(frozen=True)
class AnnotationRecord:
    fov_id: str
    track_id: int
    t: int
    label_type: str  # "infection" | "division"
    value: int  # 0 | 1
    source: str  # "ground_truth" | "human"

    @property
    def node_key(self) -> NodeKey:
        return (self.fov_id, self.track_id, self.t)

    @property
    def upsert_key(self) -> tuple:
        return (self.fov_id, self.track_id, self.t, self.label_type, self.source)

    def validate(self, table: TrackTable | None = None) -> None:
        if self.label_type not in LABEL_TYPES:
            raise ValidationError(f"unknown label_type {self.label_type!r}")
        if self.value not in (0, 1):
            raise ValidationError(f"value must be 0 or 1, got {self.value!r}")
        if self.source not in ANNOTATION_SOURCES:
            raise ValidationError(f"unknown source {self.source!r}")
        if table is not None and self.node_key not in table:
            raise ValidationError(
                f"annotation references unknown node {self.node_key}"
            )

    def to_dict(self) -> dict:
        return {
            "fov_id": self.fov_id,
            "track_id": self.track_id,
            "t": self.t,
            "label_type": self.label_type,
            "value": self.value,
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationRecord":
        try:
            return cls(
                fov_id=str(d["fov_id"]),
                track_id=int(d["track_id"]),
                t=int(d["t"]),
                label_type=str(d["label_type"]),
                value=int(d["value"]),
                source=str(d["source"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"malformed annotation record {d!r}: {e}") from e


def division_events(table: TrackTable) -> list[tuple[str, int, int]]:
    """Division events as (fov_id, parent_track_id, t_division).

    One event per parent referenced by >= 2 daughter tracks; t_division is
    the parent's last frame. A parent with exactly one daughter is a track
    relabel, not a division: warned and excluded. Output is sorted, so the
    result is independent of input row order.
    """
    daughters: dict[tuple[str, int], list[int]] = {}
    for (fov, tid), nodes in table.tracks():
        parent = table.parent_of(fov, tid)
        if parent is not None:
            daughters.setdefault((fov, parent), []).append(tid)
    events = []
    for (fov, parent), kids in sorted(daughters.items()):
        if len(kids) < 2:
            warnings.warn(
                f"parent track ({fov}, {parent}) has a single daughter "
                f"{kids[0]}: treating as track relink, not division",
                TrackRelinkWarning,
            )
            continue
        parent_nodes = table.track(fov, parent)
        if not parent_nodes:
            warnings.warn(
                f"parent track ({fov}, {parent}) referenced by daughters "
                f"{kids} has no nodes; skipping",
                TrackRelinkWarning,
            )
            continue
        events.append((fov, parent, parent_nodes[-1].t))
    return events


class DatasetHandle:
    """Lazy accessor over one dataset directory."""

    def __init__(self, path: Path, meta: DatasetMeta):
        self.path = Path(path)
        self.meta = meta
        self._write_lock = threading.Lock()
        self._volume_stats: dict[tuple[str, int, int], tuple[float, float]] = {}
        self._fov_stats: dict[tuple[str, int], tuple[float, float]] = {}
        self._memmaps: dict[tuple[str, int], np.memmap] = {}

    # -- volumes ------------------------------------------------------------

    def volume_path(self, fov_id: str, t: int) -> Path:
        return self.path / FOV_DIR / fov_id / f"t{t}.bin"

    def _check_coords(self, fov_id: str, t: int) -> None:
        if fov_id not in self.meta.fov_ids:
            raise RangeError(f"unknown fov {fov_id!r}")
        if not (0 <= t < self.meta.n_timepoints):
            raise RangeError(
                f"t={t} outside [0, {self.meta.n_timepoints}) for fov {fov_id!r}"
            )

    def read_volume(self, fov_id: str, t: int) -> np.ndarray:
        """Full (C, Z, Y, X) float32 volume; repeated reads are byte-identical."""
        self._check_coords(fov_id, t)
        data = np.fromfile(self.volume_path(fov_id, t), dtype="<f4")
        return data.reshape(self.meta.volume_shape)

    def volume_memmap(self, fov_id: str, t: int) -> np.memmap:
        """Read-only memmap of one volume, cached per (fov, t)."""
        self._check_coords(fov_id, t)
        key = (fov_id, t)
        mm = self._memmaps.get(key)
        if mm is None:
            mm = np.memmap(
                self.volume_path(fov_id, t), dtype="<f4", mode="r",
                shape=self.meta.volume_shape,
            )
            self._memmaps[key] = mm
        return mm

    # -- normalization statistics (cached) -----------------------------------

    def volume_stats(self, fov_id: str, t: int, channel: int) -> tuple[float, float]:
        """(median, p99) of one channel of one timepoint's volume."""
        key = (fov_id, t, channel)
        if key not in self._volume_stats:
            chan = np.asarray(self.volume_memmap(fov_id, t)[channel])
            self._volume_stats[key] = (
                float(np.median(chan)), float(np.percentile(chan, 99)),
            )
        return self._volume_stats[key]

    def fov_series_stats(self, fov_id: str, channel: int) -> tuple[float, float]:
        """(mean, std) of one channel pooled over the fov's whole time series."""
        key = (fov_id, channel)
        if key not in self._fov_stats:
            total = 0.0
            total_sq = 0.0
            count = 0
            for t in range(self.meta.n_timepoints):
                chan = np.asarray(self.volume_memmap(fov_id, t)[channel], dtype=np.float64)
                total += float(chan.sum())
                total_sq += float(np.square(chan).sum())
                count += chan.size
            mean = total / count
            var = max(total_sq / count - mean * mean, 0.0)
            self._fov_stats[key] = (mean, float(np.sqrt(var)))
        return self._fov_stats[key]

    # -- tracks ---------------------------------------------------------------

    def load_tracks(self) -> TrackTable:
        return load_tracks(self)

    # -- annotations ----------------------------------------------------------

    @property
    def annotations_path(self) -> Path:
        return self.path / ANNOTATIONS_FILE

    def read_annotations(self) -> list[AnnotationRecord]:
        if not self.annotations_path.exists():
            return []
        records = []
        with open(self.annotations_path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    records.append(AnnotationRecord.from_dict(json.loads(line)))
        return records

    def write_annotations(
        self, records: list[AnnotationRecord], table: TrackTable | None = None
    ) -> None:
        """Upsert records keyed by (fov, track, t, label_type, source).

        Writes are serialized by the handle and atomic (temp file + rename),
        so readers never observe a partial file.
        """
        if table is None:
            table = self.load_tracks()
        for rec in records:
            rec.validate(table)
        with self._write_lock:
            existing = {r.upsert_key: r for r in self.read_annotations()}
            for rec in records:
                existing[rec.upsert_key] = rec
            tmp = self.annotations_path.with_suffix(".jsonl.tmp")
            with open(tmp, "w", encoding="utf-8") as f:
                for key in sorted(existing):
                    f.write(json.dumps(existing[key].to_dict(), sort_keys=True) + "\n")
            os.replace(tmp, self.annotations_path)


def annotations_io(
    handle: DatasetHandle,
    records: list[AnnotationRecord] | None = None,
    table: TrackTable | None = None,
) -> list[AnnotationRecord]:
    """Write `records` (if given) then return all persisted records."""
    if records is not None:
        handle.write_annotations(records, table=table)
    return handle.read_annotations()


def open_dataset(path: str | Path) -> DatasetHandle:
    """Open a dataset directory, validating metadata against disk content.

    Only metadata is parsed and volume files stat()ed; no volume bytes are
    read here.
    """
    path = Path(path)
    meta_path = path / META_FILE
    if not meta_path.exists():
        raise MetaError(META_FILE, f"not found under {path}")
    try:
        with open(meta_path, encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise MetaError(META_FILE, f"invalid JSON: {e}") from e
    meta = DatasetMeta.from_dict(raw)

    expected_bytes = 4 * int(np.prod(meta.volume_shape))
    missing_fovs = []
    for fov in meta.fov_ids:
        fov_dir = path / FOV_DIR / fov
        if not fov_dir.is_dir():
            missing_fovs.append(fov)
            continue
        for t in range(meta.n_timepoints):
            vol = fov_dir / f"t{t}.bin"
            if not vol.exists():
                raise IntegrityError(f"missing volume file {vol}")
            size = vol.stat().st_size
            if size != expected_bytes:
                raise IntegrityError(
                    f"{vol}: {size} bytes on disk, meta declares shape "
                    f"{meta.volume_shape} = {expected_bytes} bytes"
                )
    if missing_fovs:
        raise IntegrityError(f"meta declares missing fov(s): {missing_fovs}")
    return DatasetHandle(path, meta)


def load_tracks(handle: DatasetHandle) -> TrackTable:
    """Parse and validate tracks.csv; errors cite 1-based data row numbers."""
    tracks_path = handle.path / TRACKS_FILE
    if not tracks_path.exists():
        raise ValidationError(f"{TRACKS_FILE} not found under {handle.path}")
    nodes = []
    seen: dict[NodeKey, int] = {}
    with open(tracks_path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        expected = ["fov_id", "track_id", "t", "z", "y", "x", "parent_track_id"]
        if reader.fieldnames != expected:
            raise ValidationError(
                f"{TRACKS_FILE} header {reader.fieldnames} != {expected}"
            )
        for row_num, row in enumerate(reader, start=1):
            try:
                parent = row["parent_track_id"].strip()
                node = TrackNode(
                    fov_id=row["fov_id"],
                    track_id=int(row["track_id"]),
                    t=int(row["t"]),
                    centroid=(float(row["z"]), float(row["y"]), float(row["x"])),
                    parent_track_id=int(parent) if parent else None,
                )
            except (KeyError, TypeError, ValueError) as e:
                raise ValidationError(f"row {row_num}: malformed ({e})") from e
            if node.key in seen:
                raise ValidationError(
                    f"row {row_num}: duplicate (fov, track, t) {node.key}, "
                    f"first seen at row {seen[node.key]}"
                )
            seen[node.key] = row_num
            nodes.append(node)
    try:
        return TrackTable(nodes, meta=handle.meta)
    except ValidationError as e:
        # TrackTable reports node list positions; translate to csv rows.
        raise ValidationError(f"{TRACKS_FILE}: {e}") from e


def filter_fovs(table: TrackTable, fovs) -> TrackTable:
    """Sub-table containing only the given FOVs (validation already done)."""
    keep = set(fovs)
    unknown = keep - {n.fov_id for n in table.nodes}
    if unknown:
        raise ValidationError(f"unknown fov ids {sorted(unknown)}")
    return TrackTable([n for n in table.nodes if n.fov_id in keep])


# -- writer helpers (used by the synthetic generator and tests) ---------------


def save_meta(path: Path, meta: DatasetMeta) -> None:
    meta.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / META_FILE, "w", encoding="utf-8") as f:
        json.dump(meta.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def write_volume(path: Path, fov_id: str, t: int, volume: np.ndarray) -> None:
    out = Path(path) / FOV_DIR / fov_id
    out.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(volume, dtype="<f4").tofile(out / f"t{t}.bin")


def write_tracks_csv(path: Path, nodes: list[TrackNode]) -> None:
    with open(Path(path) / TRACKS_FILE, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["fov_id", "track_id", "t", "z", "y", "x", "parent_track_id"])
        for n in nodes:
            parent = "" if n.parent_track_id is None else n.parent_track_id
            writer.writerow(
                [n.fov_id, n.track_id, n.t,
                 f"{n.centroid[0]:.3f}", f"{n.centroid[1]:.3f}", f"{n.centroid[2]:.3f}",
                 parent]
            )
