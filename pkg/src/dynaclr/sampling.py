"""Anchor enumeration and triplet construction for contrastive training.

Three strategies:

  classical       : positive is a second augmentation of the anchor;
                     negative is any other cell at any time.
  cell_aware      : same pairing rule as classical here (tracking is
                     used only to identify cells, not to pair in time).
  cell_time_aware : positive is the same cell tau frames later;
                     negative is a different cell at exactly that frame.

In every strategy the negative comes from a different track, where a
track is identified by (fov_id, track_id). Negatives are drawn uniformly
over the eligible set by rejection from a precomputed candidate list,
which preserves uniformity while staying O(1) per draw.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigurationError, EmptyAnchorSetError, SamplingError, ValidationError
from .patches import Patch, PatchPipeline, augment_patch
from .store import NodeKey, TrackNode, TrackTable

STRATEGIES = ("classical", "cell_aware", "cell_time_aware")
AUGMENT_ANCHOR = "augment_anchor"

_MAX_REJECTS = 10_000
_INVALID_PATCH_RETRIES = 5


@dataclass(frozen=True)
class SamplerConfig:
    strategy: str = "cell_time_aware"
    tau_frames: int = 1
    batch_size: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(
                f"strategy {self.strategy!r} not one of {STRATEGIES}"
            )
        if self.strategy == "cell_time_aware" and self.tau_frames < 1:
            raise ConfigurationError("tau_frames must be >= 1 for cell_time_aware")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "tau_frames": self.tau_frames,
            "batch_size": self.batch_size,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        try:
            cfg = cls(
                strategy=str(d["strategy"]),
                tau_frames=int(d.get("tau_frames", 1)),
                batch_size=int(d.get("batch_size", 64)),
                seed=int(d.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError(f"malformed sampler config: {e}") from e
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class TripletIndex:
    anchor: NodeKey
    positive: NodeKey | str  # node key, or "augment_anchor"
    negative: NodeKey

    def validate(self, cfg: SamplerConfig) -> None:
        a_track = (self.anchor[0], self.anchor[1])
        n_track = (self.negative[0], self.negative[1])
        if a_track == n_track:
            raise ValidationError(f"negative shares the anchor track {a_track}")
        if cfg.strategy == "cell_time_aware":
            expected = (self.anchor[0], self.anchor[1], self.anchor[2] + cfg.tau_frames)
            if self.positive != expected:
                raise ValidationError(
                    f"positive {self.positive} is not the anchor at t+tau {expected}"
                )
            if self.negative[2] != self.anchor[2] + cfg.tau_frames:
                raise ValidationError(
                    f"negative t {self.negative[2]} != anchor t + tau"
                )
        else:
            if self.positive != AUGMENT_ANCHOR:
                raise ValidationError(
                    f"strategy {cfg.strategy} requires positive={AUGMENT_ANCHOR!r}"
                )


class TripletSampler:
    """Precomputed index over valid nodes for fast uniform sampling.

    patch_validity decides which nodes can be used at all (defaults to
    accepting every node); it is evaluated once per node at construction.
    """

    def __init__(
        self,
        table: TrackTable,
        cfg: SamplerConfig,
        patch_validity: Callable[[TrackNode], bool] | None = None,
    ):
        cfg.validate()
        self.table = table
        self.cfg = cfg
        valid = patch_validity if patch_validity is not None else (lambda node: True)

        self._valid: dict[NodeKey, bool] = {n.key: bool(valid(n)) for n in table.nodes}
        self._valid_keys: list[NodeKey] = sorted(k for k, ok in self._valid.items() if ok)
        self._by_time: dict[int, list[NodeKey]] = {}
        for key in self._valid_keys:
            self._by_time.setdefault(key[2], []).append(key)
        self._track_count: dict[tuple[str, int], int] = {}
        for key in self._valid_keys:
            track = (key[0], key[1])
            self._track_count[track] = self._track_count.get(track, 0) + 1

        self.anchors = self._enumerate_anchors()
        if not self.anchors:
            raise EmptyAnchorSetError(
                f"no anchors for strategy {cfg.strategy!r} "
                f"(tau_frames={cfg.tau_frames});"
                f" {len(self._valid_keys)} of {len(self._valid)} nodes have"
                " valid patches (tracks may be shorter than tau, or the patch"
                " window may not fit the volume)"
            )

    def _enumerate_anchors(self) -> list[NodeKey]:
        if self.cfg.strategy in ("classical", "cell_aware"):
            return list(self._valid_keys)
        tau = self.cfg.tau_frames
        out = []
        for key in self._valid_keys:
            fov, track, t = key
            if self._valid.get((fov, track, t + tau), False):
                out.append(key)
        return out

    def _negative_pool(self, anchor: NodeKey) -> tuple[list[NodeKey], int]:
        """Candidate list and the eligible count within it."""
        a_track = (anchor[0], anchor[1])
        if self.cfg.strategy == "cell_time_aware":
            t_neg = anchor[2] + self.cfg.tau_frames
            pool = self._by_time.get(t_neg, [])
            same = sum(1 for k in pool if (k[0], k[1]) == a_track)
            return pool, len(pool) - same
        pool = self._valid_keys
        return pool, len(pool) - self._track_count.get(a_track, 0)

    def sample(self, anchor: NodeKey, rng: np.random.Generator) -> TripletIndex:
        if not self._valid.get(anchor, False):
            raise SamplingError(f"anchor {anchor} is not a valid node")
        a_track = (anchor[0], anchor[1])
        pool, eligible = self._negative_pool(anchor)
        if eligible <= 0:
            raise SamplingError(
                f"no eligible negative for anchor {anchor} at frame "
                f"t={anchor[2] + self.cfg.tau_frames if self.cfg.strategy == 'cell_time_aware' else anchor[2]}"
            )
        # rejection keeps the draw uniform over the eligible subset
        negative = None
        for _ in range(_MAX_REJECTS):
            cand = pool[int(rng.integers(len(pool)))]
            if (cand[0], cand[1]) != a_track:
                negative = cand
                break
        if negative is None:
            others = [k for k in pool if (k[0], k[1]) != a_track]
            negative = others[int(rng.integers(len(others)))]

        if self.cfg.strategy == "cell_time_aware":
            positive: NodeKey | str = (anchor[0], anchor[1], anchor[2] + self.cfg.tau_frames)
        else:
            positive = AUGMENT_ANCHOR
        triplet = TripletIndex(anchor=anchor, positive=positive, negative=negative)
        triplet.validate(self.cfg)
        return triplet

    def sample_batch(self, rng: np.random.Generator, anchors: list[NodeKey] | None = None) -> list[TripletIndex]:
        """One triplet per anchor; defaults to batch_size uniform anchors."""
        if anchors is None:
            idx = rng.integers(len(self.anchors), size=self.cfg.batch_size)
            anchors = [self.anchors[int(i)] for i in idx]
        return [self.sample(a, rng) for a in anchors]


def enumerate_anchors(
    table: TrackTable,
    cfg: SamplerConfig,
    patch_validity: Callable[[TrackNode], bool] | None = None,
) -> list[NodeKey]:
    """Anchor keys for the strategy; raises when the set comes up empty."""
    return TripletSampler(table, cfg, patch_validity).anchors


def sample_triplet(
    anchor: NodeKey,
    table: TrackTable,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    patch_validity: Callable[[TrackNode], bool] | None = None,
) -> TripletIndex:
    return TripletSampler(table, cfg, patch_validity).sample(anchor, rng)


@dataclass(frozen=True)
class TripletBatch:
    anchor: np.ndarray  # float32 [B, C, Z, Y, X]
    positive: np.ndarray
    negative: np.ndarray
    indices: tuple[TripletIndex, ...]


def _augment_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63))


def build_triplet_batch(
    indices: list[TripletIndex],
    pipeline: PatchPipeline,
    table: TrackTable,
    rng: np.random.Generator,
    sampler: TripletSampler | None = None,
) -> TripletBatch:
    """Materialize aligned (anchor, positive, negative) stacks.

    Anchor and positive are augmented independently; augmentation-anchor
    positives are a second augmentation of the anchor patch; negatives
    are augmented once. A triplet whose patches turn out invalid is
    resampled (when a sampler is supplied) up to a small retry cap.
    """
    if pipeline.aug is None:
        raise ConfigurationError("batch building needs an augmentation pipeline")

    def patches_for(triplet: TripletIndex) -> tuple[Patch, Patch, Patch] | None:
        anchor_node = table.node(triplet.anchor)
        a_src = pipeline.source_patch(anchor_node)
        if not a_src.valid:
            return None
        a = augment_patch(a_src, pipeline.aug, _augment_seed(rng), pipeline.spec)
        if triplet.positive == AUGMENT_ANCHOR:
            p = augment_patch(a_src, pipeline.aug, _augment_seed(rng), pipeline.spec)
        else:
            p_src = pipeline.source_patch(table.node(triplet.positive))
            if not p_src.valid:
                return None
            p = augment_patch(p_src, pipeline.aug, _augment_seed(rng), pipeline.spec)
        n_src = pipeline.source_patch(table.node(triplet.negative))
        if not n_src.valid:
            return None
        n = augment_patch(n_src, pipeline.aug, _augment_seed(rng), pipeline.spec)
        return a, p, n

    anchors, positives, negatives, used = [], [], [], []
    for triplet in indices:
        result = patches_for(triplet)
        retries = 0
        while result is None:
            if sampler is None or retries >= _INVALID_PATCH_RETRIES:
                raise SamplingError(
                    f"triplet {triplet} references an invalid patch "
                    f"after {retries} retries"
                )
            anchor = sampler.anchors[int(rng.integers(len(sampler.anchors)))]
            triplet = sampler.sample(anchor, rng)
            result = patches_for(triplet)
            retries += 1
        a, p, n = result
        anchors.append(a.data)
        positives.append(p.data)
        negatives.append(n.data)
        used.append(triplet)

    return TripletBatch(
        anchor=np.stack(anchors),
        positive=np.stack(positives),
        negative=np.stack(negatives),
        indices=tuple(used),
    )


def write_triplet_log(path: str | Path, indices: list[TripletIndex]) -> None:
    """Audit log of sampled triplets as CSV rows of key triples."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow([
            "anchor_fov", "anchor_track", "anchor_t",
            "positive_fov", "positive_track", "positive_t",
            "negative_fov", "negative_track", "negative_t",
        ])
        for tr in indices:
            if tr.positive == AUGMENT_ANCHOR:
                pos = (tr.anchor[0], tr.anchor[1], tr.anchor[2])
            else:
                pos = tr.positive
            writer.writerow(list(tr.anchor) + list(pos) + list(tr.negative))
