"""Encoder, triplet objective, training loop, embedding and checkpoints.

The encoder is a 3D-stem convolutional network: one Conv3d with kernel
and stride (5, 4, 4) consumes the whole axial extent in bands of five
slices, the surviving axial dimension is folded into channels, and a
stack of depthwise-conv blocks with pointwise expansion processes the
resulting 2D map. Global average pooling plus a LayerNorm gives the
feature vector h; a 2-layer MLP head maps h to the projection z used by
the triplet loss. Downstream analytics read h, never z.

Two backbone scales share one code path: "tiny" (depths (3,3,9,3),
widths (96,192,384,768), 768-d features, inputs 15x128x128) and "desk"
(depths (1,1,2,1), widths (24,48,96,192), 192-d features, inputs
5x32x32) for CPU-sized runs.

Nothing in the network is stochastic in evaluation mode (no dropout, no
stochastic depth, batch-independent LayerNorm only), so forward passes
are pure and batch composition cannot leak between samples.

Checkpoints are a single file: a 4-byte little-endian header length, a
JSON header (configs, seed, epoch, loss log, checksums, tensor manifest
of name/shape/offset), then one raw little-endian float32 blob holding
parameters and optimizer moments. Per-epoch RNG streams are derived from
(seed, 1000 + epoch), so resuming from a checkpoint reproduces the exact
batch sequence of an uninterrupted run without serializing RNG state.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, DynaclrError, IntegrityError, ValidationError
from .patches import AugmentationConfig, PatchPipeline, PatchSpec
from .repro import code_checksum, sha256_bytes
from .sampling import SamplerConfig, TripletSampler, build_triplet_batch
from .store import DatasetHandle, NodeKey, TrackTable, filter_fovs

BACKBONES = {
    "tiny": {"depths": (3, 3, 9, 3), "widths": (96, 192, 384, 768)},
    "desk": {"depths": (1, 1, 2, 1), "widths": (24, 48, 96, 192)},
}

CHECKPOINT_FORMAT = "dynaclr-checkpoint"
_LN_EPS = 1e-6
_LAYER_SCALE_INIT = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 2
    backbone_scale: str = "desk"
    input_size: tuple[int, int, int] = (5, 32, 32)  # (Z, Y, X)
    stem_kernel: tuple[int, int, int] = (5, 4, 4)
    stem_stride: tuple[int, int, int] = (5, 4, 4)
    projection_dim: int = 32

    @property
    def depths(self) -> tuple[int, ...]:
        return BACKBONES[self.backbone_scale]["depths"]

    @property
    def widths(self) -> tuple[int, ...]:
        return BACKBONES[self.backbone_scale]["widths"]

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    @property
    def stem_z_out(self) -> int:
        return self.input_size[0] // self.stem_kernel[0]

    @property
    def stem_channels(self) -> int:
        # fold of the axial dimension must land exactly on the first width
        return self.widths[0] // self.stem_z_out

    def validate(self) -> None:
        if self.backbone_scale not in BACKBONES:
            raise ConfigurationError(
                f"backbone_scale {self.backbone_scale!r} not one of {sorted(BACKBONES)}"
            )
        if self.in_channels < 1 or self.projection_dim < 1:
            raise ConfigurationError("in_channels and projection_dim must be >= 1")
        z, y, x = self.input_size
        kz, ky, kx = self.stem_kernel
        sz, sy, sx = self.stem_stride
        if (kz, ky, kx) != (sz, sy, sx):
            raise ConfigurationError("stem kernel and stride must match (patchify stem)")
        if z % kz != 0:
            raise ConfigurationError(f"input Z={z} not divisible by stem kernel z={kz}")
        if y % sy != 0 or x % sx != 0:
            raise ConfigurationError(
                f"lateral input {(y, x)} not divisible by stem stride {(sy, sx)}"
            )
        if self.widths[0] % (z // kz) != 0:
            raise ConfigurationError(
                f"first width {self.widths[0]} not divisible by folded axial size {z // kz}"
            )

    @classmethod
    def for_scale(cls, scale: str, in_channels: int = 2) -> "ModelConfig":
        if scale == "tiny":
            cfg = cls(in_channels=in_channels, backbone_scale="tiny",
                      input_size=(15, 128, 128))
        else:
            cfg = cls(in_channels=in_channels, backbone_scale=scale)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "backbone_scale": self.backbone_scale,
            "input_size": list(self.input_size),
            "stem_kernel": list(self.stem_kernel),
            "stem_stride": list(self.stem_stride),
            "projection_dim": self.projection_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            cfg = cls(
                in_channels=int(d["in_channels"]),
                backbone_scale=str(d["backbone_scale"]),
                input_size=tuple(int(v) for v in d["input_size"]),
                stem_kernel=tuple(int(v) for v in d.get("stem_kernel", (5, 4, 4))),
                stem_stride=tuple(int(v) for v in d.get("stem_stride", (5, 4, 4))),
                projection_dim=int(d.get("projection_dim", 32)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError(f"malformed model config: {e}") from e
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 2e-5
    margin: float = 0.5
    epochs: int = 10
    seed: int = 0
    checkpoint_every: int = 0  # 0: only the final checkpoint
    weight_decay: float = 0.05
    optimizer: str = "adamw"

    def validate(self) -> None:
        if self.margin <= 0:
            raise ConfigurationError("margin must be > 0")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")
        if self.optimizer != "adamw":
            raise ConfigurationError(f"unsupported optimizer {self.optimizer!r}")

    @classmethod
    def desk_default(cls, epochs: int = 8, seed: int = 0) -> "TrainConfig":
        # CPU-sized run: smaller batches need a proportionally larger rate
        # than the full-scale default to leave initialization at all
        return cls(batch_size=64, learning_rate=1e-3, epochs=epochs, seed=seed)

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "margin": self.margin,
            "epochs": self.epochs,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "weight_decay": self.weight_decay,
            "optimizer": self.optimizer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        try:
            cfg = cls(
                batch_size=int(d.get("batch_size", 256)),
                learning_rate=float(d.get("learning_rate", 2e-5)),
                margin=float(d.get("margin", 0.5)),
                epochs=int(d.get("epochs", 10)),
                seed=int(d.get("seed", 0)),
                checkpoint_every=int(d.get("checkpoint_every", 0)),
                weight_decay=float(d.get("weight_decay", 0.05)),
                optimizer=str(d.get("optimizer", "adamw")),
            )
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"malformed train config: {e}") from e
        cfg.validate()
        return cfg


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis of [B, C, H, W] maps."""

    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mu = x.mean(dim=1, keepdim=True)
        var = (x - mu).pow(2).mean(dim=1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + _LN_EPS)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class Block(nn.Module):
    """Depthwise 7x7 conv, LayerNorm, 4x pointwise MLP, layer scale, residual."""

    def __init__(self, dim: int):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, kernel_size=7, padding=3, groups=dim)
        self.norm = nn.LayerNorm(dim, eps=_LN_EPS)
        self.pwconv1 = nn.Linear(dim, 4 * dim)
        self.act = nn.GELU()
        self.pwconv2 = nn.Linear(4 * dim, dim)
        self.gamma = nn.Parameter(_LAYER_SCALE_INIT * torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        residual = x
        x = self.dwconv(x)
        x = x.permute(0, 2, 3, 1)
        x = self.norm(x)
        x = self.pwconv2(self.act(self.pwconv1(x)))
        x = self.gamma * x
        return residual + x.permute(0, 3, 1, 2)


class Encoder(nn.Module):
    """3D patchify stem -> axial fold -> 2D backbone -> (h, z)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = config.widths
        self.stem = nn.Conv3d(
            config.in_channels,
            config.stem_channels,
            kernel_size=config.stem_kernel,
            stride=config.stem_stride,
        )
        self.stem_norm = LayerNorm2d(widths[0])
        self.stages = nn.ModuleList(
            [nn.Sequential(*[Block(w) for _ in range(d)])
             for d, w in zip(config.depths, widths)]
        )
        self.downsamples = nn.ModuleList(
            [nn.Sequential(LayerNorm2d(widths[i]),
                           nn.Conv2d(widths[i], widths[i + 1], kernel_size=2, stride=2))
             for i in range(len(widths) - 1)]
        )
        self.head_norm = nn.LayerNorm(config.feature_dim, eps=_LN_EPS)
        self.proj = nn.Sequential(
            nn.Linear(config.feature_dim, config.feature_dim),
            nn.GELU(),
            nn.Linear(config.feature_dim, config.projection_dim),
        )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        expected = (self.config.in_channels, *self.config.input_size)
        if x.ndim != 5 or tuple(x.shape[1:]) != expected:
            raise ConfigurationError(
                f"input shape {tuple(x.shape)} does not match (B, {expected})"
            )
        x = self.stem(x)
        b, c, zd, hh, ww = x.shape
        x = x.reshape(b, c * zd, hh, ww)
        x = self.stem_norm(x)
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i < len(self.downsamples):
                x = self.downsamples[i](x)
        h = self.head_norm(x.mean(dim=(2, 3)))
        z = self.proj(h)
        return h, z


def init_params(model: Encoder, seed: int) -> None:
    """Truncated-normal conv/linear weights, zero biases, seeded globally."""
    torch.manual_seed(seed)
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.LayerNorm, LayerNorm2d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    for m in model.modules():
        if isinstance(m, Block):
            nn.init.constant_(m.gamma, _LAYER_SCALE_INIT)


def triplet_loss(
    z_a: torch.Tensor, z_p: torch.Tensor, z_n: torch.Tensor, margin: float
) -> torch.Tensor:
    """Sum over the batch of max(|a-p|^2 - |a-n|^2 + margin, 0)."""
    if not (z_a.shape == z_p.shape == z_n.shape) or z_a.ndim != 2:
        raise ValidationError(
            f"embedding stacks must share a [B, d] shape, got "
            f"{tuple(z_a.shape)}, {tuple(z_p.shape)}, {tuple(z_n.shape)}"
        )
    if margin <= 0:
        raise ConfigurationError("margin must be > 0")
    d_ap = (z_a - z_p).pow(2).sum(dim=1)
    d_an = (z_a - z_n).pow(2).sum(dim=1)
    return torch.clamp(d_ap - d_an + margin, min=0.0).sum()


# -- checkpoints ---------------------------------------------------------------


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    sampler_config: SamplerConfig | None
    channels: tuple[str, ...]
    epoch: int
    loss_log: list[dict] = field(default_factory=list)
    params: dict[str, np.ndarray] = field(default_factory=dict)
    optim: dict[str, np.ndarray] = field(default_factory=dict)
    optim_steps: dict[str, int] = field(default_factory=dict)
    code_checksum: str = ""
    patch_spec: dict = field(default_factory=dict)

    def _blob(self) -> tuple[list[dict], bytes]:
        entries: list[dict] = []
        blob = bytearray()
        for name in sorted(self.params) + sorted(self.optim):
            arr = self.params.get(name)
            if arr is None:
                arr = self.optim[name]
            arr = np.ascontiguousarray(arr, dtype="<f4")
            entries.append({"name": name, "shape": list(arr.shape), "offset": len(blob)})
            blob += arr.tobytes()
        return entries, bytes(blob)

    def param_checksum(self) -> str:
        _, blob = self._blob()
        return sha256_bytes(blob)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        entries, blob = self._blob()
        header = {
            "format": CHECKPOINT_FORMAT,
            "version": 1,
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "sampler_config": (
                self.sampler_config.to_dict() if self.sampler_config else None
            ),
            "channels": list(self.channels),
            "seed": self.train_config.seed,
            "epoch": self.epoch,
            "loss_log": self.loss_log,
            "optim_steps": self.optim_steps,
            "code_checksum": self.code_checksum,
            "patch_spec": self.patch_spec,
            "param_checksum": sha256_bytes(blob),
            "manifest": entries,
        }
        payload = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(struct.pack("<I", len(payload)))
            f.write(payload)
            f.write(blob)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        with open(path, "rb") as f:
            raw = f.read(4)
            if len(raw) < 4:
                raise IntegrityError(f"{path}: truncated checkpoint")
            (hlen,) = struct.unpack("<I", raw)
            payload = f.read(hlen)
            blob = f.read()
        try:
            header = json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise IntegrityError(f"{path}: bad checkpoint header: {e}") from e
        if header.get("format") != CHECKPOINT_FORMAT:
            raise IntegrityError(f"{path}: not a checkpoint file")
        if sha256_bytes(blob) != header["param_checksum"]:
            raise IntegrityError(f"{path}: parameter blob checksum mismatch")
        params: dict[str, np.ndarray] = {}
        optim: dict[str, np.ndarray] = {}
        for e in header["manifest"]:
            shape = tuple(int(s) for s in e["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(
                blob, dtype="<f4", count=count, offset=int(e["offset"])
            ).reshape(shape).copy()
            if e["name"].startswith("optim/"):
                optim[e["name"]] = arr
            else:
                params[e["name"]] = arr
        return cls(
            model_config=ModelConfig.from_dict(header["model_config"]),
            train_config=TrainConfig.from_dict(header["train_config"]),
            sampler_config=(
                SamplerConfig.from_dict(header["sampler_config"])
                if header.get("sampler_config")
                else None
            ),
            channels=tuple(header.get("channels", ())),
            epoch=int(header["epoch"]),
            loss_log=list(header.get("loss_log", [])),
            params=params,
            optim=optim,
            optim_steps={k: int(v) for k, v in header.get("optim_steps", {}).items()},
            code_checksum=str(header.get("code_checksum", "")),
            patch_spec=dict(header.get("patch_spec", {})),
        )

    def build_model(self) -> Encoder:
        model = Encoder(self.model_config)
        state = {k: torch.from_numpy(v.copy()) for k, v in self.params.items()}
        model.load_state_dict(state)
        return model


def _snapshot_params(model: Encoder) -> dict[str, np.ndarray]:
    return {
        name: p.detach().numpy().astype("<f4", copy=True)
        for name, p in model.state_dict().items()
    }


def _snapshot_optim(
    model: Encoder, optimizer: torch.optim.Optimizer
) -> tuple[dict[str, np.ndarray], dict[str, int]]:
    names = [n for n, _ in model.named_parameters()]
    arrays: dict[str, np.ndarray] = {}
    steps: dict[str, int] = {}
    for idx, state in optimizer.state_dict()["state"].items():
        name = names[idx]
        steps[name] = int(state["step"])
        arrays[f"optim/{name}/exp_avg"] = state["exp_avg"].numpy().astype("<f4", copy=True)
        arrays[f"optim/{name}/exp_avg_sq"] = state["exp_avg_sq"].numpy().astype(
            "<f4", copy=True
        )
    return arrays, steps


def _restore_optim(
    model: Encoder,
    optimizer: torch.optim.Optimizer,
    arrays: dict[str, np.ndarray],
    steps: dict[str, int],
) -> None:
    if not steps:
        return
    names = [n for n, _ in model.named_parameters()]
    sd = optimizer.state_dict()
    state = {}
    for idx, name in enumerate(names):
        if name not in steps:
            continue
        state[idx] = {
            "step": torch.tensor(float(steps[name])),
            "exp_avg": torch.from_numpy(arrays[f"optim/{name}/exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"optim/{name}/exp_avg_sq"].copy()),
        }
    sd["state"] = state
    optimizer.load_state_dict(sd)


# -- training ------------------------------------------------------------------


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """The per-epoch stream; resuming at epoch k replays epochs k.. exactly."""
    return np.random.default_rng([seed, 1000 + epoch])


def _make_optimizer(model: Encoder, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )


def train_model(
    handle: DatasetHandle,
    table: TrackTable,
    sampler_cfg: SamplerConfig,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    channels: tuple[str, ...] | None = None,
    fovs: list[str] | None = None,
    aug: AugmentationConfig | None = None,
    resume: Checkpoint | None = None,
    out_dir: str | Path | None = None,
    log=None,
) -> Checkpoint:
    """Train the encoder with triplet batches; return the final checkpoint.

    fovs restricts training to a FOV subset (train/test splits). When
    resume is given, training continues from its epoch up to
    train_cfg.epochs with bit-identical batches to an uninterrupted run.
    Intermediate checkpoints land in out_dir every checkpoint_every
    epochs when both are set.
    """
    sampler_cfg.validate()
    model_cfg.validate()
    train_cfg.validate()
    channels = tuple(channels) if channels is not None else handle.meta.channels
    if model_cfg.in_channels != len(channels):
        raise ConfigurationError(
            f"model expects {model_cfg.in_channels} channels, got {channels}"
        )
    if aug is None:
        aug = AugmentationConfig()
    spec = PatchSpec.for_final(model_cfg.input_size, channels, max_scale=aug.max_scale)
    pipeline = PatchPipeline(handle, spec, aug)
    train_table = filter_fovs(table, fovs) if fovs else table
    sampler = TripletSampler(train_table, sampler_cfg, pipeline.node_valid)

    model = Encoder(model_cfg)
    if resume is not None:
        state = {k: torch.from_numpy(v.copy()) for k, v in resume.params.items()}
        model.load_state_dict(state)
        start_epoch = resume.epoch
        loss_log = list(resume.loss_log)
    else:
        init_params(model, train_cfg.seed)
        start_epoch = 0
        loss_log = []
    optimizer = _make_optimizer(model, train_cfg)
    if resume is not None:
        _restore_optim(model, optimizer, resume.optim, resume.optim_steps)

    def snapshot(epoch: int) -> Checkpoint:
        arrays, steps = _snapshot_optim(model, optimizer)
        return Checkpoint(
            model_config=model_cfg,
            train_config=train_cfg,
            sampler_config=sampler_cfg,
            channels=channels,
            epoch=epoch,
            loss_log=list(loss_log),
            params=_snapshot_params(model),
            optim=arrays,
            optim_steps=steps,
            code_checksum=code_checksum(),
            patch_spec=spec.to_dict(),
        )

    batch_size = train_cfg.batch_size
    model.train()
    for epoch in range(start_epoch, train_cfg.epochs):
        rng = epoch_rng(train_cfg.seed, epoch)
        perm = rng.permutation(len(sampler.anchors))
        chunks = [perm[i:i + batch_size]
                  for i in range(0, len(perm) - batch_size + 1, batch_size)]
        if not chunks:  # fewer anchors than one batch: use them all
            chunks = [perm]
        batch_losses = []
        for step, chunk in enumerate(chunks):
            anchors = [sampler.anchors[int(i)] for i in chunk]
            triplets = sampler.sample_batch(rng, anchors=anchors)
            batch = build_triplet_batch(triplets, pipeline, train_table, rng, sampler)
            n = len(anchors)
            x = torch.from_numpy(
                np.concatenate([batch.anchor, batch.positive, batch.negative])
            )
            _, z = model(x)
            z_a, z_p, z_n = torch.split(z, n)
            loss = triplet_loss(z_a, z_p, z_n, train_cfg.margin)
            if not torch.isfinite(loss):
                param_norm = math.sqrt(
                    sum(float(p.detach().pow(2).sum()) for p in model.parameters())
                )
                raise DynaclrError(
                    f"non-finite loss at epoch {epoch} step {step}; "
                    f"first triplets {batch.indices[:3]}; param norm {param_norm:.3e}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            batch_losses.append(float(loss.detach()) / n)
        loss_log.append({
            "epoch": epoch,
            "mean_loss": float(np.mean(batch_losses)),
            "batches": len(chunks),
        })
        if log is not None:
            log(loss_log[-1])
        done = epoch + 1
        if (out_dir is not None and train_cfg.checkpoint_every > 0
                and done % train_cfg.checkpoint_every == 0 and done < train_cfg.epochs):
            snapshot(done).save(Path(out_dir) / f"checkpoint_epoch{done:04d}.bin")

    return snapshot(train_cfg.epochs)


# -- embedding -----------------------------------------------------------------


class EmbeddingTable:
    """Row-per-node embeddings: features h and projections z, key-sorted."""

    INDEX_FILE = "index.csv"
    FEATURES_FILE = "features.bin"
    PROJECTIONS_FILE = "projections.bin"
    TABLE_FILE = "table.json"

    def __init__(
        self,
        keys: list[NodeKey],
        features: np.ndarray,
        projections: np.ndarray,
        model_checksum: str = "",
        config: dict | None = None,
        extra: dict | None = None,
    ):
        if len(keys) != features.shape[0] or len(keys) != projections.shape[0]:
            raise ValidationError("keys and embedding rows are misaligned")
        order = np.argsort(
            np.array([f"{k[0]}\0{k[1]:012d}\0{k[2]:012d}" for k in keys])
        ) if keys else np.array([], dtype=int)
        self.keys: list[NodeKey] = [keys[i] for i in order]
        self.features = np.ascontiguousarray(features[order], dtype=np.float32)
        self.projections = np.ascontiguousarray(projections[order], dtype=np.float32)
        if self.features.size and not np.all(np.isfinite(self.features)):
            raise ValidationError("non-finite feature values")
        if self.projections.size and not np.all(np.isfinite(self.projections)):
            raise ValidationError("non-finite projection values")
        self.model_checksum = model_checksum
        self.config = dict(config) if config else {}
        self.extra = dict(extra) if extra else {}
        self._row: dict[NodeKey, int] = {k: i for i, k in enumerate(self.keys)}

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, key: NodeKey) -> bool:
        return key in self._row

    def row(self, key: NodeKey) -> int:
        if key not in self._row:
            raise KeyError(key)
        return self._row[key]

    def feature(self, key: NodeKey) -> np.ndarray:
        return self.features[self.row(key)]

    def projection(self, key: NodeKey) -> np.ndarray:
        return self.projections[self.row(key)]

    def track_rows(self, fov_id: str, track_id: int) -> list[tuple[int, int]]:
        """Time-sorted (t, row) pairs for one track."""
        out = [(k[2], i) for k, i in self._row.items()
               if k[0] == fov_id and k[1] == track_id]
        return sorted(out)

    def save(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / self.INDEX_FILE, "w", encoding="utf-8") as f:
            f.write("fov_id,track_id,t,row\n")
            for i, (fov, track, t) in enumerate(self.keys):
                f.write(f"{fov},{track},{t},{i}\n")
        feat = np.ascontiguousarray(self.features, dtype="<f4")
        proj = np.ascontiguousarray(self.projections, dtype="<f4")
        feat.tofile(out_dir / self.FEATURES_FILE)
        proj.tofile(out_dir / self.PROJECTIONS_FILE)
        info = {
            "rows": len(self.keys),
            "feature_dim": int(self.features.shape[1]) if self.features.size else 0,
            "projection_dim": int(self.projections.shape[1]) if self.projections.size else 0,
            "model_checksum": self.model_checksum,
            "config": self.config,
            "extra": self.extra,
            "features_sha256": sha256_bytes(feat.tobytes()),
            "projections_sha256": sha256_bytes(proj.tobytes()),
        }
        with open(out_dir / self.TABLE_FILE, "w", encoding="utf-8") as f:
            json.dump(info, f, indent=2, sort_keys=True)
            f.write("\n")
        return out_dir

    @classmethod
    def load(cls, in_dir: str | Path) -> "EmbeddingTable":
        in_dir = Path(in_dir)
        with open(in_dir / cls.TABLE_FILE, encoding="utf-8") as f:
            info = json.load(f)
        keys: list[NodeKey] = []
        with open(in_dir / cls.INDEX_FILE, encoding="utf-8") as f:
            header = f.readline().strip()
            if header != "fov_id,track_id,t,row":
                raise IntegrityError(f"{in_dir}: unexpected index header {header!r}")
            for line in f:
                fov, track, t, _row = line.rstrip("\n").split(",")
                keys.append((fov, int(track), int(t)))
        n = int(info["rows"])
        fd, pd = int(info["feature_dim"]), int(info["projection_dim"])
        features = np.fromfile(in_dir / cls.FEATURES_FILE, dtype="<f4").reshape(n, fd)
        projections = np.fromfile(in_dir / cls.PROJECTIONS_FILE, dtype="<f4").reshape(n, pd)
        if sha256_bytes(features.tobytes()) != info["features_sha256"]:
            raise IntegrityError(f"{in_dir}: features checksum mismatch")
        if sha256_bytes(projections.tobytes()) != info["projections_sha256"]:
            raise IntegrityError(f"{in_dir}: projections checksum mismatch")
        return cls(
            keys,
            features,
            projections,
            model_checksum=str(info.get("model_checksum", "")),
            config=info.get("config"),
            extra=info.get("extra"),
        )


def embed_dataset(
    checkpoint: Checkpoint,
    handle: DatasetHandle,
    table: TrackTable,
    fovs: list[str] | None = None,
    batch_size: int = 128,
) -> EmbeddingTable:
    """Embed every valid node's un-augmented center patch.

    Patch validity uses the training-time source crop, so embedding
    coverage matches what the sampler could have seen; rows for invalid
    patches are omitted.
    """
    channels = checkpoint.channels or handle.meta.channels
    model_cfg = checkpoint.model_config
    if model_cfg.in_channels != len(channels):
        raise ConfigurationError(
            f"checkpoint expects {model_cfg.in_channels} channels, got {channels}"
        )
    if checkpoint.patch_spec:
        spec = PatchSpec.from_dict(checkpoint.patch_spec)
    else:
        spec = PatchSpec.for_final(model_cfg.input_size, tuple(channels))
    pipeline = PatchPipeline(handle, spec, aug=None)
    use_table = filter_fovs(table, fovs) if fovs else table

    model = checkpoint.build_model()
    model.eval()

    nodes = sorted(use_table.nodes, key=lambda n: n.key)
    keys: list[NodeKey] = []
    feats: list[np.ndarray] = []
    projs: list[np.ndarray] = []
    pending: list[tuple[NodeKey, np.ndarray]] = []

    def flush() -> None:
        if not pending:
            return
        x = torch.from_numpy(np.stack([d for _, d in pending]))
        with torch.no_grad():
            h, z = model(x)
        feats.append(h.numpy().astype(np.float32))
        projs.append(z.numpy().astype(np.float32))
        keys.extend(k for k, _ in pending)
        pending.clear()

    for node in nodes:
        patch = pipeline.center(node)
        if not patch.valid:
            continue
        pending.append((node.key, patch.data))
        if len(pending) >= batch_size:
            flush()
    flush()

    features = np.concatenate(feats) if feats else np.zeros((0, model_cfg.feature_dim), np.float32)
    projections = np.concatenate(projs) if projs else np.zeros((0, model_cfg.projection_dim), np.float32)
    return EmbeddingTable(
        keys,
        features,
        projections,
        model_checksum=checkpoint.param_checksum(),
        config={
            "model_config": model_cfg.to_dict(),
            "channels": list(channels),
            "patch_spec": spec.to_dict(),
            "epoch": checkpoint.epoch,
        },
    )
