"""Command-line entry points: synth, train, embed, analyze, probe, attribute, serve.

Every command that produces artifacts writes exactly one run_manifest.json
next to them, recording the argv, resolved config, inputs, outputs, seed,
and a checksum of the package source. Re-running the argv from a manifest
reproduces the artifacts.

Exit codes: 0 on success, 1 on bad input (unknown flags, malformed
configs, validation failures), 2 on runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import traceback
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import torch

from . import __version__
from .analytics import (
    FEATURE_NAMES,
    SMOOTHNESS_SPACES,
    correlate_features_with_pcs,
    displacement_at_lag,
    embedding_rank,
    feature_matrix,
    infection_fraction_timeseries,
    median_smooth,
    pca_project,
)
from .attribution import (
    ProbeScore,
    clip_for_display,
    default_occlusion_geometry,
    integrated_gradients_map,
    occlusion_map,
    save_attribution,
)
from .errors import (
    CapabilityError,
    ConfigurationError,
    DegenerateStatisticsError,
    DynaclrError,
    IntegrityError,
    LeakageError,
    MetaError,
    RangeError,
    SamplingError,
    ValidationError,
)
from .model import (
    Checkpoint,
    EmbeddingTable,
    ModelConfig,
    TrainConfig,
    embed_dataset,
    train_model,
)
from .patches import AugmentationConfig, PatchPipeline, PatchSpec
from .probe import (
    ProbeModel,
    evaluate_probe,
    predict_states,
    split_annotations,
    train_probe,
)
from .repro import RunManifest, code_checksum, sha256_bytes, utc_now, write_manifest
from .sampling import STRATEGIES, SamplerConfig
from .store import open_dataset
from .synth import SynthConfig, generate_dataset

# Inputs that are the operator's fault map to exit code 1; anything else
# that escapes a command is a runtime failure (exit code 2).
_INPUT_ERRORS = (
    MetaError,
    IntegrityError,
    ValidationError,
    RangeError,
    DegenerateStatisticsError,
    ConfigurationError,
    SamplingError,
    LeakageError,
    CapabilityError,
    FileNotFoundError,
    NotADirectoryError,
    IsADirectoryError,
)

_STRATEGY_ALIASES = {
    "classical": "classical",
    "cell": "cell_aware",
    "cell-aware": "cell_aware",
    "cell_aware": "cell_aware",
    "cell-time": "cell_time_aware",
    "cell-time-aware": "cell_time_aware",
    "cell_time_aware": "cell_time_aware",
}

_LABEL_SOURCES = ("ground_truth", "human")


# -- small parsing helpers -----------------------------------------------------


def _parse_strategy(value: str) -> str:
    if value not in _STRATEGY_ALIASES:
        raise ValidationError(
            f"unknown strategy {value!r}; choose from {sorted(set(STRATEGIES))}"
            " (aliases: cell-time, cell-aware)"
        )
    return _STRATEGY_ALIASES[value]


def _parse_fovs(value: str | None) -> list[str] | None:
    if value is None:
        return None
    fovs = [f.strip() for f in value.split(",") if f.strip()]
    if not fovs:
        raise ValidationError("--fovs given but empty")
    return fovs


def _parse_triple(value: str, flag: str) -> tuple[int, int, int]:
    parts = value.split(",")
    if len(parts) != 3:
        raise ValidationError(f"{flag} expects three comma-separated ints, got {value!r}")
    try:
        z, y, x = (int(p) for p in parts)
    except ValueError as e:
        raise ValidationError(f"{flag}: {e}") from e
    return (z, y, x)


def _parse_key(value: str) -> tuple[str, int, int]:
    parts = value.split(",")
    if len(parts) != 3:
        raise ValidationError(f"--key expects FOV,TRACK,T, got {value!r}")
    try:
        return (parts[0], int(parts[1]), int(parts[2]))
    except ValueError as e:
        raise ValidationError(f"--key: {e}") from e


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            cfg = json.load(f)
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return cfg


def _write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _emit_manifest(
    args: argparse.Namespace,
    command: str,
    config: dict,
    inputs: dict,
    outputs: dict,
    seed: int,
    out_dir: Path,
    model_checksum: str = "",
) -> None:
    manifest = RunManifest(
        command=command,
        argv=list(args.argv),
        config=config,
        inputs={k: str(v) for k, v in inputs.items()},
        outputs={k: str(v) for k, v in outputs.items()},
        seed=seed,
        code_checksum=code_checksum(),
        model_checksum=model_checksum,
        started_utc=args.started_utc,
        wall_clock_s=round(time.monotonic() - args.t0, 3),
    )
    write_manifest(out_dir, manifest)


def _annotation_records(handle, source: str, label_type: str):
    records = [
        r
        for r in handle.read_annotations()
        if r.source == source and r.label_type == label_type
    ]
    if not records:
        raise ValidationError(
            f"no annotations with source={source!r} label_type={label_type!r}"
        )
    return records


def _resolve_data_dir(args, emb: EmbeddingTable) -> Path:
    if getattr(args, "data", None):
        return Path(args.data)
    stored = emb.extra.get("data_dir", "")
    if stored:
        return Path(stored)
    raise ValidationError(
        "no dataset given: pass --data or use an embedding table written by"
        " `dynaclr embed` (which records its dataset path)"
    )


# -- plotting ------------------------------------------------------------------


def _plot_smoothness(curve, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    taus = np.asarray(curve.taus)
    mean = np.asarray(curve.mean)
    err = np.asarray(curve.std) / np.sqrt(np.maximum(np.asarray(curve.count), 1))
    ax.errorbar(taus, mean, yerr=err, marker="o", capsize=3)
    ax.set_xlabel("time lag (frames)")
    ax.set_ylabel("normalized displacement")
    ax.set_title(f"embedding smoothness ({curve.space})")
    ax.set_ylim(bottom=0.0)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _plot_pca(scores: np.ndarray, color: np.ndarray, ratios, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4.5))
    sc = ax.scatter(scores[:, 0], scores[:, 1], c=color, s=6, cmap="viridis")
    fig.colorbar(sc, ax=ax, label="frame")
    ax.set_xlabel(f"PC1 ({ratios[0]:.1%})")
    ax.set_ylabel(f"PC2 ({ratios[1]:.1%})")
    ax.set_title("feature PCA")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _plot_attribution(patch_data: np.ndarray, amap, channels, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    clipped = clip_for_display(amap)
    n = len(channels)
    fig, axes = plt.subplots(2, n, figsize=(3 * n, 6), squeeze=False)
    zc = patch_data.shape[1] // 2
    for c, name in enumerate(channels):
        axes[0][c].imshow(patch_data[c, zc], cmap="gray")
        axes[0][c].set_title(f"input {name}")
        vmax = float(np.abs(clipped.values[c, zc]).max()) or 1.0
        axes[1][c].imshow(clipped.values[c, zc], cmap="coolwarm", vmin=-vmax, vmax=vmax)
        axes[1][c].set_title(f"{amap.method} {name}")
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# -- commands ------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    cfg_dict = _load_config(args.config)
    cfg = SynthConfig.from_dict(cfg_dict) if cfg_dict else SynthConfig()
    overrides = {
        "n_fovs": args.fovs,
        "cells_per_fov": args.cells,
        "n_timepoints": args.frames,
        "seed": args.seed,
    }
    applied = {k: v for k, v in overrides.items() if v is not None}
    if applied:
        cfg = SynthConfig.from_dict({**cfg.to_dict(), **applied})
    out = Path(args.out)
    meta = generate_dataset(cfg, out, overwrite=args.overwrite)
    _emit_manifest(
        args,
        "synth",
        cfg.to_dict(),
        inputs={},
        outputs={"dataset": out},
        seed=cfg.seed,
        out_dir=out,
    )
    print(
        f"wrote dataset {out}: {len(meta.fov_ids)} FOVs x {meta.n_timepoints} frames,"
        f" channels {list(meta.channels)}"
    )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg_file = _load_config(args.config)
    handle = open_dataset(args.data)
    table = handle.load_tracks()
    channels = (
        tuple(c.strip() for c in args.channels.split(","))
        if args.channels
        else handle.meta.channels
    )

    if "model" in cfg_file:
        model_cfg = ModelConfig.from_dict(cfg_file["model"])
    else:
        model_cfg = ModelConfig.for_scale(args.scale, in_channels=len(channels))

    if "train" in cfg_file:
        train_cfg = TrainConfig.from_dict(cfg_file["train"])
    else:
        train_cfg = (
            TrainConfig.desk_default() if args.scale == "desk" else TrainConfig()
        )
    t_overrides = {
        "epochs": args.epochs,
        "seed": args.seed,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "margin": args.margin,
        "checkpoint_every": args.checkpoint_every,
    }
    applied = {k: v for k, v in t_overrides.items() if v is not None}
    if applied:
        train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), **applied})

    if "sampler" in cfg_file:
        sampler_cfg = SamplerConfig.from_dict(cfg_file["sampler"])
    else:
        sampler_cfg = SamplerConfig(
            strategy=_parse_strategy(args.strategy),
            tau_frames=args.tau,
            batch_size=train_cfg.batch_size,
            seed=train_cfg.seed,
        )
    aug = (
        AugmentationConfig.from_dict(cfg_file["augmentation"])
        if "augmentation" in cfg_file
        else None
    )
    fovs = _parse_fovs(args.fov_subset)
    resume = Checkpoint.load(args.resume) if args.resume else None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = train_model(
        handle,
        table,
        sampler_cfg,
        model_cfg,
        train_cfg,
        channels=channels,
        fovs=fovs,
        aug=aug,
        resume=resume,
        out_dir=out,
        log=lambda entry: print(
            f"epoch {entry['epoch']}: mean loss {entry['mean_loss']:.6f}"
            f" over {entry['batches']} batches"
        ),
    )
    ckpt_path = ckpt.save(out / "checkpoint.bin")
    _write_json(out / "loss_log.json", {"loss_log": ckpt.loss_log})
    _emit_manifest(
        args,
        "train",
        {
            "model": model_cfg.to_dict(),
            "train": train_cfg.to_dict(),
            "sampler": sampler_cfg.to_dict(),
            "augmentation": (aug or AugmentationConfig()).to_dict(),
            "channels": list(channels),
            "fovs": fovs,
        },
        inputs={"data": args.data, **({"resume": args.resume} if args.resume else {})},
        outputs={"checkpoint": ckpt_path, "loss_log": out / "loss_log.json"},
        seed=train_cfg.seed,
        out_dir=out,
        model_checksum=ckpt.param_checksum(),
    )
    print(f"wrote checkpoint {ckpt_path} (epoch {ckpt.epoch})")
    return 0


def cmd_embed(args: argparse.Namespace) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    handle = open_dataset(args.data)
    table = handle.load_tracks()
    fovs = _parse_fovs(args.fov_subset)
    emb = embed_dataset(ckpt, handle, table, fovs=fovs, batch_size=args.batch_size)
    emb.extra["data_dir"] = str(Path(args.data).resolve())
    out = Path(args.out)
    emb.save(out)
    _emit_manifest(
        args,
        "embed",
        {"fovs": fovs, "batch_size": args.batch_size},
        inputs={"data": args.data, "ckpt": args.ckpt},
        outputs={"embeddings": out},
        seed=0,
        out_dir=out,
        model_checksum=emb.model_checksum,
    )
    print(f"wrote {len(emb)} embeddings to {out}")
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs: dict = {}
    outputs: dict = {}
    config: dict = {"what": args.what}

    if args.what == "fractions":
        handle = open_dataset(args.data)
        inputs["data"] = args.data
        config.update(
            {"label_type": args.label_type, "smooth_window": args.smooth_window}
        )
        if args.predictions:
            inputs["predictions"] = args.predictions
            with open(args.predictions, encoding="utf-8") as f:
                rows = json.load(f)
            records = [
                SimpleNamespace(
                    fov_id=str(r["fov_id"]), t=int(r["t"]), value=int(r["value"])
                )
                for r in rows
                if r.get("label_type", "infection") == args.label_type
            ]
            config["source"] = "predictions"
        else:
            records = _annotation_records(handle, args.source, args.label_type)
            config["source"] = args.source
        series = infection_fraction_timeseries(records, handle.meta)
        smoothed = {
            cond: median_smooth(
                [p["fraction"] for p in pts], window=args.smooth_window
            ).tolist()
            for cond, pts in series.items()
        }
        path = _write_json(
            out / "fractions.json",
            {
                "label_type": args.label_type,
                "source": config["source"],
                "smooth_window": args.smooth_window,
                "series": series,
                "smoothed_fraction": smoothed,
            },
        )
        outputs["fractions"] = path
        _emit_manifest(args, "analyze", config, inputs, outputs, 0, out)
        print(f"wrote {path}")
        return 0

    emb = EmbeddingTable.load(args.emb)
    inputs["emb"] = args.emb

    if args.what == "smoothness":
        config.update({"tau_max": args.tau_max, "space": args.space})
        curve = displacement_at_lag(emb, args.tau_max, space=args.space)
        outputs["smoothness"] = _write_json(out / "smoothness.json", curve.to_dict())
        _plot_smoothness(curve, out / "smoothness.png")
        outputs["plot"] = out / "smoothness.png"
    elif args.what == "pca":
        config.update({"k": args.k})
        res = pca_project(emb, k=args.k)
        payload = {
            "k": args.k,
            "explained_variance_ratio": [float(v) for v in res.explained_variance_ratio],
            "mean": [float(v) for v in res.mean],
            "components": [[float(v) for v in row] for row in res.components],
        }
        outputs["pca"] = _write_json(out / "pca.json", payload)
        csv_path = out / "projection.csv"
        with open(csv_path, "w", encoding="utf-8") as f:
            cols = ",".join(f"pc{j + 1}" for j in range(args.k))
            f.write(f"fov_id,track_id,t,{cols}\n")
            for i, (fov, track, t) in enumerate(emb.keys):
                vals = ",".join(f"{res.scores[i, j]:.6g}" for j in range(args.k))
                f.write(f"{fov},{track},{t},{vals}\n")
        outputs["projection"] = csv_path
        if args.k >= 2:
            frames = np.array([k[2] for k in emb.keys], dtype=float)
            _plot_pca(res.scores, frames, res.explained_variance_ratio, out / "pca.png")
            outputs["plot"] = out / "pca.png"
    elif args.what == "rank":
        config.update({"rel_tol": args.rel_tol})
        rank = embedding_rank(emb, rel_tol=args.rel_tol)
        outputs["rank"] = _write_json(
            out / "rank.json",
            {
                "rank": rank,
                "rel_tol": args.rel_tol,
                "rows": len(emb),
                "feature_dim": int(emb.features.shape[1]),
            },
        )
    elif args.what == "features":
        handle = open_dataset(_resolve_data_dir(args, emb))
        inputs["data"] = str(_resolve_data_dir(args, emb))
        config.update({"n_pcs": args.n_pcs})
        table = handle.load_tracks()
        if emb.config.get("patch_spec"):
            spec = PatchSpec.from_dict(emb.config["patch_spec"])
        else:
            spec = PatchSpec.for_final(
                (5, 32, 32), tuple(emb.config.get("channels", handle.meta.channels))
            )
        pipeline = PatchPipeline(handle, spec, aug=None)
        feats = feature_matrix(pipeline, table, emb.keys)
        k = min(args.n_pcs, len(emb), emb.features.shape[1])
        scores = pca_project(emb, k=k).scores
        corr = correlate_features_with_pcs(feats, scores)
        csv_path = out / "features.csv"
        with open(csv_path, "w", encoding="utf-8") as f:
            f.write("fov_id,track_id,t," + ",".join(FEATURE_NAMES) + "\n")
            for i, (fov, track, t) in enumerate(emb.keys):
                vals = ",".join(f"{feats[i, j]:.6g}" for j in range(len(FEATURE_NAMES)))
                f.write(f"{fov},{track},{t},{vals}\n")
        outputs["features"] = csv_path
        outputs["correlations"] = _write_json(
            out / "correlations.json",
            {
                "feature_names": list(FEATURE_NAMES),
                "n_pcs": k,
                "spearman": [
                    [None if np.isnan(v) else float(v) for v in row] for row in corr
                ],
            },
        )
    else:
        raise ValidationError(f"unknown analysis {args.what!r}")

    _emit_manifest(args, "analyze", config, inputs, outputs, 0, out)
    print(f"wrote {args.what} analysis to {out}")
    return 0


def cmd_probe(args: argparse.Namespace) -> int:
    if not 0.0 < args.split < 1.0:
        raise ValidationError("--split must be in (0, 1)")
    emb = EmbeddingTable.load(args.emb)
    data_dir = _resolve_data_dir(args, emb)
    handle = open_dataset(data_dir)
    records = _annotation_records(handle, args.labels, args.label_type)
    embedded = [r for r in records if r.node_key in emb]
    dropped = len(records) - len(embedded)
    if dropped:
        print(f"dropping {dropped} annotations on nodes without embeddings")
    train_keys, eval_keys = split_annotations(
        embedded, fraction=args.split, seed=args.seed
    )
    label_of = {r.node_key: r.value for r in embedded}
    h_train = np.stack([emb.feature(k) for k in train_keys])
    y_train = np.array([label_of[k] for k in train_keys])
    h_eval = np.stack([emb.feature(k) for k in eval_keys])
    y_eval = np.array([label_of[k] for k in eval_keys])

    model = train_probe(
        h_train, y_train, label_type=args.label_type, l2=args.l2, keys=train_keys
    )
    metrics = evaluate_probe(model, h_eval, y_eval, keys=eval_keys)
    predictions = predict_states(model, emb)

    out = Path(args.out)
    if out.suffix == ".json":
        out_dir, metrics_path = out.parent, out
    else:
        out_dir, metrics_path = out, out / "metrics.json"
    out_dir.mkdir(parents=True, exist_ok=True)
    split_blob = json.dumps(
        {"train": [list(k) for k in train_keys], "eval": [list(k) for k in eval_keys]},
        sort_keys=True,
    ).encode()
    _write_json(
        metrics_path,
        {
            **metrics,
            "label_type": args.label_type,
            "source": args.labels,
            "split": args.split,
            "seed": args.seed,
            "l2": args.l2,
            "n_train": len(train_keys),
            "n_eval": len(eval_keys),
            "solver_status": model.status,
            "split_checksum": sha256_bytes(split_blob),
        },
    )
    model_path = model.save(out_dir / "probe_model.json")
    pred_path = out_dir / "predictions.json"
    with open(pred_path, "w", encoding="utf-8") as f:
        json.dump([p.to_dict() for p in predictions], f, indent=2, sort_keys=True)
        f.write("\n")
    _emit_manifest(
        args,
        "probe",
        {
            "label_type": args.label_type,
            "labels": args.labels,
            "split": args.split,
            "l2": args.l2,
        },
        inputs={"emb": args.emb, "data": data_dir},
        outputs={
            "metrics": metrics_path,
            "model": model_path,
            "predictions": pred_path,
        },
        seed=args.seed,
        out_dir=out_dir,
        model_checksum=emb.model_checksum,
    )
    print(
        f"probe {args.label_type}: accuracy {metrics['accuracy']:.4f},"
        f" F1 {metrics['f1']:.4f} ({len(train_keys)} train / {len(eval_keys)} eval)"
    )
    return 0


def cmd_attribute(args: argparse.Namespace) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    probe = ProbeModel.load(args.probe)
    handle = open_dataset(args.data)
    table = handle.load_tracks()
    key = _parse_key(args.key)
    if key not in table:
        raise ValidationError(f"unknown node {key}")
    if ckpt.patch_spec:
        spec = PatchSpec.from_dict(ckpt.patch_spec)
    else:
        spec = PatchSpec.for_final(
            ckpt.model_config.input_size, tuple(ckpt.channels or handle.meta.channels)
        )
    pipeline = PatchPipeline(handle, spec, aug=None)
    patch = pipeline.center(table.node(key))
    if not patch.valid:
        raise ValidationError(f"node {key} has no in-bounds patch")

    truth = {
        (r.fov_id, r.track_id, r.t): r.value
        for r in handle.read_annotations()
        if r.label_type == probe.label_type and r.source == "ground_truth"
    }
    score = ProbeScore(ckpt.build_model(), probe)

    if args.method == "occlusion":
        shape = patch.data.shape[1:]
        window = (
            _parse_triple(args.window, "--window")
            if args.window
            else default_occlusion_geometry(shape)[0]
        )
        stride = (
            _parse_triple(args.stride, "--stride")
            if args.stride
            else default_occlusion_geometry(shape)[1]
        )
        amap = occlusion_map(
            score,
            patch,
            window=window,
            stride=stride,
            baseline=args.baseline,
            head=probe.label_type,
            per_channel=args.per_channel,
            true_class=truth.get(key),
        )
        config = {"method": "occlusion", "window": window, "stride": stride,
                  "per_channel": args.per_channel, "baseline": args.baseline}
    else:
        amap = integrated_gradients_map(
            score,
            patch,
            baseline=args.baseline,
            steps=args.steps,
            multiply_inputs=args.multiply_inputs,
            head=probe.label_type,
            true_class=truth.get(key),
        )
        config = {"method": "ig", "steps": args.steps,
                  "multiply_inputs": args.multiply_inputs, "baseline": args.baseline}

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = out / f"{args.method}_{key[0]}_{key[1]}_{key[2]}"
    bin_path, json_path = save_attribution(amap, base)
    png_path = base.with_suffix(".png")
    _plot_attribution(patch.data, amap, spec.channels, png_path)
    config["key"] = list(key)
    _emit_manifest(
        args,
        "attribute",
        config,
        inputs={"data": args.data, "ckpt": args.ckpt, "probe": args.probe},
        outputs={"map": bin_path, "sidecar": json_path, "panel": png_path},
        seed=0,
        out_dir=out,
        model_checksum=ckpt.param_checksum(),
    )
    print(f"wrote {args.method} attribution for {key} to {base}.bin")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(
        args.data,
        args.emb,
        predictions_path=args.predictions,
        coords_path=args.coords,
        ui_dir=args.ui,
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynaclr",
        description="Time-aware contrastive embeddings for tracked cell imagery.",
    )
    parser.add_argument("--version", action="version", version=f"dynaclr {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic tracked dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON file of generator settings")
    p.add_argument("--fovs", type=int, default=None, help="number of FOVs (even)")
    p.add_argument("--cells", type=int, default=None, help="cells per FOV")
    p.add_argument("--frames", type=int, default=None, help="frames per FOV")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the encoder with triplet sampling")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("--strategy", default="cell-time",
                   help="classical | cell-aware | cell-time")
    p.add_argument("--tau", type=int, default=1, help="positive time offset in frames")
    p.add_argument("--scale", default="desk", choices=("desk", "tiny"))
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--channels", default=None, help="comma-separated channel names")
    p.add_argument("--fovs", dest="fov_subset", default=None,
                   help="comma-separated FOV ids to train on")
    p.add_argument("--resume", default=None, help="checkpoint file to continue from")
    p.add_argument("--config", default=None,
                   help="JSON with optional model/train/sampler/augmentation sections")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed every tracked cell patch")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--out", required=True, help="embedding table directory")
    p.add_argument("--fovs", dest="fov_subset", default=None,
                   help="comma-separated FOV ids to embed")
    p.add_argument("--batch-size", type=int, default=128)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("analyze", help="embedding-space analytics")
    p.add_argument("what", choices=("smoothness", "pca", "rank", "features", "fractions"))
    p.add_argument("--emb", default=None, help="embedding table directory")
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--tau-max", type=int, default=5)
    p.add_argument("--space", default="features", choices=SMOOTHNESS_SPACES)
    p.add_argument("-k", type=int, default=2, help="number of principal components")
    p.add_argument("--rel-tol", type=float, default=1e-6)
    p.add_argument("--n-pcs", type=int, default=5)
    p.add_argument("--label-type", default="infection")
    p.add_argument("--source", default="ground_truth", choices=_LABEL_SOURCES)
    p.add_argument("--predictions", default=None,
                   help="predictions.json from `dynaclr probe`")
    p.add_argument("--smooth-window", type=int, default=3)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("probe", help="fit and evaluate a linear probe")
    p.add_argument("--emb", required=True)
    p.add_argument("--data", default=None,
                   help="dataset directory (defaults to the one recorded at embed time)")
    p.add_argument("--labels", default="ground_truth", choices=_LABEL_SOURCES)
    p.add_argument("--label-type", default="infection")
    p.add_argument("--split", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--l2", type=float, default=1.0)
    p.add_argument("--out", required=True,
                   help="metrics.json path or output directory")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("attribute", help="attribution maps for a probe decision")
    p.add_argument("method", choices=("occlusion", "ig"))
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--probe", required=True, help="probe_model.json")
    p.add_argument("--key", required=True, help="node as FOV,TRACK,T")
    p.add_argument("--out", required=True)
    p.add_argument("--window", default=None, help="occlusion window as Z,Y,X")
    p.add_argument("--stride", default=None, help="occlusion stride as Z,Y,X")
    p.add_argument("--per-channel", action="store_true")
    p.add_argument("--baseline", type=float, default=0.0)
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--multiply-inputs", action="store_true")
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("serve", help="HTTP service for the explorer UI")
    p.add_argument("--data", required=True)
    p.add_argument("--emb", required=True)
    p.add_argument("--predictions", default=None)
    p.add_argument("--coords", default=None, help="external 2D projection CSV")
    p.add_argument("--ui", default=None, help="built explorer directory to serve at /")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    # Single-threaded torch keeps float32 reductions bit-identical across
    # runs, which the manifest replay guarantee depends on.
    torch.set_num_threads(1)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    args.argv = list(argv) if argv is not None else list(sys.argv[1:])
    args.started_utc = utc_now()
    args.t0 = time.monotonic()
    try:
        return int(args.func(args) or 0)
    except _INPUT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DynaclrError as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
