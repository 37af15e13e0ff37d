"""HTTP service exposing a dataset and its embeddings to the explorer UI.

Request handlers only read precomputed artifacts (the embedding table,
its 2D projection, optional predicted labels) or small per-node data
(one patch render, one track's nodes). Nothing long-running happens
inside a handler; training, embedding, and probing are CLI commands
whose outputs this service serves. Annotation writes go through the
dataset handle's serialized atomic upsert, so concurrent posts never
corrupt the store.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel

from .analytics import pca_project
from .errors import ValidationError
from .model import EmbeddingTable
from .patches import PatchPipeline, PatchSpec, channel_kind
from .store import (
    LABEL_TYPES,
    AnnotationRecord,
    NodeKey,
    open_dataset,
)

# Display windows applied to normalized intensities before PNG encoding.
# Fixed windows keep patch renders byte-deterministic across runs.
PHASE_DISPLAY_RANGE = (-3.0, 3.0)
FLUOR_DISPLAY_RANGE = (-0.25, 2.0)

PATCH_VIEWS = ("center_slice", "max_proj")


def _field_error(loc: list, msg: str) -> HTTPException:
    return HTTPException(
        status_code=422,
        detail=[{"loc": loc, "msg": msg, "type": "value_error"}],
    )


class AnnotationIn(BaseModel):
    """One human annotation as posted by the explorer."""

    fov_id: str
    track_id: int
    t: int
    label_type: str
    value: int
    source: str = "human"


def _load_predictions(path: str | Path) -> dict[NodeKey, dict]:
    with open(path, encoding="utf-8") as f:
        rows = json.load(f)
    if not isinstance(rows, list):
        raise ValidationError(f"{path}: expected a JSON list of predicted labels")
    out: dict[NodeKey, dict] = {}
    for row in rows:
        key = (str(row["fov_id"]), int(row["track_id"]), int(row["t"]))
        out[key] = {
            "label_type": row.get("label_type", "infection"),
            "value": int(row["value"]),
            "probability": float(row.get("probability", 0.0)),
        }
    return out


def _load_coords(path: str | Path) -> dict[NodeKey, tuple[float, float]]:
    """Read an external 2D projection: fov_id,track_id,t,x,y per row."""
    coords: dict[NodeKey, tuple[float, float]] = {}
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
        if header != "fov_id,track_id,t,x,y":
            raise ValidationError(f"{path}: expected header fov_id,track_id,t,x,y")
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise ValidationError(f"{path}:{lineno}: expected 5 fields")
            fov, track, t, x, y = parts
            coords[(fov, int(track), int(t))] = (float(x), float(y))
    return coords


def _render_patch_png(
    data: np.ndarray, channel_index: int, kind: str, view: str
) -> bytes:
    plane = data[channel_index]
    if view == "center_slice":
        img = plane[plane.shape[0] // 2]
    else:
        img = plane.max(axis=0)
    lo, hi = PHASE_DISPLAY_RANGE if kind == "phase" else FLUOR_DISPLAY_RANGE
    scaled = np.clip((img - lo) / (hi - lo), 0.0, 1.0)
    buf = io.BytesIO()
    Image.fromarray((scaled * 255.0).round().astype(np.uint8), mode="L").save(
        buf, format="PNG"
    )
    return buf.getvalue()


def create_app(
    data_dir: str | Path,
    emb_dir: str | Path,
    predictions_path: str | Path | None = None,
    coords_path: str | Path | None = None,
    ui_dir: str | Path | None = None,
) -> FastAPI:
    """Build the service over one dataset and one embedding table.

    All derived artifacts are loaded or computed once here, at startup;
    the PCA projection of a desk-scale table takes well under a second.
    When ui_dir is given, its files are served at the root path so the
    browser client and the API share one origin.
    """
    handle = open_dataset(data_dir)
    table = handle.load_tracks()
    emb = EmbeddingTable.load(emb_dir)
    meta = handle.meta

    projections: dict[str, dict[NodeKey, tuple[float, float]]] = {}
    if len(emb) >= 2:
        scores = pca_project(emb.features, k=2).scores
        projections["pca"] = {
            key: (float(scores[i, 0]), float(scores[i, 1]))
            for i, key in enumerate(emb.keys)
        }
    if coords_path is not None:
        projections["external"] = _load_coords(coords_path)

    predictions = _load_predictions(predictions_path) if predictions_path else {}

    if emb.config.get("patch_spec"):
        spec = PatchSpec.from_dict(emb.config["patch_spec"])
    else:
        channels = tuple(emb.config.get("channels", meta.channels))
        spec = PatchSpec.for_final((5, 32, 32), channels)
    pipeline = PatchPipeline(handle, spec, aug=None)

    app = FastAPI(title="dynaclr explorer service")

    @app.get("/api/meta")
    def get_meta() -> dict:
        return {
            **meta.to_dict(),
            "n_nodes": len(table),
            "n_embedded": len(emb),
            "label_types": list(LABEL_TYPES),
            "projection_methods": sorted(projections),
            "patch_views": list(PATCH_VIEWS),
            "has_predictions": bool(predictions),
            "model_checksum": emb.model_checksum,
        }

    @app.get("/api/projection")
    def get_projection(method: str = "pca", dims: int = 2) -> dict:
        if method not in projections:
            raise _field_error(
                ["query", "method"],
                f"unknown method {method!r}; available: {sorted(projections)}",
            )
        if dims != 2:
            raise _field_error(["query", "dims"], "only dims=2 is supported")
        coords = projections[method]
        points = []
        for key in emb.keys:
            if key not in coords:
                continue
            fov, track, t = key
            x, y = coords[key]
            pred = predictions.get(key)
            points.append(
                {
                    "fov_id": fov,
                    "track_id": track,
                    "t": t,
                    "x": x,
                    "y": y,
                    "hpi_minutes": meta.t0_hpi_minutes + t * meta.dt_minutes,
                    "condition": meta.conditions.get(fov, ""),
                    "predicted_label": pred["value"] if pred else None,
                    "probability": pred["probability"] if pred else None,
                }
            )
        return {"method": method, "dims": dims, "points": points}

    @app.get("/api/track/{fov_id}/{track_id}")
    def get_track(fov_id: str, track_id: int) -> dict:
        nodes = table.track(fov_id, track_id)
        if not nodes:
            raise HTTPException(status_code=404, detail="unknown track")
        annotations = [
            r.to_dict()
            for r in handle.read_annotations()
            if r.fov_id == fov_id and r.track_id == track_id
        ]
        preds = []
        for node in nodes:
            pred = predictions.get(node.key)
            if pred is not None:
                preds.append({"t": node.t, **pred})
        return {
            "fov_id": fov_id,
            "track_id": track_id,
            "parent_track_id": table.parent_of(fov_id, track_id),
            "daughters": table.daughters_of(fov_id, track_id),
            "nodes": [
                {
                    "t": n.t,
                    "z": n.centroid[0],
                    "y": n.centroid[1],
                    "x": n.centroid[2],
                }
                for n in nodes
            ],
            "embedded_t": [t for t, _ in emb.track_rows(fov_id, track_id)],
            "annotations": annotations,
            "predictions": preds,
        }

    @app.get("/api/patch/{fov_id}/{track_id}/{t}")
    def get_patch(
        fov_id: str, track_id: int, t: int, channel: str = "", view: str = "center_slice"
    ) -> Response:
        channel = channel or spec.channels[0]
        if channel not in spec.channels:
            raise _field_error(
                ["query", "channel"],
                f"unknown channel {channel!r}; available: {list(spec.channels)}",
            )
        if view not in PATCH_VIEWS:
            raise _field_error(
                ["query", "view"], f"view must be one of {list(PATCH_VIEWS)}"
            )
        key = (fov_id, track_id, t)
        if key not in table:
            raise HTTPException(status_code=404, detail="unknown node")
        patch = pipeline.center(table.node(key))
        if not patch.valid:
            raise HTTPException(status_code=404, detail="patch out of bounds")
        png = _render_patch_png(
            patch.data,
            spec.channels.index(channel),
            channel_kind(channel),
            view,
        )
        return Response(content=png, media_type="image/png")

    @app.get("/api/annotations")
    def get_annotations(
        fov_id: str = "",
        track_id: int | None = None,
        label_type: str = "",
        source: str = "",
    ) -> dict:
        records = handle.read_annotations()
        if fov_id:
            records = [r for r in records if r.fov_id == fov_id]
        if track_id is not None:
            records = [r for r in records if r.track_id == track_id]
        if label_type:
            records = [r for r in records if r.label_type == label_type]
        if source:
            records = [r for r in records if r.source == source]
        return {"annotations": [r.to_dict() for r in records]}

    @app.post("/api/annotations")
    def post_annotations(body: list[AnnotationIn]) -> dict:
        records = []
        for i, item in enumerate(body):
            if item.source != "human":
                raise _field_error(
                    ["body", i, "source"],
                    "posted annotations must have source 'human'",
                )
            rec = AnnotationRecord(
                fov_id=item.fov_id,
                track_id=item.track_id,
                t=item.t,
                label_type=item.label_type,
                value=item.value,
                source=item.source,
            )
            try:
                rec.validate(table)
            except ValidationError as e:
                raise _field_error(["body", i], str(e))
            records.append(rec)
        handle.write_annotations(records, table=table)
        return {"written": len(records)}

    if ui_dir is not None:
        if not Path(ui_dir).is_dir():
            raise ValidationError(f"ui dir {ui_dir} does not exist")
        # Mounted last so the /api routes above keep matching first.
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
