"""Reproducibility plumbing: code checksums and per-run manifests.

Every CLI run writes exactly one run_manifest.json next to its outputs,
recording the argv, the resolved configuration, seeds and checksums, so
the run can be re-executed and its primary artifacts compared.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

MANIFEST_FILE = "run_manifest.json"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def code_checksum() -> str:
    """Checksum over the installed package sources (sorted paths)."""
    pkg_dir = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for p in sorted(pkg_dir.rglob("*.py")):
        h.update(p.relative_to(pkg_dir).as_posix().encode())
        h.update(b"\0")
        h.update(p.read_bytes())
        h.update(b"\0")
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    seed: int | None = None
    code_checksum: str = ""
    model_checksum: str | None = None
    started_utc: str = ""
    wall_clock_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "argv": list(self.argv),
            "config": self.config,
            "inputs": dict(self.inputs),
            "outputs": dict(self.outputs),
            "seed": self.seed,
            "code_checksum": self.code_checksum,
            "model_checksum": self.model_checksum,
            "started_utc": self.started_utc,
            "wall_clock_s": self.wall_clock_s,
        }


def write_manifest(out_dir: str | Path, manifest: RunManifest) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / MANIFEST_FILE
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_FILE
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def utc_now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
