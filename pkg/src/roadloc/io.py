"""Versioned on-disk formats for worlds, frames and run manifests."""

from __future__ import annotations

import hashlib
import json
import os
import platform
from pathlib import Path

import numpy as np

from .geoworld import FrameTable, World, WorldConfig, generate_world

WORLD_FORMAT_VERSION = 1
FRAMES_FORMAT_VERSION = 1
MANIFEST_FORMAT_VERSION = 1

SPLIT_TRAIN, SPLIT_VALIDATION, SPLIT_TEST = 0, 1, 2


class MissingInput(FileNotFoundError):
    pass


def require(path, hint: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"missing input {p}; {hint}")
    return p


def signature_digest(world: World) -> str:
    return hashlib.sha256(np.ascontiguousarray(world.signatures).tobytes()).hexdigest()


def save_world(path, world: World, config_doc: dict) -> None:
    """World description; the signature tables are regenerated on load and checked by digest."""
    doc = {
        "format_version": WORLD_FORMAT_VERSION,
        "seed": int(world.seed),
        "config": config_doc,
        "nodes": world.nodes.tolist(),
        "edges": world.edges.tolist(),
        "signature_sha256": signature_digest(world),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_world(path) -> World:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != WORLD_FORMAT_VERSION:
        raise ValueError(f"unsupported world format version {doc.get('format_version')}")
    cfg = dict(doc["config"])
    if cfg.get("roads") is not None:
        cfg["roads"] = tuple(tuple(tuple(p) for p in line) for line in cfg["roads"])
    world = generate_world(WorldConfig(**cfg), int(doc["seed"]))
    if signature_digest(world) != doc["signature_sha256"]:
        raise ValueError("world file does not match the regenerated world (signature digest differs)")
    return world


def save_frames(path, frames: FrameTable, **extra) -> None:
    np.savez(
        path,
        format_version=np.int64(FRAMES_FORMAT_VERSION),
        frame_id=frames.frame_id, ride_id=frames.ride_id, t=frames.t, x=frames.x, y=frames.y,
        heading=frames.heading, raw=frames.raw, nuisance_seed=frames.nuisance_seed,
        **extra,
    )


def load_frames(path) -> tuple[FrameTable, dict]:
    with np.load(path) as z:
        if int(z["format_version"]) != FRAMES_FORMAT_VERSION:
            raise ValueError(f"unsupported frames format version {int(z['format_version'])}")
        cols = {k: np.array(z[k]) for k in ("frame_id", "ride_id", "t", "x", "y", "heading", "raw", "nuisance_seed")}
        extra = {k: np.array(z[k]) for k in z.files if k not in cols and k != "format_version"}
    frames = FrameTable(**cols)
    if not np.all(np.isfinite(frames.raw)):
        raise ValueError("frames file contains non-finite features")
    return frames, extra


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict:
    import scipy

    from . import __version__
    from ._accel import backend

    out = {"roadloc": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
           "python": platform.python_version(), "backend": backend()}
    try:
        import numba

        out["numba"] = numba.__version__
    except ImportError:
        out["numba"] = None
    return out


def write_manifest(out_dir, command: str, config_sha256: str, seed: int, outputs, extra: dict | None = None) -> Path:
    """``manifest-<command>.json``: config hash, seed, versions and output digests. No timestamps."""
    out_dir = Path(out_dir)
    doc = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "command": command,
        "config_sha256": config_sha256,
        "seed": int(seed),
        "versions": versions(),
        "outputs": {os.path.basename(str(p)): file_sha256(p) for p in sorted(map(str, outputs))},
    }
    if extra:
        doc["extra"] = extra
    path = out_dir / f"manifest-{command.replace(' ', '-')}.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path
