"""Checkpoints: binary little-endian PLY plus a JSON sidecar.

One vertex element per primitive, all properties float32, in the scene row
order: x, y, z, rot_w, rot_x, rot_y, rot_z, log_scale_u, log_scale_v,
raw_opacity, then the head parameters as h_000, h_001, ... The sidecar
(same path with .meta.json extension) records the format version, head
spec, iteration and the config echo, so a checkpoint is self-describing.

Round trip is exact: float32 survives the float64 scene representation
unchanged, so save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import (
    CorruptHeaderError,
    MalformedInputError,
    MissingFileError,
    PropertyCountMismatchError,
    VersionMismatchError,
)
from .primitives import HEAD_OFFSET, HeadSpec, Scene

FORMAT_VERSION = 1

GEOM_PROPS = (
    "x",
    "y",
    "z",
    "rot_w",
    "rot_x",
    "rot_y",
    "rot_z",
    "log_scale_u",
    "log_scale_v",
    "raw_opacity",
)


def property_names(spec: HeadSpec) -> list[str]:
    return list(GEOM_PROPS) + [f"h_{i:03d}" for i in range(spec.param_count)]


def _sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_suffix(".meta.json") if p.suffix == ".ply" else Path(str(p) + ".meta.json")


def write_ply(path, names: list[str], data: np.ndarray) -> None:
    """Binary little-endian PLY with one float property per name."""
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 2 or data.shape[1] != len(names):
        raise PropertyCountMismatchError(
            f"data {data.shape} does not provide {len(names)} properties"
        )
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {data.shape[0]}"]
    header += [f"property float {n}" for n in names]
    header.append("end_header")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())
    os.replace(tmp, path)


def read_ply(path) -> tuple[list[str], np.ndarray]:
    """Parse a binary little-endian PLY with float vertex properties.
    Returns (property names, (N, K) float32 data)."""
    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"no such file: {p}")
    raw = p.read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise CorruptHeaderError(f"{p} is not a binary PLY file")
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    if len(lines) < 2 or lines[1].strip() != "format binary_little_endian 1.0":
        raise CorruptHeaderError(f"{p}: only binary little-endian PLY is supported")
    count = None
    names = []
    for line in lines[2:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "element":
            if parts[1] != "vertex" or count is not None:
                raise CorruptHeaderError(f"{p}: expected a single vertex element")
            count = int(parts[2])
        elif parts[0] == "property":
            if parts[1] != "float":
                raise CorruptHeaderError(f"{p}: only float properties are supported")
            names.append(parts[2])
        else:
            raise CorruptHeaderError(f"{p}: unexpected header line {line!r}")
    if count is None or not names:
        raise CorruptHeaderError(f"{p}: header declares no vertex data")
    body = raw[end + len(b"end_header\n") :]
    expect = count * len(names) * 4
    if len(body) != expect:
        raise CorruptHeaderError(
            f"{p}: body has {len(body)} bytes, header promises {expect}"
        )
    data = np.frombuffer(body, dtype="<f4").reshape(count, len(names))
    return names, data


def save_checkpoint(scene: Scene, path, *, iteration: int = 0, config: dict | None = None) -> None:
    names = property_names(scene.head_spec)
    write_ply(path, names, scene.params.astype("<f4"))
    meta = {
        "format_version": FORMAT_VERSION,
        "head": scene.head_spec.to_dict(),
        "iteration": int(iteration),
        "n_primitives": scene.n,
        "floats_per_primitive": len(names),
        "config": config or {},
    }
    sidecar = _sidecar_path(path)
    tmp = str(sidecar) + ".tmp"
    with open(tmp, "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, sidecar)


def load_checkpoint(path) -> tuple[Scene, dict]:
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise MissingFileError(f"checkpoint sidecar missing: {sidecar}")
    try:
        meta = json.loads(sidecar.read_text())
    except json.JSONDecodeError as e:
        raise MalformedInputError(f"{sidecar}: {e}") from e
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"checkpoint format {version!r} unsupported (expected {FORMAT_VERSION})"
        )
    spec = HeadSpec.from_dict(meta.get("head", {}))
    names, data = read_ply(path)
    expected = property_names(spec)
    if names != expected:
        raise PropertyCountMismatchError(
            f"{path}: properties do not match the declared head "
            f"({len(names)} found, {len(expected)} expected)"
        )
    scene = Scene(data.astype(np.float64), spec)
    return scene, meta


def load_points_ply(path) -> np.ndarray:
    """Read an xyz point cloud (initial centers) from a float PLY."""
    names, data = read_ply(path)
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise PropertyCountMismatchError(f"{path}: missing {axis} property")
    cols = [names.index(a) for a in ("x", "y", "z")]
    return data[:, cols].astype(np.float64)


def save_points_ply(path, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float64)
    write_ply(path, ["x", "y", "z"], points.astype("<f4"))
