"""Binary map tiles (BEVM), point clouds (LPC1) and JSON scenario manifests.

All binary fields are little-endian. Weight checkpoints (LPW1) live in
``embed`` next to the networks they serialise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .geometry import Pose2, Trajectory
from .raster import BevGrid, GridSpec
from .world import Actor, ActorSet, IntensityMap, RoadArc, Scenario, ScenarioConfig

BEVM_MAGIC = b"BEVM"
BEVM_VERSION = 1
_BEVM_HEADER = struct.Struct("<4sIIIIfdd")
LPC1_MAGIC = b"LPC1"
_LPC1_HEADER = struct.Struct("<4sI")
MANIFEST_FORMAT = "groundloc-scenario"
MANIFEST_VERSION = 1


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _write(path, payload: bytes) -> None:
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


# ----------------------------------------------------------------------------
# BEVM map tiles


def encode_bevm(data: np.ndarray, resolution: float, origin: Tuple[float, float]) -> bytes:
    """Serialise ``data[C, rows, cols]``; ``origin`` is the metric corner of cell ``(0, 0)``."""
    a = np.asarray(data)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ValueError("map tile must be [channels, rows, cols]")
    c, h, w = a.shape
    head = _BEVM_HEADER.pack(BEVM_MAGIC, BEVM_VERSION, h, w, c, resolution, float(origin[0]), float(origin[1]))
    return head + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_bevm(raw: bytes, source: str = "<bytes>"):
    """Inverse of ``encode_bevm``: returns ``(data float32 [C, H, W], resolution, (origin_x, origin_y))``."""
    if len(raw) < _BEVM_HEADER.size:
        raise ValueError(f"{source}: truncated BEVM header")
    magic, version, h, w, c, res, ox, oy = _BEVM_HEADER.unpack_from(raw)
    if magic != BEVM_MAGIC:
        raise ValueError(f"{source}: bad magic {magic!r}, expected {BEVM_MAGIC!r}")
    if version != BEVM_VERSION:
        raise ValueError(f"{source}: unsupported BEVM version {version}")
    n = c * h * w
    if len(raw) != _BEVM_HEADER.size + 4 * n:
        raise ValueError(f"{source}: payload holds {len(raw) - _BEVM_HEADER.size} bytes, expected {4 * n}")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=_BEVM_HEADER.size).reshape(c, h, w)
    # resolution is stored as f32; recover the decimal it was written from
    res = float(np.format_float_positional(np.float32(res), unique=True))
    return data.astype(np.float32), res, (ox, oy)


def write_bevm(path, m: IntensityMap) -> None:
    spec = m.spec
    if spec.center.yaw != 0.0:
        raise ValueError("BEVM tiles must be axis-aligned")
    x0, y0, _, _ = m.bounds()
    _write(path, encode_bevm(m.grid.data, spec.resolution, (x0, y0)))


def read_bevm(path) -> IntensityMap:
    data, res, (ox, oy) = decode_bevm(_read(path), str(path))
    c, h, w = data.shape
    spec = GridSpec.from_cells(h, w, res)
    center = Pose2(ox + spec.extent_x / 2.0, oy + spec.extent_y / 2.0, 0.0)
    return IntensityMap(BevGrid(GridSpec.from_cells(h, w, res, center=center), data))


# ----------------------------------------------------------------------------
# LPC1 point clouds


def encode_lpc1(points: np.ndarray) -> bytes:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise ValueError("point cloud must be an (N, 4) array of x, y, z, intensity")
    return _LPC1_HEADER.pack(LPC1_MAGIC, len(pts)) + np.ascontiguousarray(pts, dtype="<f4").tobytes()


def decode_lpc1(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(raw) < _LPC1_HEADER.size:
        raise ValueError(f"{source}: truncated LPC1 header")
    magic, n = _LPC1_HEADER.unpack_from(raw)
    if magic != LPC1_MAGIC:
        raise ValueError(f"{source}: bad magic {magic!r}, expected {LPC1_MAGIC!r}")
    if len(raw) != _LPC1_HEADER.size + 16 * n:
        raise ValueError(f"{source}: expected {n} points but payload holds {(len(raw) - _LPC1_HEADER.size) / 16:g}")
    return np.frombuffer(raw, dtype="<f4", count=4 * n, offset=_LPC1_HEADER.size).reshape(n, 4).astype(np.float32)


def write_lpc1(path, points: np.ndarray) -> None:
    _write(path, encode_lpc1(points))


def read_lpc1(path) -> np.ndarray:
    return decode_lpc1(_read(path), str(path))


# ----------------------------------------------------------------------------
# scenario manifests


def scenario_to_dict(sc: Scenario, map_file: str = None) -> dict:
    """JSON-ready description of a scenario; the map is referenced by relative file name."""
    road = sc.road
    return {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "seed": sc.seed,
        "map": map_file,
        "config": asdict(sc.config),
        "road": {"start": list(road.start.as_tuple()), "curvature": road.curvature, "length": road.length},
        "sdv_gt": [[p.x, p.y, p.yaw, t] for p, t in sc.sdv_gt.waypoints],
        "route": sc.route.tolist(),
        "n_samples": sc.actors.n_samples,
        "actors": [{"kind": a.kind, "length": a.length, "width": a.width,
                    "gt": a.gt.tolist(), "forecasts": a.forecasts.tolist()} for a in sc.actors.actors],
    }


def scenario_from_dict(doc: dict, base_dir=None) -> Scenario:
    if doc.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"not a scenario manifest (format={doc.get('format')!r})")
    if doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {doc.get('version')!r}")
    imap = None
    if doc.get("map"):
        mp = Path(doc["map"])
        imap = read_bevm(mp if base_dir is None or mp.is_absolute() else Path(base_dir) / mp)
    road = RoadArc(Pose2(*doc["road"]["start"]), doc["road"]["curvature"], doc["road"]["length"])
    gt = doc["sdv_gt"]
    sdv = Trajectory(tuple(Pose2(x, y, yaw) for x, y, yaw, _ in gt), tuple(t for *_, t in gt))
    actors = tuple(Actor(a["length"], a["width"], np.array(a["gt"], dtype=np.float64),
                         np.array(a["forecasts"], dtype=np.float64), a["kind"]) for a in doc["actors"])
    cfg = ScenarioConfig(**doc["config"])
    return Scenario(imap, sdv, np.array(doc["route"], dtype=np.float64), ActorSet(actors, doc["n_samples"]),
                    doc["seed"], road, cfg)


def write_scenario(directory, sc: Scenario, stem: str) -> Path:
    """Write ``<stem>.json`` (and ``<stem>.bevm`` when the scenario has a map) into ``directory``."""
    d = Path(directory)
    map_file = None
    if sc.map is not None:
        map_file = f"{stem}.bevm"
        write_bevm(d / map_file, sc.map)
    path = d / f"{stem}.json"
    _write(path, (json.dumps(scenario_to_dict(sc, map_file), indent=1, sort_keys=True) + "\n").encode("utf-8"))
    return path


def read_scenario(path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(_read(path).decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    return scenario_from_dict(doc, path.parent)


def read_corpus(directory) -> List[Scenario]:
    """All ``*.json`` manifests in ``directory``, in file-name order."""
    d = Path(directory)
    if not d.is_dir():
        raise OSError(f"scenario directory {d} does not exist")
    files = sorted(d.glob("*.json"))
    if not files:
        raise ValueError(f"no scenario manifests in {d}")
    return [read_scenario(f) for f in files]
