"""Episode generation and the on-disk episode dataset.

Layout: ``manifest.json`` plus one binary file per episode.  An episode file is
``MAGIC | u32 version | u32 n_fields | fields... | sha256`` where each field is
``u32 name_len | name | u8 dtype | u32 rank | u32 dims... | little-endian data``
and the trailing digest covers every preceding byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import world
from .geometry import CameraModel

MAGIC = b"CLAMPEPI"
VERSION = 1
_DTYPES = {0: np.dtype("<u1"), 1: np.dtype("<i4"), 2: np.dtype("<f4"), 3: np.dtype("<f8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    sensor_size: int = 64
    sensor_fov: float = 70.0
    n_objects: int = 6
    keep_failures: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class Episode:
    task: str
    seed: int
    success: bool
    rgb: np.ndarray  # (T, n_cams, H, W, 3) uint8
    depth: np.ndarray  # (T, n_cams, H, W) float32
    proprio: np.ndarray  # (T, 14) joints at each step
    actions: np.ndarray  # (T, 14) absolute joint targets
    progress: np.ndarray  # (T,) script phase index
    object_poses: np.ndarray  # (T, n_objects, 4) x, y, z, yaw
    texts: list
    object_names: list
    object_kinds: list
    object_half: np.ndarray  # (n_objects, 3)
    cameras: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.actions)

    def scene_objects(self, t: int) -> list:
        """Scene objects with their poses at step ``t``."""
        out = []
        for i, name in enumerate(self.object_names):
            pose = self.object_poses[t, i]
            out.append(world.SceneObject(name, self.object_kinds[i], self.object_half[i].copy(),
                                         pose[:3].copy(), float(pose[3]), world.OBJECTS[name][2]))
        return out


def make_episode(seed: int, task: str, cams=None, config: WorldConfig = WorldConfig()) -> Episode:
    """Roll the scripted expert through the kinematic world and the sensors."""
    if cams is None:
        cams = world.sensor_cameras(config.sensor_size, config.sensor_fov)
    scene = world.gen_scene(seed, task, config.n_objects)
    actions, progress, reachable = world.scripted_expert(scene)
    sim = world.WorldSim(scene)
    T = len(actions)
    n_cams = len(cams)
    rgb = np.zeros((T, n_cams, cams[0].height, cams[0].width, 3), dtype=np.uint8)
    depth = np.zeros((T, n_cams, cams[0].height, cams[0].width), dtype=np.float32)
    proprio = np.zeros((T, world.ACTION_DIM))
    poses = np.zeros((T, len(scene.objects), 4))
    texts = []
    for t in range(T):
        proprio[t] = sim.robot.joints
        poses[t] = sim.object_poses()
        for c, (im, d) in enumerate(world.render_sensors(sim.scene.objects, sim.robot.joints, cams)):
            rgb[t, c] = im
            depth[t, c] = d
        texts.append(world.make_text(scene.task, sim.scene.objects, int(progress[t])))
        sim.step(actions[t])
    success = bool(reachable and not sim.limit_violation and sim.success())
    return Episode(
        task=task, seed=int(seed), success=success, rgb=rgb, depth=depth, proprio=proprio,
        actions=actions, progress=progress.astype(np.int32), object_poses=poses, texts=texts,
        object_names=[o.name for o in scene.objects], object_kinds=[o.kind for o in scene.objects],
        object_half=np.array([o.half for o in scene.objects]), cameras=list(cams),
    )


# ---------------------------------------------------------------- serialization

_ARRAYS = ("rgb", "depth", "proprio", "actions", "progress", "object_poses", "object_half")


def _meta(ep: Episode) -> dict:
    return {
        "task": ep.task, "seed": ep.seed, "success": ep.success, "texts": ep.texts,
        "object_names": ep.object_names, "object_kinds": ep.object_kinds,
        "cameras": [c.to_dict() for c in ep.cameras],
    }


def _pack_field(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODES:
        raise DatasetError(f"field {name!r}: unsupported dtype {arr.dtype}")
    raw = name.encode()
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<BI", _CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def episode_bytes(ep: Episode) -> bytes:
    fields = [(n, getattr(ep, n)) for n in _ARRAYS]
    fields.append(("meta", np.frombuffer(json.dumps(_meta(ep), sort_keys=True).encode(), dtype=np.uint8)))
    body = MAGIC + struct.pack("<II", VERSION, len(fields))
    body += b"".join(_pack_field(n, a) for n, a in fields)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, buf: bytes, where: str):
        self.buf, self.pos, self.where = buf, 0, where

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DatasetError(f"{self.where}: truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_episode(buf: bytes, where: str = "episode") -> Episode:
    if len(buf) < len(MAGIC) + 8 + 32:
        raise DatasetError(f"{where}: truncated")
    if buf[:len(MAGIC)] != MAGIC:
        raise DatasetError(f"{where}: bad magic")
    body, digest = buf[:-32], buf[-32:]
    r = _Reader(body, where)
    r.take(len(MAGIC))
    version, n_fields = r.unpack("<II")
    if version != VERSION:
        raise DatasetError(f"{where}: version {version} not supported (expected {VERSION})")
    if hashlib.sha256(body).digest() != digest:
        raise DatasetError(f"{where}: checksum mismatch")
    arrays = {}
    for _ in range(n_fields):
        (n,) = r.unpack("<I")
        name = r.take(n).decode()
        code, rank = r.unpack("<BI")
        if code not in _DTYPES:
            raise DatasetError(f"{where}: field {name!r} has unknown dtype code {code}")
        shape = r.unpack(f"<{rank}I")
        dt = _DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape).copy()
    if r.pos != len(body):
        raise DatasetError(f"{where}: trailing bytes")
    missing = [n for n in (*_ARRAYS, "meta") if n not in arrays]
    if missing:
        raise DatasetError(f"{where}: missing fields {missing}")
    meta = json.loads(arrays.pop("meta").tobytes().decode())
    return Episode(
        task=meta["task"], seed=meta["seed"], success=meta["success"], texts=meta["texts"],
        object_names=meta["object_names"], object_kinds=meta["object_kinds"],
        cameras=[CameraModel.from_dict(c) for c in meta["cameras"]], **arrays,
    )


def episode_filename(ep: Episode) -> str:
    return f"{ep.task}_{ep.seed:06d}.ep"


def write_dataset(episodes, path, config_hash: str = "") -> dict:
    """Write episode files and ``manifest.json``; returns the manifest."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    index = []
    for ep in episodes:
        data = episode_bytes(ep)
        name = episode_filename(ep)
        (root / name).write_bytes(data)
        index.append({"task": ep.task, "seed": ep.seed, "path": name, "length": len(ep),
                      "success": ep.success, "sha256": hashlib.sha256(data).hexdigest()})
    manifest = {"version": VERSION, "config_hash": config_hash, "episodes": index}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def read_manifest(path) -> dict:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise DatasetError(f"{root}: no manifest.json") from None
    if manifest.get("version") != VERSION:
        raise DatasetError(f"{root}: manifest version {manifest.get('version')} not supported")
    return manifest


def read_episode(path, entry: dict) -> Episode:
    file = Path(path) / entry["path"]
    if not file.exists():
        raise DatasetError(f"{file}: listed in manifest but missing")
    return parse_episode(file.read_bytes(), str(file))


def read_dataset(path):
    """``(manifest, episodes)`` in manifest order."""
    manifest = read_manifest(path)
    return manifest, [read_episode(path, e) for e in manifest["episodes"]]


def generate(tasks, episodes_per_task: int, seed: int, config: WorldConfig = WorldConfig(),
             max_attempts: int = 4):
    """Episodes for each task; seeds are ``seed + i`` and failures are skipped unless kept.

    Returns ``(episodes, failures)`` where failures lists ``(task, seed)``.
    """
    cams = world.sensor_cameras(config.sensor_size, config.sensor_fov)
    episodes, failures = [], []
    for task in tasks:
        made, s = 0, seed
        while made < episodes_per_task and s < seed + max_attempts * episodes_per_task:
            ep = make_episode(s, task, cams, config)
            s += 1
            if not ep.success:
                failures.append((task, ep.seed))
                if not config.keep_failures:
                    continue
            episodes.append(ep)
            made += 1
    return episodes, failures
