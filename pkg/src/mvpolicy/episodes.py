"""Observation/Action/Episode records, the episode container format, datasets and augmentation."""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import sim
from .instructions import generate_instruction

MAGIC = b"MVEPISOD"
FORMAT_VERSION = 1


class ContainerError(IOError):
    """Base class for episode container failures."""


class BadContainerError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


@dataclass(frozen=True, eq=False)
class Observation:
    rgb: np.ndarray  # (K, H, W, 3) float32 in [0, 1]
    pcd: np.ndarray  # (K, H, W, 3) float32 world meters
    gripper_map: np.ndarray  # (K, H, W) float32 in {0, 1}

    def __post_init__(self):
        K, H, W, c = self.rgb.shape
        if c != 3 or self.pcd.shape != (K, H, W, 3) or self.gripper_map.shape != (K, H, W):
            raise ValueError("rgb, pcd and gripper_map must share K, H, W")

    @property
    def shape(self) -> tuple:
        return self.rgb.shape[:3]

    def cameras(self, indices: Sequence[int]) -> "Observation":
        idx = list(indices)
        return Observation(self.rgb[idx], self.pcd[idx], self.gripper_map[idx])

    def __eq__(self, other):
        return (
            isinstance(other, Observation)
            and _same(self.rgb, other.rgb)
            and _same(self.pcd, other.pcd)
            and _same(self.gripper_map, other.gripper_map)
        )


def _same(a, b) -> bool:
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(frozen=True)
class Action:
    position: tuple
    quaternion: tuple
    open: float

    @classmethod
    def from_vector(cls, v) -> "Action":
        v = [float(x) for x in np.asarray(v, dtype=np.float32)]
        return cls(tuple(v[:3]), tuple(v[3:7]), v[7])

    def vector(self) -> np.ndarray:
        return np.array([*self.position, *self.quaternion, self.open], dtype=np.float32)


def canonical_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return -q if q[0] < 0 else q


@dataclass(frozen=True, eq=False)
class Episode:
    instruction: str
    task_name: str
    task_id: int
    variation_id: int
    steps: tuple  # ((Observation, Action), ...)
    seed: int

    def __post_init__(self):
        if not self.steps:
            raise ValueError("episode has no steps")
        if len(self.steps) > sim.T_MAX:
            raise ValueError(f"episode longer than T_max={sim.T_MAX}")

    @property
    def observations(self) -> list:
        return [o for o, _ in self.steps]

    @property
    def actions(self) -> list:
        return [a for _, a in self.steps]

    def __len__(self):
        return len(self.steps)

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        return (
            (self.instruction, self.task_name, self.task_id, self.variation_id, self.seed)
            == (other.instruction, other.task_name, other.task_id, other.variation_id, other.seed)
            and len(self.steps) == len(other.steps)
            and all(
                o1 == o2 and _same(a1.vector(), a2.vector())
                for (o1, a1), (o2, a2) in zip(self.steps, other.steps)
            )
        )


def episode_instruction(task: sim.TaskSpec, seed: int) -> str:
    """Instruction paired with the scene of ``task`` at ``seed`` (template drawn from the seed)."""
    return generate_instruction(task, np.random.default_rng([seed, task.task_id, task.variation_id, 1]))


def generate_episode(task: sim.TaskSpec, seed: int, rig: sim.CameraRig | None = None,
                     image_size=(32, 32)) -> Episode:
    """Scripted demonstration: observation before each expert macro step."""
    rig = rig or sim.default_rig(image_size)
    scene = sim.make_scene(task, seed, (rig.cameras[0].height, rig.cameras[0].width))
    actions = sim.expert_demo(scene, task)
    scenes = sim.replay(scene, actions)
    if not sim.check_success(scenes[-1], task):
        raise sim.SimError(f"expert failed on {task} seed {seed}")
    text = episode_instruction(task, seed)
    steps = []
    for s, a in zip(scenes[:-1], actions):
        q = canonical_quaternion(a.quaternion)
        act = Action.from_vector([*a.position, *q, a.open])
        steps.append((sim.render(s, rig), act))
    return Episode(text, task.task_name, task.task_id, task.variation_id, tuple(steps), int(seed))


# ---------------------------------------------------------------- container


def _arrays(e: Episode) -> list:
    obs = e.observations
    rgb = np.stack([o.rgb for o in obs])
    return [
        ("rgb", np.round(rgb * 255).astype("<u1")),
        ("pcd", np.stack([o.pcd for o in obs]).astype("<f4")),
        ("gripper_map", np.stack([o.gripper_map for o in obs]).astype("<u1")),
        ("actions", np.stack([a.vector() for a in e.actions]).astype("<f4")),
    ]


def write_episode(e: Episode, path) -> None:
    arrays = _arrays(e)
    T, K, H, W = arrays[0][1].shape[:4]
    offsets, blobs, off = {}, [], 0
    for name, a in arrays:
        b = a.tobytes()
        offsets[name] = [off, len(b)]
        blobs.append(b)
        off += len(b)
    payload = b"".join(blobs)
    header = {
        "version": FORMAT_VERSION,
        "task": e.task_name,
        "task_id": e.task_id,
        "variation_id": e.variation_id,
        "seed": e.seed,
        "instruction": e.instruction,
        "K": K, "H": H, "W": W, "T": T,
        "dtypes": {name: a.dtype.str for name, a in arrays},
        "offsets": offsets,
        "payload_bytes": len(payload),
        "crc32": zlib.crc32(payload),
    }
    hb = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        f.write(payload)


def read_episode(path) -> Episode:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise BadContainerError(f"{path}: bad container (magic bytes)")
    pos = len(MAGIC)
    if len(data) < pos + 4:
        raise TruncatedError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", data[pos : pos + 4])
    pos += 4
    if len(data) < pos + hlen:
        raise TruncatedError(f"{path}: truncated header")
    try:
        h = json.loads(data[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadContainerError(f"{path}: unreadable header") from exc
    if h.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {h.get('version')} != {FORMAT_VERSION}")
    payload = data[pos + hlen :]
    T, K, H, W = h["T"], h["K"], h["H"], h["W"]
    shapes = {
        "rgb": (T, K, H, W, 3),
        "pcd": (T, K, H, W, 3),
        "gripper_map": (T, K, H, W),
        "actions": (T, 8),
    }
    need = 0
    for name, shape in shapes.items():
        start, nbytes = h["offsets"][name]
        expect = int(np.prod(shape)) * np.dtype(h["dtypes"][name]).itemsize
        if nbytes != expect:
            raise TruncatedError(f"{path}: {name} holds {nbytes} bytes, header implies {expect}")
        need = max(need, start + nbytes)
    if len(payload) < need or len(payload) < h["payload_bytes"]:
        raise TruncatedError(f"{path}: payload has {len(payload)} bytes, expected {need}")
    if zlib.crc32(payload[: h["payload_bytes"]]) != h["crc32"]:
        raise ChecksumError(f"{path}: CRC32 mismatch")
    arr = {}
    for name, shape in shapes.items():
        start, nbytes = h["offsets"][name]
        arr[name] = np.frombuffer(payload, dtype=h["dtypes"][name], count=int(np.prod(shape)),
                                  offset=start).reshape(shape)
    rgb = arr["rgb"].astype(np.float32) / np.float32(255)
    pcd = arr["pcd"].astype(np.float32)
    gm = arr["gripper_map"].astype(np.float32)
    steps = tuple(
        (Observation(rgb[t], pcd[t], gm[t]), Action.from_vector(arr["actions"][t]))
        for t in range(T)
    )
    return Episode(h["instruction"], h["task"], h["task_id"], h["variation_id"], steps, h["seed"])


# ---------------------------------------------------------------- datasets


@dataclass
class ManifestRow:
    path: str
    task: str
    variation: int
    seed: int
    steps: int
    split: str = "seen"
    n_objects: int | None = None
    return_home: bool = False
    occluded: bool = False

    def spec(self) -> sim.TaskSpec:
        return sim.TaskSpec(self.task, self.variation, self.n_objects, self.return_home, self.occluded)


@dataclass
class DatasetManifest:
    root: Path
    rows: list = field(default_factory=list)

    FILENAME = "manifest.jsonl"

    def __len__(self):
        return len(self.rows)

    def split(self, name: str) -> list:
        return [r for r in self.rows if r.split == name]

    def variations(self, split: str) -> set:
        return {(r.task, r.variation) for r in self.rows if r.split == split}

    def task_specs(self, split: str) -> list:
        """Distinct TaskSpecs of a split, in manifest order."""
        out = []
        for r in self.split(split):
            if r.spec() not in out:
                out.append(r.spec())
        return out

    def tasks(self) -> list:
        seen = []
        for r in self.rows:
            if r.task not in seen:
                seen.append(r.task)
        return seen

    def lines(self) -> list:
        return [json.dumps(r.__dict__, sort_keys=True) for r in self.rows]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.lines()).encode()).hexdigest()

    def write(self) -> Path:
        p = Path(self.root) / self.FILENAME
        p.write_text("".join(line + "\n" for line in self.lines()))
        return p

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        p = root / cls.FILENAME if root.is_dir() else root
        rows = [ManifestRow(**json.loads(line)) for line in p.read_text().splitlines() if line.strip()]
        return cls(p.parent, rows)

    def episodes(self, split: str | None = "seen") -> list:
        rows = self.rows if split is None else self.split(split)
        return [read_episode(Path(self.root) / r.path) for r in rows]


def episode_seed(seed: int, task: sim.TaskSpec, index: int) -> int:
    ss = np.random.SeedSequence([seed, task.task_id, task.variation_id, index])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


def build_dataset(tasks: Iterable[sim.TaskSpec], demos_per_variation: int, seed: int, out_dir,
                  unseen: Iterable[sim.TaskSpec] = (), image_size=(32, 32),
                  rig: sim.CameraRig | None = None) -> DatasetManifest:
    """Generate demonstrations for every variation and write them with a manifest.

    ``unseen`` variations are written with split "unseen"; they must not share a
    (task, variation) with ``tasks``.
    """
    if demos_per_variation < 1:
        raise ValueError("demos_per_variation must be >= 1")
    tasks, unseen = list(tasks), list(unseen)
    seen_keys = {(t.task_name, t.variation_id) for t in tasks}
    overlap = seen_keys & {(t.task_name, t.variation_id) for t in unseen}
    if overlap:
        raise ValueError(f"seen and unseen variations overlap: {sorted(overlap)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rig = rig or sim.default_rig(image_size)
    manifest = DatasetManifest(out)
    for split, specs in (("seen", tasks), ("unseen", unseen)):
        for task in specs:
            for i in range(demos_per_variation):
                s = episode_seed(seed, task, i)
                try:
                    ep = generate_episode(task, s, rig)
                except sim.SimError as exc:
                    raise sim.SimError(
                        f"{task.task_name} variation {task.variation_id} demo {i} seed {s}: {exc}"
                    ) from exc
                name = f"{task.task_name}_v{task.variation_id:03d}_{i:04d}.ep"
                write_episode(ep, out / name)
                manifest.rows.append(
                    ManifestRow(name, task.task_name, task.variation_id, s, len(ep), split,
                                task.n_objects, task.return_home, task.occluded)
                )
    manifest.write()
    return manifest


# ---------------------------------------------------------------- augmentation


def _bilinear_sample(img, rows, cols):
    """Sample (H, W, C) image at fractional (rows, cols) grids, edge-clamped."""
    H, W = img.shape[:2]
    r0 = np.clip(np.floor(rows).astype(int), 0, H - 1)
    c0 = np.clip(np.floor(cols).astype(int), 0, W - 1)
    r1 = np.clip(r0 + 1, 0, H - 1)
    c1 = np.clip(c0 + 1, 0, W - 1)
    fr = np.clip(rows - r0, 0, 1)[:, None, None]
    fc = np.clip(cols - c0, 0, 1)[None, :, None]
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def crop_indices(H, W, top, left, ch, cw):
    """Nearest-neighbour source indices mapping an (ch, cw) window back to (H, W)."""
    rows = top + np.minimum(((np.arange(H) + 0.5) * ch / H).astype(int), ch - 1)
    cols = left + np.minimum(((np.arange(W) + 0.5) * cw / W).astype(int), cw - 1)
    return rows, cols


def augment(obs: Observation, rng: np.random.Generator, jitter: float = 0.1,
            crop_fraction: float = 7 / 8) -> Observation:
    """RGB brightness/contrast jitter plus one aligned random crop per camera.

    The crop window is resized back to H x W: nearest for pcd and gripper_map,
    bilinear for rgb, all through the same source window.
    """
    K, H, W = obs.shape
    ch, cw = max(1, int(round(H * crop_fraction))), max(1, int(round(W * crop_fraction)))
    rgbs, pcds, maps = [], [], []
    for k in range(K):
        top = int(rng.integers(0, H - ch + 1))
        left = int(rng.integers(0, W - cw + 1))
        b = 1.0 + rng.uniform(-jitter, jitter)
        c = 1.0 + rng.uniform(-jitter, jitter)
        rows, cols = crop_indices(H, W, top, left, ch, cw)
        pcds.append(obs.pcd[k][rows][:, cols])
        maps.append(obs.gripper_map[k][rows][:, cols])
        if ch == H and cw == W:
            rgb = obs.rgb[k]
        else:
            fr = top + (np.arange(H) + 0.5) * ch / H - 0.5
            fc = left + (np.arange(W) + 0.5) * cw / W - 0.5
            rgb = _bilinear_sample(obs.rgb[k], fr, fc).astype(np.float32)
        if jitter:
            m = rgb.mean()
            rgb = np.clip(((rgb - m) * c + m) * b, 0.0, 1.0).astype(np.float32)
        rgbs.append(rgb)
    return Observation(np.stack(rgbs), np.stack(pcds), np.stack(maps))
