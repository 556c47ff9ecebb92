"""Deterministic kinematic tabletop world rendered by fixed pinhole cameras.

Objects are axis-aligned colored boxes. A scene is an immutable value; ``step``
returns a new scene. Actions are macro steps: the gripper teleports to the
commanded position and the open/close flag is applied there.
"""
from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TASKS = ("reach_target", "push_buttons", "tower")

# uint8 palette; rendered colors are exactly these values / 255
PALETTE = {
    "red": (230, 25, 25),
    "green": (25, 200, 40),
    "blue": (30, 60, 235),
    "yellow": (240, 220, 20),
    "cyan": (20, 220, 230),
    "magenta": (220, 30, 220),
}
COLOR_NAMES = tuple(PALETTE)
TABLE_RGB = (128, 128, 128)
FLOOR_RGB = (60, 60, 60)
SKY_RGB = (0, 0, 0)
OCCLUDER_RGB = (200, 200, 200)
PAD_RGB = (250, 250, 250)

TABLE_BOUNDS = (-0.3, 0.3, -0.3, 0.3)  # xmin, xmax, ymin, ymax
SPAWN_HALF = 0.24
HOME = (0.0, 0.0, 0.3)
T_MAX = 6
FAR = 5.0
TOP_CAMERA_HEIGHT = 1.0

BUTTON_SIZE = 0.08
BUTTON_HEIGHT = 0.02
CUBE_SIZE = 0.06
TARGET_SIZE = 0.08
PAD_SIZE = 0.1
PAD_HEIGHT = 0.005


class SimError(ValueError):
    pass


@dataclass(frozen=True)
class Obj:
    id: int
    shape: str  # "button", "cube", "target", "pad", "occluder"
    color: str  # palette name, or "occluder" / "pad"
    pose: tuple  # box center (x, y, z), meters
    size: float  # footprint edge length
    extent: tuple = ()  # (ex, ey, ez) full box dims; derived from size if empty

    @property
    def dims(self) -> np.ndarray:
        if self.extent:
            return np.asarray(self.extent, dtype=np.float64)
        if self.shape == "button":
            return np.array([self.size, self.size, BUTTON_HEIGHT])
        if self.shape == "pad":
            return np.array([self.size, self.size, PAD_HEIGHT])
        return np.array([self.size, self.size, self.size])

    @property
    def rgb(self) -> tuple:
        if self.shape == "occluder":
            return OCCLUDER_RGB
        if self.shape == "pad":
            return PAD_RGB
        return PALETTE[self.color]

    @property
    def top(self) -> float:
        return float(self.pose[2] + self.dims[2] / 2)


@dataclass(frozen=True)
class TaskSpec:
    task_name: str
    variation_id: int = 0
    n_objects: int | None = None  # buttons/cubes in the scene; task default if None
    return_home: bool = False  # push_buttons: go back to HOME after every press
    occluded: bool = False  # reach_target: hide the target from one random camera

    def __post_init__(self):
        if self.task_name not in TASKS:
            raise SimError(f"unknown task {self.task_name!r}")
        n = len(variation_table(self.task_name))
        if not 0 <= self.variation_id < n:
            raise SimError(f"{self.task_name} has {n} variations, got id {self.variation_id}")
        if self.n_objects is not None and self.n_objects < len(self.goal):
            raise SimError("n_objects smaller than the goal length")

    @property
    def goal(self) -> tuple:
        return variation_table(self.task_name)[self.variation_id]

    @property
    def task_id(self) -> int:
        return TASKS.index(self.task_name)

    @property
    def num_objects(self) -> int:
        if self.n_objects is not None:
            return self.n_objects
        return 1 if self.task_name == "reach_target" else 3


_VARIATIONS: dict = {}


def variation_table(task_name: str) -> tuple:
    """Ordered goal color tuples indexed by variation id.

    reach_target: one variation per palette color.
    push_buttons / tower: ids 0-19 are the ordered pairs over the first five
    colors, grouped by cyclic offset o = (j - i) mod 5 as id = 5 * (o - 1) + i;
    ids 0-9 (offsets 1, 2) and 10-19 (offsets 3, 4) therefore use every color
    in both positions. Remaining goals follow sorted by (length, color indices):
    lengths 1-3 for push_buttons, 2-3 for tower.
    """
    if task_name in _VARIATIONS:
        return _VARIATIONS[task_name]
    if task_name == "reach_target":
        table = tuple((c,) for c in COLOR_NAMES)
    elif task_name in ("push_buttons", "tower"):
        head = []
        for o in range(1, 5):
            for i in range(5):
                head.append((i, (i + o) % 5))
        lengths = (1, 2, 3) if task_name == "push_buttons" else (2, 3)
        rest = [
            p
            for n in lengths
            for p in itertools.permutations(range(len(COLOR_NAMES)), n)
            if p not in head
        ]
        table = tuple(tuple(COLOR_NAMES[i] for i in p) for p in head + rest)
    else:
        raise SimError(f"unknown task {task_name!r}")
    _VARIATIONS[task_name] = table
    return table


def variation_of(task_name: str, colors: Sequence[str]) -> int:
    return variation_table(task_name).index(tuple(colors))


@dataclass(frozen=True)
class Scene:
    objects: tuple
    gripper_pose: tuple = HOME
    gripper_open: bool = True
    table_bounds: tuple = TABLE_BOUNDS
    rng_seed: int = 0
    held: int | None = None  # id of the attached cube
    pressed: tuple = ()  # colors in press order; never rendered
    clamped: bool = False  # last step target was outside table_bounds

    def obj(self, color: str) -> Obj:
        for o in self.objects:
            if o.color == color:
                return o
        raise SimError(f"no object of color {color!r} in scene")

    def by_id(self, oid: int) -> Obj:
        for o in self.objects:
            if o.id == oid:
                return o
        raise SimError(f"no object with id {oid}")


# ---------------------------------------------------------------- cameras


@dataclass(frozen=True)
class Camera:
    name: str
    fx: float
    fy: float
    cx: float
    cy: float
    cam_to_world: np.ndarray = field(repr=False)  # 4x4
    height: int
    width: int

    @property
    def rotation(self) -> np.ndarray:
        return self.cam_to_world[:3, :3]

    @property
    def origin(self) -> np.ndarray:
        return self.cam_to_world[:3, 3]

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points (..., 3) -> (pixel (..., 2) as (row, col), camera depth)."""
        pc = (np.asarray(points, dtype=np.float64) - self.origin) @ self.rotation
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[..., 0] / z + self.cx
            v = self.fy * pc[..., 1] / z + self.cy
        return np.stack([v, u], axis=-1), z

    def rays(self) -> np.ndarray:
        """Per-pixel world ray directions (H, W, 3) scaled to unit camera depth."""
        v, u = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        d = np.stack(
            [(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones(u.shape)], axis=-1
        )
        return d @ self.rotation.T

    def backproject(self, depth: np.ndarray) -> np.ndarray:
        return self.origin + self.rays() * depth[..., None]


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, (0.0, 1.0, 0.0))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = x, y, z, eye
    return m


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple

    @property
    def K(self) -> int:
        return len(self.cameras)

    def subset(self, indices: Sequence[int]) -> "CameraRig":
        return CameraRig(tuple(self.cameras[i] for i in indices))


CAMERA_NAMES = ("top", "left", "right")


def default_rig(image_size: tuple[int, int] = (32, 32)) -> CameraRig:
    """Top-down, left and right fixed cameras looking at the table center."""
    H, W = image_size
    poses = {
        "top": look_at((0.0, 0.0, TOP_CAMERA_HEIGHT), (0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)),
        "left": look_at((-0.75, 0.0, 0.65), (0.0, 0.0, 0.0)),
        "right": look_at((0.75, 0.0, 0.65), (0.0, 0.0, 0.0)),
    }
    half_view = {"top": 0.36, "left": 0.42, "right": 0.42}  # tan of half field of view
    cams = []
    for name in CAMERA_NAMES:
        f = (W / 2) / half_view[name]
        cams.append(
            Camera(name, f, f * H / W, (W - 1) / 2, (H - 1) / 2, poses[name], H, W)
        )
    return CameraRig(tuple(cams))


# ---------------------------------------------------------------- scenes


def _check_image_size(image_size):
    H, W = image_size
    if H <= 0 or W <= 0 or H % 16 or W % 16:
        raise SimError(f"image size must be positive multiples of 16, got {image_size}")


def _sample_positions(rng, n, min_dist, half=SPAWN_HALF, tries=10_000):
    pts: list = []
    for _ in range(tries):
        if len(pts) == n:
            break
        p = rng.uniform(-half, half, size=2)
        if all(np.linalg.norm(p - q) >= min_dist for q in pts):
            pts.append(p)
    if len(pts) < n:
        raise SimError("could not place objects without overlap")
    return pts


def make_scene(task: TaskSpec, seed: int, image_size: tuple[int, int] = (32, 32)) -> Scene:
    """Random non-overlapping layout for ``task``; identical (task, seed) -> identical scene."""
    _check_image_size(image_size)
    goal = task.goal
    for c in goal:
        if c not in PALETTE:
            raise SimError(f"goal color {c!r} not in palette")
    rng = np.random.default_rng([seed, task.task_id, task.variation_id])
    n = task.num_objects
    extra = [c for c in COLOR_NAMES if c not in goal]
    colors = list(goal) + list(rng.permutation(extra)[: n - len(goal)])
    order = rng.permutation(n)
    colors = [colors[i] for i in order]

    objects = []
    if task.task_name == "reach_target":
        xy = _sample_positions(rng, n, 1.5 * TARGET_SIZE, half=SPAWN_HALF - 0.04)
        for i, (c, p) in enumerate(zip(colors, xy)):
            objects.append(Obj(i, "target", c, (p[0], p[1], TARGET_SIZE / 2), TARGET_SIZE))
        if task.occluded:
            objects.append(_occluder(rng, objects[colors.index(goal[0])], len(objects)))
    elif task.task_name == "push_buttons":
        xy = _sample_positions(rng, n, 1.6 * BUTTON_SIZE)
        for i, (c, p) in enumerate(zip(colors, xy)):
            objects.append(Obj(i, "button", c, (p[0], p[1], BUTTON_HEIGHT / 2), BUTTON_SIZE))
    else:
        xy = _sample_positions(rng, n + 1, 1.8 * PAD_SIZE)
        for i, (c, p) in enumerate(zip(colors, xy[:n])):
            objects.append(Obj(i, "cube", c, (p[0], p[1], CUBE_SIZE / 2), CUBE_SIZE))
        p = xy[n]
        objects.append(Obj(n, "pad", "pad", (p[0], p[1], PAD_HEIGHT / 2), PAD_SIZE))
    objects = [
        dataclasses.replace(o, pose=tuple(float(v) for v in o.pose)) for o in objects
    ]
    return Scene(tuple(objects), HOME, True, TABLE_BOUNDS, int(seed))


def _occluder(rng, target: Obj, oid: int) -> Obj:
    """Box hiding ``target`` from one randomly chosen default camera."""
    x, y, _ = target.pose
    which = int(rng.integers(3))
    shift = rng.uniform(-0.07, 0.07, size=2)
    if which == 0:  # slab on the top camera's line of sight to the target
        f = (TOP_CAMERA_HEIGHT - 0.3) / (TOP_CAMERA_HEIGHT - target.pose[2])
        c = (x * f + 0.4 * shift[0], y * f + 0.4 * shift[1], 0.3)
        ext = (0.24, 0.24, 0.02)
    else:  # tall wall between the target and a side camera
        gap = rng.uniform(0.08, 0.13)
        sx = -1.0 if which == 1 else 1.0
        c = (x + sx * gap, y + shift[1] * 0.5, 0.2)
        ext = (0.02, 0.24, 0.4)
    return Obj(oid, "occluder", "occluder", tuple(float(v) for v in c), float(ext[1]), ext)


# ---------------------------------------------------------------- rendering


def _ray_boxes(origin, dirs, objects):
    """Nearest hit along rays (N, 3) against boxes; returns depth-parameter and object index."""
    n = dirs.shape[0]
    best = np.full(n, np.inf)
    idx = np.full(n, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    for j, o in enumerate(objects):
        lo = np.asarray(o.pose) - o.dims / 2
        hi = np.asarray(o.pose) + o.dims / 2
        with np.errstate(invalid="ignore"):
            t1 = (lo - origin) * inv
            t2 = (hi - origin) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tmax >= tmin) & (tmax > 0)
        t = np.where(tmin > 0, tmin, tmax)
        closer = hit & (t < best)
        best = np.where(closer, t, best)
        idx = np.where(closer, j, idx)
    return best, idx


def render(scene: Scene, rig: CameraRig):
    """Render RGB, point cloud and gripper map for every camera.

    Returns an ``Observation`` (see ``episodes``). Depth per pixel is the nearest
    intersection among object boxes and the ground plane z = 0 (a per-pixel
    depth buffer); pixels seeing nothing get depth ``FAR``.
    """
    from .episodes import Observation

    rgbs, pcds, maps = [], [], []
    colors = np.array([o.rgb for o in scene.objects] + [TABLE_RGB], dtype=np.uint8)
    for cam in rig.cameras:
        H, W = cam.height, cam.width
        dirs = cam.rays().reshape(-1, 3)  # unit camera-depth per step
        origin = cam.origin
        t, idx = _ray_boxes(origin, dirs, scene.objects)
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = -origin[2] / dirs[:, 2]
        ground = (tg > 0) & (tg < t)
        t = np.where(ground, tg, t)
        t = np.where(np.isfinite(t), np.minimum(t, FAR), FAR)
        pts = origin + dirs * t[:, None]
        bx0, bx1, by0, by1 = scene.table_bounds
        on_table = (pts[:, 0] >= bx0) & (pts[:, 0] <= bx1) & (pts[:, 1] >= by0) & (pts[:, 1] <= by1)
        rgb = np.empty((dirs.shape[0], 3), dtype=np.uint8)
        rgb[:] = SKY_RGB
        rgb[ground] = FLOOR_RGB
        rgb[ground & on_table] = TABLE_RGB
        obj_hit = (idx >= 0) & ~ground
        rgb[obj_hit] = colors[idx[obj_hit]]
        rgbs.append(rgb.reshape(H, W, 3))
        pcds.append(pts.reshape(H, W, 3))
        maps.append(gripper_map(cam, scene.gripper_pose))
    rgb = np.stack(rgbs).astype(np.float32) / np.float32(255)
    return Observation(rgb, np.stack(pcds).astype(np.float32), np.stack(maps))


def gripper_map(cam: Camera, position) -> np.ndarray:
    m = np.zeros((cam.height, cam.width), dtype=np.float32)
    (v, u), z = cam.project(np.asarray(position, dtype=np.float64))
    if z > 0:
        r, c = int(np.floor(v + 0.5)), int(np.floor(u + 0.5))
        if 0 <= r < cam.height and 0 <= c < cam.width:
            m[r, c] = 1.0
    return m


# ---------------------------------------------------------------- dynamics


def press_radius(obj: Obj) -> float:
    return 0.4 * obj.size


def grasp_radius(obj: Obj) -> float:
    return 0.5 * obj.size


def _support_top(scene: Scene, xy, size, exclude) -> float:
    top = 0.0
    for o in scene.objects:
        if o.id == exclude or o.shape in ("occluder", "button"):
            continue
        half = o.dims[:2] / 2 + size / 2
        if np.all(np.abs(np.asarray(o.pose[:2]) - xy) < half - 1e-9):
            top = max(top, o.top)
    return top


def step(scene: Scene, action) -> Scene:
    """Apply one macro-step action (anything with position/quaternion/open)."""
    pos = np.asarray(action.position, dtype=np.float64)
    quat = np.asarray(action.quaternion, dtype=np.float64)
    if pos.shape != (3,) or not np.all(np.isfinite(pos)):
        raise SimError("action position must be 3 finite values")
    if not np.all(np.isfinite(quat)) or abs(np.linalg.norm(quat) - 1.0) > 1e-3:
        raise SimError("action quaternion must be unit norm within 1e-3")
    bx0, bx1, by0, by1 = scene.table_bounds
    target = np.array([np.clip(pos[0], bx0, bx1), np.clip(pos[1], by0, by1), np.clip(pos[2], 0.0, 1.0)])
    clamped = bool(np.any(target != pos))
    want_open = float(action.open) >= 0.5

    objects = list(scene.objects)
    held = scene.held
    pressed = list(scene.pressed)

    if held is not None:
        i = next(j for j, o in enumerate(objects) if o.id == held)
        objects[i] = dataclasses.replace(objects[i], pose=tuple(float(v) for v in target))

    # grasp on an open -> closed transition
    if scene.gripper_open and not want_open and held is None:
        for o in objects:
            if o.shape == "cube" and np.linalg.norm(np.asarray(o.pose) - target) <= grasp_radius(o):
                held = o.id
                i = objects.index(o)
                objects[i] = dataclasses.replace(o, pose=tuple(float(v) for v in target))
                break
    # release on a closed -> open transition
    elif not scene.gripper_open and want_open and held is not None:
        i = next(j for j, o in enumerate(objects) if o.id == held)
        o = objects[i]
        tmp = dataclasses.replace(scene, objects=tuple(objects))
        z = _support_top(tmp, target[:2], o.size, o.id) + o.dims[2] / 2
        objects[i] = dataclasses.replace(o, pose=(float(target[0]), float(target[1]), float(z)))
        held = None

    for o in objects:
        if o.shape != "button":
            continue
        horiz = np.linalg.norm(np.asarray(o.pose[:2]) - target[:2])
        if horiz <= press_radius(o) and target[2] <= o.top + press_radius(o):
            pressed.append(o.color)
            break

    return dataclasses.replace(
        scene,
        objects=tuple(objects),
        gripper_pose=tuple(float(v) for v in target),
        gripper_open=want_open,
        held=held,
        pressed=tuple(pressed),
        clamped=clamped,
    )


def check_success(scene: Scene, task: TaskSpec) -> bool:
    goal = task.goal
    if task.task_name == "push_buttons":
        return tuple(scene.pressed) == tuple(goal)
    if task.task_name == "reach_target":
        t = scene.obj(goal[0])
        return bool(np.linalg.norm(np.asarray(scene.gripper_pose) - t.pose) <= press_radius(t))
    pad = next(o for o in scene.objects if o.shape == "pad")
    z = pad.top
    for c in goal:
        try:
            cube = scene.obj(c)
        except SimError:
            return False
        if cube.id == scene.held:
            return False
        if np.linalg.norm(np.asarray(cube.pose[:2]) - pad.pose[:2]) > press_radius(
            Obj(0, "button", c, (0, 0, 0), BUTTON_SIZE)
        ):
            return False
        if abs(cube.pose[2] - (z + cube.dims[2] / 2)) > 1e-6:
            return False
        z = cube.top
    return True


# ---------------------------------------------------------------- expert

IDENTITY_QUAT = (1.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ExpertAction:
    position: tuple
    quaternion: tuple = IDENTITY_QUAT
    open: float = 1.0


def expert_demo(scene: Scene, task: TaskSpec) -> list:
    """Scripted macro-step solution; positions are object centers."""
    goal = task.goal
    objs = [scene.obj(c) for c in goal]  # raises when a goal object is missing
    acts = []
    if task.task_name == "reach_target":
        acts.append(ExpertAction(objs[0].pose, IDENTITY_QUAT, 1.0))
    elif task.task_name == "push_buttons":
        for k, o in enumerate(objs):
            if task.return_home and k > 0:
                acts.append(ExpertAction(HOME, IDENTITY_QUAT, 0.0))
            acts.append(ExpertAction(o.pose, IDENTITY_QUAT, 0.0))
    else:
        pad = next(o for o in scene.objects if o.shape == "pad")
        z = pad.top
        for o in objs:
            acts.append(ExpertAction(o.pose, IDENTITY_QUAT, 0.0))
            z_c = z + o.dims[2] / 2
            acts.append(ExpertAction((pad.pose[0], pad.pose[1], z_c), IDENTITY_QUAT, 1.0))
            z += o.dims[2]
    if len(acts) > T_MAX:
        raise SimError(f"expert needs {len(acts)} steps > T_max={T_MAX}")
    return acts


def replay(scene: Scene, actions) -> list:
    """Scenes visited while executing ``actions``; first entry is ``scene``."""
    out = [scene]
    for a in actions:
        out.append(step(out[-1], a))
    return out
