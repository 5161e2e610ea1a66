"""Seeded synthetic dynamic scenes rendered by analytic ray casting.

A scene is a ground plane, an enclosing dome (so every ray hits something),
and a few moving spheres and boxes, observed by a camera that follows a smooth
spline through random waypoints. Geometry is exact, so ground-truth pointmaps
for any camera/frame combination come straight from the hit points.

Coordinates follow the camera convention x right, y down, z forward; the
world uses the same axes, with the ground at ``y = GROUND_Y``.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensorio
from .errors import ConfigError, DataIOError, DatasetError

GROUND_Y = 1.5
DOME_RADIUS = 12.0
STYLES = ("flat", "textured")
SPLIT_OFFSETS = {"train": 0, "val": 1_000_000, "test": 2_000_000}
_LIGHT = np.array([0.4, -1.0, -0.5]) / np.linalg.norm([0.4, -1.0, -0.5])


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_objects: int = 3
    kinds: tuple[str, ...] = ("sphere", "box")
    size_range: tuple[float, float] = (0.35, 0.8)
    speed_range: tuple[float, float] = (0.05, 0.15)       # world units per frame
    angular_speed_range: tuple[float, float] = (0.0, 0.15)  # radians per frame
    camera_extent: float = 0.6                              # waypoint spread
    n_waypoints: int = 4
    focal: float = 28.0
    frames: int = 12
    height: int = 32
    width: int = 32
    style: str = "flat"

    def __post_init__(self):
        if self.style not in STYLES:
            raise ConfigError(f"style must be one of {STYLES}, got {self.style!r}")
        if self.frames < 1 or self.height < 1 or self.width < 1:
            raise ConfigError("frames and resolution must be positive")
        bad = set(self.kinds) - {"sphere", "box"}
        if bad:
            raise ConfigError(f"unknown object kinds {sorted(bad)}")


@dataclass
class SceneObject:
    kind: str                    # "sphere" | "box"
    center: np.ndarray           # (3,) at frame 0
    size: np.ndarray             # radius (sphere) or half extents (box), (3,)
    velocity: np.ndarray         # (3,) per frame
    yaw0: float = 0.0
    yaw_rate: float = 0.0        # radians per frame about the y axis
    color: np.ndarray = field(default_factory=lambda: np.array([0.8, 0.3, 0.2]))

    def center_at(self, t: float) -> np.ndarray:
        return self.center + t * self.velocity

    def yaw_at(self, t: float) -> float:
        return self.yaw0 + t * self.yaw_rate


@dataclass
class Camera:
    rotation: np.ndarray     # world -> camera, (3, 3)
    translation: np.ndarray  # world -> camera, (3,)
    fx: float
    fy: float
    cx: float
    cy: float

    @property
    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def extrinsics(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    def intrinsics(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation


@dataclass
class Scene:
    objects: list[SceneObject]
    cameras: list[Camera]
    height: int
    width: int
    style: str = "flat"
    ground: bool = True
    ground_color: np.ndarray = field(default_factory=lambda: np.array([0.45, 0.5, 0.4]))
    dome_color: np.ndarray = field(default_factory=lambda: np.array([0.55, 0.7, 0.9]))


@dataclass
class ClipSample:
    """Rendered frames plus exact geometry.

    ``world_points[k]`` holds frame k's surface hit per pixel in world
    coordinates; all cross-frame pointmaps derive from it.
    """

    frames: np.ndarray           # (T, U, V, 3) float32 in [0, 1]
    world_points: np.ndarray     # (T, U, V, 3) float64
    extrinsics: np.ndarray       # (T, 3, 4) world -> camera
    intrinsics: np.ndarray       # (T, 4) fx, fy, cx, cy
    style: str = "flat"
    seed: int = 0
    _target_files: dict[tuple[int, int], Path] | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.frames)

    def ego(self, i: int) -> np.ndarray:
        """X^{i|i}: frame i's points in camera i."""
        return self._in_camera(self.world_points[i], i)

    def target(self, j: int, i: int) -> np.ndarray:
        """Y^{j|i}: frame j's points in camera i."""
        if self._target_files is not None:
            path = self._target_files.get((j, i))
            if path is None or not path.exists():
                raise DatasetError(f"missing ground truth Y^{{{j}|{i}}} ({path})")
            return tensorio.load_tensor(path).astype(np.float64)
        return self._in_camera(self.world_points[j], i)

    def validity(self, i: int) -> np.ndarray:
        return np.ones(self.frames.shape[1:3], dtype=bool)

    def _in_camera(self, pts: np.ndarray, i: int) -> np.ndarray:
        e = self.extrinsics[i]
        return pts @ e[:, :3].T + e[:, 3]


# ----------------------------------------------------------------------------
# scene sampling


def look_at(position: np.ndarray, target: np.ndarray) -> np.ndarray:
    """World->camera rotation for a camera at ``position`` facing ``target``."""
    fwd = target - position
    fwd = fwd / np.linalg.norm(fwd)
    down = np.array([0.0, 1.0, 0.0])
    right = np.cross(down, fwd)
    right /= np.linalg.norm(right)
    cam_down = np.cross(fwd, right)
    return np.stack([right, cam_down, fwd])


def catmull_rom(points: np.ndarray, n: int) -> np.ndarray:
    """Sample ``n`` points along a centripetal-free (uniform) Catmull-Rom spline."""
    if len(points) == 1 or n == 1:
        return np.repeat(points[:1], n, axis=0)
    p = np.concatenate([points[:1], points, points[-1:]])
    segs = len(points) - 1
    out = []
    for u in np.linspace(0.0, segs, n):
        s = min(int(u), segs - 1)
        t = u - s
        p0, p1, p2, p3 = p[s], p[s + 1], p[s + 2], p[s + 3]
        out.append(0.5 * ((2 * p1) + (-p0 + p2) * t + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t * t
                          + (-p0 + 3 * p1 - 3 * p2 + p3) * t ** 3))
    return np.array(out)


def sample_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    objects = []
    for _ in range(spec.n_objects):
        kind = spec.kinds[rng.integers(len(spec.kinds))]
        s = rng.uniform(*spec.size_range)
        size = np.full(3, s) if kind == "sphere" else s * rng.uniform(0.6, 1.0, 3)
        center = np.array([rng.uniform(-1.8, 1.8), GROUND_Y - size[1], rng.uniform(3.5, 7.0)])
        heading = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(*spec.speed_range)
        velocity = np.array([np.cos(heading), 0.0, np.sin(heading)]) * speed
        yaw_rate = rng.uniform(*spec.angular_speed_range) * rng.choice([-1.0, 1.0])
        color = rng.uniform(0.15, 0.95, 3)
        objects.append(SceneObject(kind, center, size, velocity, rng.uniform(0, np.pi), yaw_rate, color))
    waypoints = rng.uniform(-1, 1, (spec.n_waypoints, 3)) * spec.camera_extent * np.array([1.0, 0.3, 1.0])
    aim = np.array([0.0, 0.6, 5.0]) + rng.uniform(-0.5, 0.5, (spec.n_waypoints, 3)) * np.array([1.0, 0.2, 0.5])
    positions = catmull_rom(waypoints, spec.frames)
    targets = catmull_rom(aim, spec.frames)
    cx, cy = spec.width / 2.0, spec.height / 2.0
    cameras = []
    for pos, tgt in zip(positions, targets):
        r = look_at(pos, tgt)
        cameras.append(Camera(r, -r @ pos, spec.focal, spec.focal, cx, cy))
    ground_color = rng.uniform(0.3, 0.6, 3)
    dome_color = rng.uniform(0.5, 0.9, 3)
    return Scene(objects, cameras, spec.height, spec.width, spec.style,
                 ground_color=ground_color, dome_color=dome_color)


# ----------------------------------------------------------------------------
# ray casting


def _yaw_matrix(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _hit_sphere(o, d, center, radius):
    oc = o - center
    a = np.einsum("ij,ij->i", d, d)
    b = 2.0 * (d @ oc)
    c = oc @ oc - radius * radius
    disc = b * b - 4 * a * c
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > 1e-6, t0, t1)
    t = np.where((disc >= 0) & (t > 1e-6), t, np.inf)
    hit = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    normal = (hit - center) / radius
    return t, normal


def _hit_box(o, d, center, half, yaw):
    rot = _yaw_matrix(yaw)  # local -> world
    ol = (o - center) @ rot
    dl = d @ rot
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dl
        t1 = (-half - ol) * inv
        t2 = (half - ol) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    tn = tmin.max(axis=1)
    tf = tmax.min(axis=1)
    ok = (tn <= tf) & (tf > 1e-6)
    t = np.where(ok, np.where(tn > 1e-6, tn, tf), np.inf)
    axis = tmin.argmax(axis=1)
    local_n = np.zeros_like(dl)
    rows = np.arange(len(dl))
    local_n[rows, axis] = -np.sign(dl[rows, axis])
    return t, local_n @ rot.T, rot


def _checker(p: np.ndarray, freq: float) -> np.ndarray:
    return (np.floor(p * freq).sum(axis=-1) % 2).astype(np.float64)


def render_frame(scene: Scene, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast frame ``k``; returns (rgb (U, V, 3), world hit points (U, V, 3))."""
    cam = scene.cameras[k]
    u, v = scene.height, scene.width
    ys, xs = np.meshgrid(np.arange(u) + 0.5, np.arange(v) + 0.5, indexing="ij")
    d_cam = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones_like(xs)], -1).reshape(-1, 3)
    # unnormalised directions with camera z = 1: ray parameter == camera depth
    d = d_cam @ cam.rotation
    o = cam.position
    n_rays = len(d)
    best_t = np.full(n_rays, np.inf)
    normal = np.zeros((n_rays, 3))
    color = np.zeros((n_rays, 3))

    def take(t, nrm, col):
        closer = t < best_t
        best_t[closer] = t[closer]
        normal[closer] = nrm[closer]
        color[closer] = col[closer]

    textured = scene.style == "textured"
    # dome: always hit from inside
    a = np.einsum("ij,ij->i", d, d)
    b = 2.0 * (d @ o)
    c = o @ o - DOME_RADIUS ** 2
    t_dome = (-b + np.sqrt(b * b - 4 * a * c)) / (2 * a)
    hit = o + t_dome[:, None] * d
    dome_col = np.tile(scene.dome_color, (n_rays, 1))
    if textured:
        dome_col = dome_col * (0.75 + 0.25 * np.cos(hit[:, :1] * 0.3) * np.cos(hit[:, 1:2] * 0.4))
    take(t_dome, -hit / DOME_RADIUS, dome_col)
    if scene.ground:
        with np.errstate(divide="ignore"):
            t_g = np.where(d[:, 1] > 1e-9, (GROUND_Y - o[1]) / d[:, 1], np.inf)
        hit = o + np.where(np.isfinite(t_g), t_g, 0.0)[:, None] * d
        g_col = np.tile(scene.ground_color, (n_rays, 1))
        if textured:
            g_col = g_col * (0.6 + 0.4 * _checker(hit[:, [0, 2]], 1.0))[:, None]
        take(t_g, np.tile([0.0, -1.0, 0.0], (n_rays, 1)), g_col)
    for obj in scene.objects:
        ctr = obj.center_at(k)
        if obj.kind == "sphere":
            t, nrm = _hit_sphere(o, d, ctr, obj.size[0])
            local = None
            if textured:
                local = (o + np.where(np.isfinite(t), t, 0.0)[:, None] * d - ctr) @ _yaw_matrix(obj.yaw_at(k))
        else:
            t, nrm, rot = _hit_box(o, d, ctr, obj.size, obj.yaw_at(k))
            local = (o + np.where(np.isfinite(t), t, 0.0)[:, None] * d - ctr) @ rot if textured else None
        col = np.tile(obj.color, (n_rays, 1))
        if textured:
            col = col * (0.55 + 0.45 * _checker(local, 4.0))[:, None]
        take(t, nrm, col)

    points = o + best_t[:, None] * d
    shade = 0.45 + 0.55 * np.clip(-(normal @ _LIGHT), 0.0, 1.0)
    rgb = np.clip(color * shade[:, None], 0.0, 1.0)
    return rgb.reshape(u, v, 3), points.reshape(u, v, 3)


def render_clip(scene: Scene, seed: int = 0) -> ClipSample:
    frames, points = zip(*(render_frame(scene, k) for k in range(len(scene.cameras))))
    return ClipSample(
        frames=np.stack(frames).astype(np.float32),
        world_points=np.stack(points),
        extrinsics=np.stack([c.extrinsics() for c in scene.cameras]),
        intrinsics=np.stack([c.intrinsics() for c in scene.cameras]),
        style=scene.style,
        seed=seed,
    )


def generate_clip(spec: SceneSpec) -> ClipSample:
    return render_clip(sample_scene(spec), seed=spec.seed)


# ----------------------------------------------------------------------------
# on-disk datasets


def split_seed(template: SceneSpec, split: str, index: int) -> int:
    if split not in SPLIT_OFFSETS:
        raise ConfigError(f"split must be one of {sorted(SPLIT_OFFSETS)}, got {split!r}")
    return template.seed + SPLIT_OFFSETS[split] + index


def clip_specs(template: SceneSpec, n_clips: int, split: str) -> list[SceneSpec]:
    return [replace(template, seed=split_seed(template, split, k)) for k in range(n_clips)]


def write_clip(clip: ClipSample, directory: Path) -> None:
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create {directory}: {exc}") from exc
    t = len(clip)
    for k in range(t):
        tensorio.save_tensor(directory / f"frame_{k}.mmpt", clip.frames[k])
        tensorio.save_tensor(directory / f"gt_X_{k}.mmpt", clip.ego(k).astype(np.float32))
    for i in range(t):
        for j in range(t):
            if i != j:
                tensorio.save_tensor(directory / f"gt_Y_{j}_{i}.mmpt", clip.target(j, i).astype(np.float32))
    lines = []
    for k in range(t):
        vals = list(clip.extrinsics[k].reshape(-1)) + list(clip.intrinsics[k])
        lines.append(" ".join(repr(float(x)) for x in vals))
    (directory / "cameras.txt").write_text("\n".join(lines) + "\n")
    (directory / "clip.txt").write_text(f"style = {clip.style}\nseed = {clip.seed}\nframes = {t}\n")


def write_manifest(root: Path) -> list[str]:
    files = sorted(str(p.relative_to(root)).replace(os.sep, "/")
                   for p in root.rglob("*") if p.is_file() and p.name != "manifest.txt")
    (root / "manifest.txt").write_text("".join(f + "\n" for f in files))
    return files


def generate_dataset(template: SceneSpec, n_clips: int, split: str, out_dir,
                     progress: Callable[[int], None] | None = None) -> list[str]:
    """Render ``n_clips`` clips into ``out_dir/split`` and refresh the root manifest."""
    root = Path(out_dir)
    try:
        (root / split).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create {root / split}: {exc}") from exc
    for k, spec in enumerate(clip_specs(template, n_clips, split)):
        write_clip(generate_clip(spec), root / split / f"clip_{k:06d}")
        if progress:
            progress(k)
    return write_manifest(root)


def load_clip(directory) -> ClipSample:
    d = Path(directory)
    try:
        cams = [list(map(float, line.split())) for line in (d / "cameras.txt").read_text().splitlines()
                if line.strip()]
        meta = dict(line.split(" = ", 1) for line in (d / "clip.txt").read_text().splitlines() if " = " in line)
    except OSError as exc:
        raise DatasetError(f"incomplete clip directory {d}: {exc}") from exc
    t = len(cams)
    frames, world = [], []
    ext = np.array([np.array(c[:12]).reshape(3, 4) for c in cams])
    intr = np.array([c[12:16] for c in cams])
    for k in range(t):
        try:
            frames.append(tensorio.load_tensor(d / f"frame_{k}.mmpt"))
            x = tensorio.load_tensor(d / f"gt_X_{k}.mmpt").astype(np.float64)
        except DataIOError as exc:
            raise DatasetError(str(exc)) from exc
        r, tr = ext[k][:, :3], ext[k][:, 3]
        world.append((x - tr) @ r)
    targets = {(j, i): d / f"gt_Y_{j}_{i}.mmpt" for i in range(t) for j in range(t) if i != j}
    return ClipSample(np.stack(frames), np.stack(world), ext, intr, meta.get("style", "flat"),
                      int(meta.get("seed", 0)), _target_files=targets)


def load_split(root, split: str, limit: int | None = None) -> list[ClipSample]:
    base = Path(root) / split
    if not base.is_dir():
        raise DatasetError(f"no '{split}' split under {root}")
    dirs = sorted(p for p in base.iterdir() if p.is_dir())
    if limit is not None:
        dirs = dirs[:limit]
    return [load_clip(p) for p in dirs]


def directory_digest(root) -> str:
    """SHA-256 over relative paths and contents of every file under ``root``."""
    h = hashlib.sha256()
    base = Path(root)
    for p in sorted(base.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(base)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def clip_digest(clip: ClipSample) -> str:
    h = hashlib.sha256()
    h.update(clip.frames.tobytes())
    h.update(clip.world_points.tobytes())
    return h.hexdigest()


def generate_clips(template: SceneSpec, n_clips: int, split: str) -> list[ClipSample]:
    """In-memory counterpart of :func:`generate_dataset`."""
    return [generate_clip(s) for s in clip_specs(template, n_clips, split)]


__all__: Sequence[str] = [
    "SceneSpec", "Scene", "SceneObject", "Camera", "ClipSample", "sample_scene", "render_frame",
    "render_clip", "generate_clip", "generate_dataset", "generate_clips", "load_clip", "load_split",
]
