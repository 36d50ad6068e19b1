"""Datasets: multi-view image collections with cameras, and a synthetic
generator for controlled test scenes.

On disk a dataset is a directory with transforms.json (shared
camera_angle_x plus per-frame 4x4 camera-to-world transform_matrix and
file_path), the image files, and optionally points.ply with initial
primitive centers.

The synthetic scenes are textured unit squares in the z = 0 plane viewed
from an arc of cameras at distance `radius`. The frontal camera uses
fx = W * radius so the square maps exactly 1:1 onto the image; pattern
frequencies are therefore exact in cycles per pixel, which the band tests
rely on. Ground truth is the analytic texture supersampled 4x4 per pixel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_points_ply, save_points_ply
from .errors import MalformedInputError, MissingFileError, ShapeMismatchError
from .geometry import Camera, matrix_to_quaternion
from .images import read_png, write_png

TEST_EVERY = 8  # every 8th view (by sorted name) is held out

PRESETS = ("checkerboard", "stripes", "two-region", "texture")


@dataclass
class View:
    camera: Camera
    image: np.ndarray  # (H, W, 3) float64 in [0, 1]
    name: str


@dataclass
class SceneData:
    views: list
    initial_points: np.ndarray | None = None
    train_ids: list = field(default_factory=list)
    test_ids: list = field(default_factory=list)

    @property
    def train_views(self) -> list:
        return [self.views[i] for i in self.train_ids]

    @property
    def test_views(self) -> list:
        return [self.views[i] for i in self.test_ids]


def split_train_test(names: list[str]) -> tuple[list[int], list[int]]:
    """Hold out every TEST_EVERY-th view of the name-sorted sequence."""
    order = sorted(range(len(names)), key=lambda i: names[i])
    train, test = [], []
    for rank, idx in enumerate(order):
        (test if rank % TEST_EVERY == 0 else train).append(idx)
    if not train:  # single-view datasets train on everything
        train, test = test, []
    return sorted(train), sorted(test)


def load_dataset(root) -> SceneData:
    root = Path(root)
    tpath = root / "transforms.json"
    if not tpath.exists():
        raise MissingFileError(f"no transforms.json under {root}")
    try:
        desc = json.loads(tpath.read_text())
    except json.JSONDecodeError as e:
        raise MalformedInputError(f"{tpath}: {e}") from e
    if "camera_angle_x" not in desc or "frames" not in desc:
        raise MalformedInputError(f"{tpath}: needs camera_angle_x and frames")
    angle_x = float(desc["camera_angle_x"])
    views = []
    names = []
    for frame in desc["frames"]:
        rel = frame.get("file_path")
        mat = frame.get("transform_matrix")
        if rel is None or mat is None:
            raise MalformedInputError(f"{tpath}: frame needs file_path and transform_matrix")
        img_path = root / rel
        if not img_path.exists() and img_path.suffix == "":
            img_path = img_path.with_suffix(".png")
        image = read_png(img_path)
        h, w = image.shape[:2]
        mat = np.asarray(mat, dtype=np.float64)
        if mat.shape != (4, 4):
            raise MalformedInputError(f"{tpath}: transform_matrix must be 4x4")
        fx = 0.5 * w / np.tan(0.5 * angle_x)
        cam = Camera(
            width=w,
            height=h,
            fx=fx,
            fy=fx,
            cx=w / 2.0,
            cy=h / 2.0,
            position=mat[:3, 3],
            rotation=matrix_to_quaternion(mat[:3, :3]),
        )
        name = Path(rel).name
        views.append(View(camera=cam, image=image, name=name))
        names.append(name)
    if not views:
        raise MalformedInputError(f"{tpath}: no frames")
    points = None
    ppath = root / "points.ply"
    if ppath.exists():
        points = load_points_ply(ppath)
    train_ids, test_ids = split_train_test(names)
    return SceneData(views=views, initial_points=points, train_ids=train_ids, test_ids=test_ids)


def save_dataset(root, data: SceneData, camera_angle_x: float) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    frames = []
    for view in data.views:
        rel = f"images/{view.name}"
        write_png(root / rel, view.image)
        frames.append(
            {
                "file_path": rel,
                "transform_matrix": view.camera.camera_to_world().tolist(),
            }
        )
    payload = {"camera_angle_x": camera_angle_x, "frames": frames}
    (root / "transforms.json").write_text(json.dumps(payload, indent=2) + "\n")
    if data.initial_points is not None:
        save_points_ply(root / "points.ply", data.initial_points)


# ---------------------------------------------------------------------------
# Synthetic scenes


def texture_checkerboard(ps: np.ndarray, pt: np.ndarray, cell_px: float) -> np.ndarray:
    """Black/white checkerboard in frontal pixel units, cells cell_px wide.
    Values 0.1/0.9 keep the targets inside the sigmoid's reachable range."""
    parity = (np.floor(ps / cell_px) + np.floor(pt / cell_px)) % 2.0
    val = np.where(parity < 0.5, 0.1, 0.9)
    return np.repeat(val[..., None], 3, axis=-1)


def texture_stripes(ps: np.ndarray, pt: np.ndarray, freq: float) -> np.ndarray:
    """Vertical sinusoidal stripes at `freq` cycles per frontal pixel."""
    val = 0.5 + 0.4 * np.cos(2.0 * np.pi * freq * ps)
    return np.repeat(val[..., None], 3, axis=-1)


def texture_two_region(ps: np.ndarray, pt: np.ndarray, freq: float, width_px: float, height_px: float) -> np.ndarray:
    """Left half: smooth vertical ramp. Right half: stripes at `freq`.
    The frequency error of an under-fitted model concentrates on the right."""
    left = 0.2 + 0.6 * (pt / height_px)
    right = 0.5 + 0.4 * np.cos(2.0 * np.pi * freq * ps)
    val = np.where(ps < 0.5 * width_px, left, right)
    return np.repeat(val[..., None], 3, axis=-1)


def make_arc_camera(theta: float, radius: float, width: int, height: int) -> Camera:
    """Camera on the y = 0 arc at angle theta from the z axis, looking at
    the origin, up +y. fx = W * radius makes the frontal view 1:1."""
    pos = radius * np.array([np.sin(theta), 0.0, np.cos(theta)])
    backward = pos / np.linalg.norm(pos)          # +z camera axis, away from target
    up_hint = np.array([0.0, 1.0, 0.0])
    right = np.cross(up_hint, backward)
    right /= np.linalg.norm(right)
    up = np.cross(backward, right)
    rot = np.stack([right, up, backward], axis=1)
    fx = width * radius
    return Camera(
        width=width,
        height=height,
        fx=fx,
        fy=fx,
        cx=width / 2.0,
        cy=height / 2.0,
        position=pos,
        rotation=matrix_to_quaternion(rot),
    )


def _texture_value(preset: str, ps, pt, *, cell_px, freq, width_px, height_px, texture_img=None):
    if preset == "checkerboard":
        return texture_checkerboard(ps, pt, cell_px)
    if preset == "stripes":
        return texture_stripes(ps, pt, freq)
    if preset == "two-region":
        return texture_two_region(ps, pt, freq, width_px, height_px)
    if preset == "texture":
        return _sample_texture(texture_img, ps / width_px, pt / height_px)
    raise MalformedInputError(f"unknown preset {preset!r}, pick one of {PRESETS}")


def _sample_texture(img: np.ndarray, s: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Bilinear sample of an (H, W, 3) texture at normalized coords."""
    h, w = img.shape[:2]
    x = np.clip(s * (w - 1), 0.0, w - 1.0)
    y = np.clip(t * (h - 1), 0.0, h - 1.0)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def render_ground_truth(camera: Camera, preset: str, *, cell_px=8.0, freq=0.25, supersample=4, texture_img=None, background=0.0) -> np.ndarray:
    """Analytic render of the textured unit square, box-filtered from
    supersample^2 samples per pixel."""
    w, h = camera.width, camera.height
    rot = camera.rotation_matrix()
    acc = np.zeros((h, w, 3))
    offs = (np.arange(supersample) + 0.5) / supersample
    for oy in offs:
        for ox in offs:
            px = np.arange(w)[None, :] + ox
            py = np.arange(h)[:, None] + oy
            dx = (px - camera.cx) / camera.fx
            dy = -(py - camera.cy) / camera.fy
            d = np.stack(np.broadcast_arrays(dx, dy, np.full((h, w), -1.0)), axis=-1) @ rot.T
            oz = camera.position[2]
            with np.errstate(divide="ignore", invalid="ignore"):
                t = -oz / d[..., 2]
            x = camera.position[0] + t * d[..., 0]
            y = camera.position[1] + t * d[..., 1]
            inside = (t > 0) & (np.abs(x) <= 0.5) & (np.abs(y) <= 0.5)
            ps = (x + 0.5) * w
            pt = (0.5 - y) * h
            val = _texture_value(
                preset,
                ps,
                pt,
                cell_px=cell_px,
                freq=freq,
                width_px=float(w),
                height_px=float(h),
                texture_img=texture_img,
            )
            acc += np.where(inside[..., None], val, background)
    return acc / (supersample * supersample)


def generate_synthetic(
    preset: str,
    *,
    size: tuple[int, int] = (64, 64),
    n_views: int = 1,
    cell_px: float = 8.0,
    freq: float = 0.25,
    n_points: int = 64,
    radius: float = 2.0,
    arc_deg: float = 45.0,
    seed: int = 0,
    texture_path=None,
    out_dir=None,
) -> SceneData:
    """Build (and optionally write) a synthetic dataset."""
    if preset not in PRESETS:
        raise MalformedInputError(f"unknown preset {preset!r}, pick one of {PRESETS}")
    width, height = size
    texture_img = read_png(texture_path) if preset == "texture" else None
    rng = np.random.default_rng(seed)
    if n_views == 1:
        thetas = [0.0]
    else:
        half = np.deg2rad(arc_deg) / 2.0
        thetas = np.linspace(-half, half, n_views)
    views = []
    for i, theta in enumerate(thetas):
        cam = make_arc_camera(float(theta), radius, width, height)
        img = render_ground_truth(
            cam, preset, cell_px=cell_px, freq=freq, texture_img=texture_img
        )
        views.append(View(camera=cam, image=img, name=f"r_{i:03d}.png"))
    points = np.zeros((n_points, 3))
    points[:, 0] = rng.uniform(-0.5, 0.5, n_points)
    points[:, 1] = rng.uniform(-0.5, 0.5, n_points)
    train_ids, test_ids = split_train_test([v.name for v in views])
    data = SceneData(
        views=views, initial_points=points, train_ids=train_ids, test_ids=test_ids
    )
    if out_dir is not None:
        camera_angle_x = 2.0 * np.arctan(1.0 / (2.0 * radius))
        save_dataset(out_dir, data, camera_angle_x)
    return data
