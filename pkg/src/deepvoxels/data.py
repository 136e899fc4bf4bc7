"""Synthetic posed-image datasets: scenes, a z-buffer rasterizer, camera paths, storage and tuple sampling.

Dataset layout on disk::

    <dir>/images/0000.png ...   8-bit RGB, lossless
    <dir>/poses.txt             one JSON object per view (see camera.write_poses)
    <dir>/meta.json             {"split", "image_size", "scene", "count", "bbox"?}

``bbox`` ([min xyz], [max xyz]) stands in for a sparse point cloud when
placing the voxel grid.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .camera import CameraPose, PoseRecord, intrinsics, look_at, read_poses, write_poses

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
TOP_K = 5
# Light grey rather than white: a target of exactly 1.0 drives the tanh output
# layer into saturation under an l1 loss.
BACKGROUND = (0.85, 0.85, 0.85)


@dataclass
class Scene:
    """Flat-coloured triangles. ``light`` is "headlight" (a point light at the
    camera centre) or a world-space direction towards the light."""

    vertices: np.ndarray  # (T, 3, 3)
    colors: np.ndarray  # (T, 3) in [0, 1]
    background: tuple = BACKGROUND
    light: object = "headlight"
    ambient: float = 0.0
    name: str = "custom"

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.vertices) != len(self.colors):
            raise ValueError("one colour per triangle required")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("non-finite vertex")
        if self.colors.size and (self.colors.min() < 0 or self.colors.max() > 1):
            raise ValueError("colours must lie in [0, 1]")

    @property
    def points(self) -> np.ndarray:
        return self.vertices.reshape(-1, 3)


def _quad(a, b, c, d) -> list:
    """Two triangles a-b-c, a-c-d; counter-clockwise seen from the normal side."""
    return [[a, b, c], [a, c, d]]


def cube_scene(side: float = 0.6, **kw) -> Scene:
    """Axis-aligned cube centred at the origin, one colour per face."""
    h = side / 2.0
    faces = {
        (1, 0, 0): (0.90, 0.15, 0.15),
        (-1, 0, 0): (0.15, 0.75, 0.20),
        (0, 1, 0): (0.15, 0.30, 0.90),
        (0, -1, 0): (0.95, 0.85, 0.15),
        (0, 0, 1): (0.85, 0.25, 0.85),
        (0, 0, -1): (0.15, 0.85, 0.85),
    }
    tris, cols = [], []
    for n, col in faces.items():
        n = np.array(n, dtype=np.float64)
        a = np.roll(n, 1)
        b = np.cross(n, a)
        corners = [h * (n + sa * a + sb * b) for sa, sb in ((-1, -1), (1, -1), (1, 1), (-1, 1))]
        for tri in _quad(*corners):
            tris.append(tri)
            cols.append(col)
    return Scene(np.array(tris), np.array(cols), name="cube", **kw)


def occluder_scene(**kw) -> Scene:
    """A checkered floor plane partly hidden by a smaller plane floating above it."""
    tris, cols = [], []
    n, lo, size, z0 = 4, -0.5, 1.0, -0.3
    step = size / n
    for i in range(n):
        for j in range(n):
            x0, y0 = lo + i * step, lo + j * step
            col = (0.95, 0.80, 0.20) if (i + j) % 2 else (0.20, 0.35, 0.85)
            quad = _quad((x0, y0, z0), (x0 + step, y0, z0), (x0 + step, y0 + step, z0), (x0, y0 + step, z0))
            tris += quad
            cols += [col, col]
    a, z1 = 0.22, 0.15
    tris += _quad((-a, -a, z1), (a, -a, z1), (a, a, z1), (-a, a, z1))
    cols += [(0.85, 0.15, 0.15)] * 2
    return Scene(np.array(tris), np.array(cols), name="occluders", **kw)


def sphere_scene(radius: float = 0.4, n_lat: int = 8, n_lon: int = 16, **kw) -> Scene:
    """UV sphere with colour bands alternating in latitude and longitude."""
    palette = np.array([(0.9, 0.2, 0.2), (0.2, 0.7, 0.3), (0.2, 0.3, 0.9), (0.95, 0.8, 0.2)])

    def pt(i, j):
        th, ph = math.pi * i / n_lat, 2 * math.pi * j / n_lon
        return (radius * math.sin(th) * math.cos(ph), radius * math.sin(th) * math.sin(ph), radius * math.cos(th))

    tris, cols = [], []
    for i in range(n_lat):
        for j in range(n_lon):
            a, b, c, d = pt(i, j), pt(i + 1, j), pt(i + 1, j + 1), pt(i, j + 1)
            col = palette[(i // 2 + j // 4) % len(palette)]
            if i > 0:
                tris.append([a, b, d])
                cols.append(col)
            if i < n_lat - 1:
                tris.append([b, c, d])
                cols.append(col)
    return Scene(np.array(tris), np.array(cols), name="sphere", **kw)


SCENES = {"cube": cube_scene, "occluders": occluder_scene, "sphere": sphere_scene}


def make_scene(name: str, **kw) -> Scene:
    try:
        return SCENES[name](**kw)
    except KeyError:
        raise ValueError(f"unknown scene {name!r}; choose from {sorted(SCENES)}") from None


# -- rasterizer -----------------------------------------------------------------
def _shade(scene: Scene, pose: CameraPose) -> np.ndarray:
    v = scene.vertices
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    if isinstance(scene.light, str):
        l = pose.center - v.mean(axis=1)
        l /= np.linalg.norm(l, axis=1, keepdims=True)
    else:
        l = np.broadcast_to(np.asarray(scene.light, dtype=np.float64) / np.linalg.norm(scene.light), n.shape)
    lam = np.maximum(0.0, np.einsum("ij,ij->i", n, l))
    return scene.colors * np.clip(scene.ambient + (1.0 - scene.ambient) * lam, 0.0, 1.0)[:, None]


def _rasterize_once(scene: Scene, pose: CameraPose, width: int, height: int) -> tuple:
    image = np.empty((height, width, 3))
    image[:] = scene.background
    zbuf = np.full((height, width), np.inf)
    if len(scene.vertices) == 0:
        return image, zbuf
    shaded = _shade(scene, pose)
    cam = scene.vertices @ pose.R.T + pose.t  # (T, 3, 3)
    for tri, col in zip(cam, shaded):
        z = tri[:, 2]
        if np.any(z <= 1e-9):
            continue  # no near-plane clipping; such triangles are dropped
        p = tri @ pose.K.T
        uv = p[:, :2] / p[:, 2:3]
        x0 = max(0, math.ceil(uv[:, 0].min()))
        x1 = min(width - 1, math.floor(uv[:, 0].max()))
        y0 = max(0, math.ceil(uv[:, 1].min()))
        y1 = min(height - 1, math.floor(uv[:, 1].max()))
        if x0 > x1 or y0 > y1:
            continue
        (ax, ay), (bx, by), (cx, cy) = uv
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(area) < 1e-12:
            continue
        xs, ys = np.meshgrid(np.arange(x0, x1 + 1, dtype=np.float64), np.arange(y0, y1 + 1, dtype=np.float64))
        l0 = ((bx - xs) * (cy - ys) - (by - ys) * (cx - xs)) / area
        l1 = ((cx - xs) * (ay - ys) - (cy - ys) * (ax - xs)) / area
        l2 = 1.0 - l0 - l1
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        depth = 1.0 / (l0 / z[0] + l1 / z[1] + l2 / z[2])
        win = zbuf[y0:y1 + 1, x0:x1 + 1]
        hit = inside & (depth < win)
        win[hit] = depth[hit]
        image[y0:y1 + 1, x0:x1 + 1][hit] = col
    return image, zbuf


def rasterize(scene: Scene, pose: CameraPose, width: int, height: int, supersample: int = 1) -> tuple:
    """Render (image [3, H, W] in [0, 1], depth [H, W]; +inf on background).

    With ``supersample`` s > 1 the scene is drawn at s times the resolution and
    box-filtered; depth is then the nearest hit inside each pixel's block.
    """
    if supersample == 1:
        img, z = _rasterize_once(scene, pose, width, height)
        return img.transpose(2, 0, 1).copy(), z
    s = int(supersample)
    scale = np.array([[s, 0, (s - 1) / 2.0], [0, s, (s - 1) / 2.0], [0, 0, 1.0]])
    hi = CameraPose(K=scale @ pose.K, R=pose.R, t=pose.t)
    img, z = _rasterize_once(scene, hi, width * s, height * s)
    img = img.reshape(height, s, width, s, 3).mean(axis=(1, 3))
    z = z.reshape(height, s, width, s).min(axis=(1, 3))
    return img.transpose(2, 0, 1).copy(), z


# -- camera paths ---------------------------------------------------------------
def default_intrinsics(size: int, fov_deg: float = 40.0) -> np.ndarray:
    focal = 0.5 * size / math.tan(math.radians(fov_deg) / 2.0)
    return intrinsics(focal, size, size)


def generate_poses(kind: str, n: int, radius: float, look_at_point=(0.0, 0.0, 0.0), K=None,
                   up=(0.0, 0.0, 1.0), turns: float = 3.0, polar_range=(15.0, 75.0)) -> list:
    """Cameras on the northern hemisphere around ``look_at_point``, all aimed at it.

    ``hemisphere_uniform`` uses a Fibonacci lattice (uniform in height, hence
    in area); ``archimedean_spiral`` sweeps azimuth linearly with polar angle
    between ``polar_range`` degrees.
    """
    if n < 1 or radius <= 0:
        raise ValueError("need n >= 1 and radius > 0")
    target = np.asarray(look_at_point, dtype=np.float64)
    K = default_intrinsics(64) if K is None else np.asarray(K, dtype=np.float64)
    dirs = []
    if kind == "hemisphere_uniform":
        for i in range(n):
            z = (i + 0.5) / n
            r = math.sqrt(max(0.0, 1.0 - z * z))
            phi = i * GOLDEN_ANGLE
            dirs.append((r * math.cos(phi), r * math.sin(phi), z))
    elif kind == "archimedean_spiral":
        lo, hi = (math.radians(a) for a in polar_range)
        for i in range(n):
            s = i / max(n - 1, 1)
            th, phi = lo + (hi - lo) * s, 2.0 * math.pi * turns * s
            dirs.append((math.sin(th) * math.cos(phi), math.sin(th) * math.sin(phi), math.cos(th)))
    else:
        raise ValueError(f"unknown pose kind {kind!r}")
    return [look_at(target + radius * np.array(d), target, K, up) for d in dirs]


# -- dataset storage --------------------------------------------------------------
@dataclass
class Dataset:
    directory: Path
    records: list
    split: str = "train"
    meta: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def poses(self) -> list:
        return [r.pose for r in self.records]

    @property
    def image_size(self) -> int:
        return self.records[0].width

    def image(self, i: int) -> np.ndarray:
        """View ``i`` as float [3, H, W] in [0, 1]."""
        if i not in self._cache:
            self._cache[i] = read_image(self.directory / self.records[i].image)
        return self._cache[i]


def write_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: image missing")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


def write_dataset(directory, images: Sequence[np.ndarray], poses: Sequence[CameraPose], split: str = "train",
                  scene: str = "custom", bbox=None) -> Dataset:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i, (img, pose) in enumerate(zip(images, poses)):
        name = f"images/{i:04d}.png"
        write_image(directory / name, img)
        records.append(PoseRecord(name, pose, img.shape[2], img.shape[1]))
    write_poses(directory / "poses.txt", records)
    meta = {"split": split, "image_size": int(images[0].shape[1]), "scene": scene, "count": len(records)}
    if bbox is not None:
        meta["bbox"] = [list(map(float, bbox[0])), list(map(float, bbox[1]))]
    (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return Dataset(directory, records, split, meta)


def render_dataset(directory, scene: Scene, poses: Sequence[CameraPose], size: int, split: str = "train",
                   supersample: int = 2) -> Dataset:
    images = [rasterize(scene, p, size, size, supersample)[0] for p in poses]
    bbox = (scene.points.min(axis=0), scene.points.max(axis=0))
    return write_dataset(directory, images, poses, split, scene.name, bbox)


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    records = read_poses(directory / "poses.txt")
    meta_path = directory / "meta.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"{meta_path}: dataset metadata missing")
    meta = json.loads(meta_path.read_text())
    if not records:
        raise ValueError(f"{directory / 'poses.txt'}: no views")
    for r in records:
        path = directory / r.image
        if not path.is_file():
            raise FileNotFoundError(f"{path}: image listed in poses.txt is missing")
        with Image.open(path) as im:
            if im.size != (r.width, r.height):
                raise ValueError(f"{path}: size {im.size} differs from declared {(r.width, r.height)}")
    return Dataset(directory, records, meta.get("split", "train"), meta)


# -- training tuples --------------------------------------------------------------
@dataclass(frozen=True)
class TrainingTuple:
    source: int
    target0: int
    target1: int


def angle_matrix(poses: Sequence[CameraPose]) -> np.ndarray:
    axes = np.array([p.optical_axis for p in poses])
    return np.arccos(np.clip(axes @ axes.T, -1.0, 1.0))


def nearest_candidates(angles: np.ndarray, target: int, exclude=(), k: int = TOP_K) -> list:
    """Indices of the k views closest in view angle to ``target``; ties by index."""
    order = sorted((angles[target, i], i) for i in range(len(angles)) if i != target and i not in exclude)
    return [i for _, i in order[:k]]


def sample_tuple(views, rng: np.random.Generator, angles: Optional[np.ndarray] = None) -> TrainingTuple:
    """Two distinct random targets and a source among target0's five nearest views."""
    poses = views.poses if isinstance(views, Dataset) else list(views)
    n = len(poses)
    if n < TOP_K + 2:
        raise ValueError(f"need at least {TOP_K + 2} views to sample a training tuple, got {n}")
    if angles is None:
        angles = angle_matrix(poses)
    t0, t1 = (int(i) for i in rng.choice(n, size=2, replace=False))
    cand = nearest_candidates(angles, t0, exclude=(t1,))
    return TrainingTuple(cand[int(rng.integers(len(cand)))], t0, t1)
