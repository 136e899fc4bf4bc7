"""Pinhole camera model: world <-> screen mappings and pose utilities.

Conventions: the camera looks down +z of its own frame, x points right and y
points down the image. Screen coordinates are in pixels with the origin at the
centre of the top-left pixel, so pixel (i, j) covers [i - 0.5, i + 0.5].
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

PLANE_EPS = 1e-12


class PointOnCameraPlane(ValueError):
    pass


class ScreenPoint(NamedTuple):
    u: np.ndarray
    v: np.ndarray
    d: np.ndarray


@dataclass(frozen=True)
class CameraPose:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "K", np.asarray(self.K, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @property
    def extrinsic(self) -> np.ndarray:
        """E = [R | t], 3x4."""
        return np.hstack([self.R, self.t[:, None]])

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.R.T @ self.t

    @property
    def optical_axis(self) -> np.ndarray:
        return self.R.T @ np.array([0.0, 0.0, 1.0])

    def check(self, tol: float = 1e-9) -> None:
        """Raise if R is not a proper rotation or K is not a valid intrinsic matrix."""
        if np.abs(self.R.T @ self.R - np.eye(3)).max() >= tol or np.linalg.det(self.R) <= 0:
            raise ValueError("R is not a proper rotation")
        if np.abs(np.tril(self.K, -1)).max() > 0 or self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError("K must be upper triangular with positive focal lengths")


def intrinsics(focal: float, width: int, height: int) -> np.ndarray:
    """Square-pixel K with the principal point at the image centre."""
    return np.array([[focal, 0.0, (width - 1) / 2.0],
                     [0.0, focal, (height - 1) / 2.0],
                     [0.0, 0.0, 1.0]])


def project_points(pose: CameraPose, x) -> tuple:
    """Vectorised projection; returns ((..., 3) array of (u, v, d), valid mask).

    Points on the camera plane come back with ``valid`` False and NaN screen
    coordinates; callers also have to reject d <= 0 themselves.
    """
    x = np.asarray(x, dtype=np.float64)
    p = (x @ pose.R.T + pose.t) @ pose.K.T
    z = p[..., 2]
    valid = np.abs(z) >= PLANE_EPS
    safe = np.where(valid, z, 1.0)
    uv = p[..., :2] / safe[..., None]
    uv[~valid] = np.nan
    return np.concatenate([uv, z[..., None]], axis=-1), valid


def project(pose: CameraPose, x) -> ScreenPoint:
    """Map world point(s) to (u, v, d): p = K(Rx + t), u = p.x/p.z, v = p.y/p.z, d = p.z."""
    uvd, valid = project_points(pose, x)
    if not np.all(valid):
        raise PointOnCameraPlane("point on camera plane")
    return ScreenPoint(uvd[..., 0], uvd[..., 1], uvd[..., 2])


def unproject(pose: CameraPose, s) -> np.ndarray:
    """Inverse of :func:`project`: x = R^T (K^-1 [u d, v d, d] - t)."""
    u, v, d = (np.asarray(c, dtype=np.float64) for c in s)
    if np.any(d == 0):
        raise ValueError("cannot unproject a screen point with zero depth")
    hom = np.stack([u * d, v * d, d], axis=-1)
    cam = np.linalg.solve(pose.K, hom.reshape(-1, 3).T).T.reshape(hom.shape)
    return (cam - pose.t) @ pose.R


def view_direction_angle(a: CameraPose, b: CameraPose) -> float:
    """Angle in radians between the optical axes of two cameras."""
    c = float(np.dot(a.optical_axis, b.optical_axis))
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def look_at(center, target, K, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Pose of a camera at ``center`` whose optical axis points at ``target``."""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("degenerate look-at: camera centre coincides with target")
    forward /= norm
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-6:
        # looking straight along `up`; any perpendicular reference works
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return CameraPose(K=K, R=R, t=-R @ center)


# -- pose file ----------------------------------------------------------------
# One JSON object per line with keys image, K, R, t (row-major lists), width, height.

POSE_FIELDS = ("image", "K", "R", "t", "width", "height")


@dataclass
class PoseRecord:
    image: str
    pose: CameraPose
    width: int
    height: int


def write_poses(path, records: Sequence[PoseRecord]) -> None:
    lines = []
    for r in records:
        obj = {
            "image": r.image,
            "K": r.pose.K.reshape(-1).tolist(),
            "R": r.pose.R.reshape(-1).tolist(),
            "t": r.pose.t.tolist(),
            "width": int(r.width),
            "height": int(r.height),
        }
        lines.append(json.dumps(obj))
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: pose file missing")
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            missing = [k for k in POSE_FIELDS if k not in obj]
            if missing:
                raise ValueError(f"missing fields {missing}")
            pose = CameraPose(K=obj["K"], R=obj["R"], t=obj["t"])
        except (ValueError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed pose record ({exc})") from exc
        records.append(PoseRecord(obj["image"], pose, int(obj["width"]), int(obj["height"])))
    return records


def pose_from_extrinsic(K, E: Optional[np.ndarray]) -> CameraPose:
    E = np.asarray(E, dtype=np.float64)
    return CameraPose(K=K, R=E[:, :3], t=E[:, 3])
