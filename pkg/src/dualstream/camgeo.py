"""Camera models, projection/unprojection, and rigid frame transforms.

Pixel convention: uv are continuous coordinates with pixel centers at
integer values; (0, 0) is the top-left pixel center, u runs along image
columns (width) and v along rows (height).

Depth is z-depth: the camera-frame z coordinate for pinhole cameras, the
signed distance along the view axis for orthographic cameras (negative
orthographic depths are valid).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import FrameError, ShapeError

_ROT_TOL = 1e-6


def check_rigid(pose: np.ndarray, tol: float = _ROT_TOL) -> np.ndarray:
    """Validate a 4x4 rigid transform (orthonormal rotation, det +1)."""
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise FrameError(f"pose must be 4x4, got {pose.shape}")
    r = pose[:3, :3]
    if not np.allclose(r @ r.T, np.eye(3), atol=tol):
        raise FrameError("pose rotation block is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise FrameError("pose rotation determinant is not +1")
    if not np.allclose(pose[3], [0, 0, 0, 1], atol=tol):
        raise FrameError("pose bottom row must be [0,0,0,1]")
    return pose


@dataclass
class CameraModel:
    """Pinhole or orthographic camera with a world->camera rigid pose.

    For pinhole cameras fx/fy are focal lengths in pixels; for orthographic
    cameras they are scales in pixels per world unit.
    """

    kind: str                       # "pinhole" | "orthographic"
    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray                # 4x4 world -> camera
    resolution: tuple[int, int]     # (H, W)

    def __post_init__(self):
        if self.kind not in ("pinhole", "orthographic"):
            raise FrameError(f"unknown camera kind {self.kind!r}")
        if self.fx <= 0 or self.fy <= 0:
            raise FrameError("camera scales must be positive")
        h, w = self.resolution
        if h <= 0 or w <= 0:
            raise FrameError("resolution must be positive")
        self.pose = check_rigid(self.pose)
        self.resolution = (int(h), int(w))

    # -- frame transforms ---------------------------------------------------

    def world_to_camera(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return pts @ self.pose[:3, :3].T + self.pose[:3, 3]

    def camera_to_world(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        r, t = self.pose[:3, :3], self.pose[:3, 3]
        return (pts - t) @ r

    # -- projection ---------------------------------------------------------

    def project(self, pts_world: np.ndarray):
        """Project world points; returns (uv, depth, behind) arrays.

        behind is only raised for pinhole cameras (z <= 0); orthographic
        depth is signed and always projectable.
        """
        pts_world = np.asarray(pts_world, dtype=np.float64)
        single = pts_world.ndim == 1
        pc = self.world_to_camera(pts_world)
        if self.kind == "pinhole":
            z = pc[:, 2]
            behind = z <= 0
            zsafe = np.where(behind, 1.0, z)
            u = self.fx * pc[:, 0] / zsafe + self.cx
            v = self.fy * pc[:, 1] / zsafe + self.cy
            uv = np.stack([u, v], axis=1)
            uv[behind] = np.nan
        else:
            u = self.fx * pc[:, 0] + self.cx
            v = self.fy * pc[:, 1] + self.cy
            uv = np.stack([u, v], axis=1)
            z = pc[:, 2]
            behind = np.zeros(len(pc), dtype=bool)
        if single:
            return uv[0], float(z[0]), bool(behind[0])
        return uv, z, behind

    def in_image(self, uv: np.ndarray) -> np.ndarray:
        uv = np.atleast_2d(uv)
        h, w = self.resolution
        ok = np.isfinite(uv).all(axis=1)
        ok &= (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1)
        ok &= (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1)
        return ok

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        if self.kind == "pinhole":
            intr = {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}
        else:
            intr = {"sx": self.fx, "sy": self.fy, "cx": self.cx, "cy": self.cy}
        return {"kind": self.kind, "intrinsics": intr,
                "pose": [float(x) for x in self.pose.reshape(-1)],
                "resolution": list(self.resolution)}

    @staticmethod
    def from_dict(d: dict) -> "CameraModel":
        intr = d["intrinsics"]
        fx = intr.get("fx", intr.get("sx"))
        fy = intr.get("fy", intr.get("sy"))
        return CameraModel(kind=d["kind"], fx=fx, fy=fy,
                           cx=intr["cx"], cy=intr["cy"],
                           pose=np.asarray(d["pose"], dtype=np.float64).reshape(4, 4),
                           resolution=tuple(d["resolution"]))

    def save(self, path: str):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @staticmethod
    def load(path: str) -> "CameraModel":
        with open(path) as fh:
            return CameraModel.from_dict(json.load(fh))


@dataclass
class PointMap:
    """Per-pixel 3D points with a validity mask.

    Invalid pixels carry NaN coordinates and are excluded from reductions.
    """

    points: np.ndarray   # H x W x 3
    valid: np.ndarray    # H x W bool
    frame: str           # "camera" | "world"

    def __post_init__(self):
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise ShapeError(f"points must be HxWx3, got {self.points.shape}")
        if self.valid.shape != self.points.shape[:2]:
            raise ShapeError("valid mask shape mismatch")
        if self.frame not in ("camera", "world"):
            raise FrameError(f"unknown frame {self.frame!r}")


def unproject(depth: np.ndarray, camera: CameraModel) -> PointMap:
    """Lift a depth map to a camera-frame PointMap.

    Zero or NaN depth marks invalid pixels.
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = camera.resolution
    if depth.shape != (h, w):
        raise ShapeError(f"depth {depth.shape} does not match resolution {(h, w)}")
    valid = np.isfinite(depth) & (depth != 0)
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    if camera.kind == "pinhole":
        x = (u - camera.cx) / camera.fx * depth
        y = (v - camera.cy) / camera.fy * depth
    else:
        x = (u - camera.cx) / camera.fx
        y = (v - camera.cy) / camera.fy
    pts = np.stack([x, y, depth], axis=2)
    pts[~valid] = np.nan
    return PointMap(points=pts, valid=valid, frame="camera")


def to_world(pm: PointMap, camera: CameraModel) -> PointMap:
    """Apply the inverse camera pose to every valid point."""
    if pm.frame != "camera":
        raise FrameError(f"to_world expects a camera-frame PointMap, got {pm.frame}")
    h, w, _ = pm.points.shape
    flat = pm.points.reshape(-1, 3)
    out = np.full_like(flat, np.nan)
    mask = pm.valid.reshape(-1)
    out[mask] = camera.camera_to_world(flat[mask])
    return PointMap(points=out.reshape(h, w, 3), valid=pm.valid.copy(), frame="world")


def to_camera(pm: PointMap, camera: CameraModel) -> PointMap:
    """Apply the camera pose to every valid world point."""
    if pm.frame != "world":
        raise FrameError(f"to_camera expects a world-frame PointMap, got {pm.frame}")
    h, w, _ = pm.points.shape
    flat = pm.points.reshape(-1, 3)
    out = np.full_like(flat, np.nan)
    mask = pm.valid.reshape(-1)
    out[mask] = camera.world_to_camera(flat[mask])
    return PointMap(points=out.reshape(h, w, 3), valid=pm.valid.copy(), frame="camera")


def project(pts_world: np.ndarray, camera: CameraModel):
    """Module-level alias for CameraModel.project."""
    return camera.project(pts_world)


def look_at_pose(eye: np.ndarray, forward: np.ndarray, up: np.ndarray) -> np.ndarray:
    """World->camera pose for a camera at eye looking along forward.

    Camera axes: x = right, y = down, z = forward (view direction).
    """
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    u = np.asarray(up, dtype=np.float64)
    r = np.cross(f, u)
    if np.linalg.norm(r) < 1e-9:
        raise FrameError("up vector parallel to view direction")
    r = r / np.linalg.norm(r)
    d = np.cross(f, r)
    rot = np.stack([r, d, f])  # rows: world axes of camera x, y, z
    pose = np.eye(4)
    pose[:3, :3] = rot
    pose[:3, 3] = -rot @ np.asarray(eye, dtype=np.float64)
    return pose
