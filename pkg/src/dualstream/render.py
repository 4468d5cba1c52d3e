"""Point-cloud virtual-view rendering and egocentric sequence generation.

Views are 7-channel images (3 RGB, 1 depth, 3 world-xyz) produced by
z-tested point splatting.  Static views are orthographic and axis-aligned;
the dynamic view is a pinhole camera at the wrist pose, optionally jittered
so end-effector projections vary across frames.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import numcore
from .camgeo import CameraModel, check_rigid, look_at_pose
from .errors import FormatError, FrameError, ShapeError


@dataclass
class ColoredCloud:
    points: np.ndarray  # K x 3
    colors: np.ndarray  # K x 3 in [0, 1]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.colors = np.clip(np.asarray(self.colors, dtype=np.float64), 0.0, 1.0)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ShapeError(f"points must be Kx3, got {self.points.shape}")
        if self.colors.shape != self.points.shape:
            raise ShapeError("colors shape must match points")
        if not np.isfinite(self.points).all():
            raise FormatError("cloud coordinates must be finite")

    def save(self, path_prefix: str):
        numcore.save_tensor(path_prefix + "_points", self.points)
        numcore.save_tensor(path_prefix + "_colors", self.colors)

    @staticmethod
    def load(path_prefix: str) -> "ColoredCloud":
        return ColoredCloud(
            numcore.load_tensor(path_prefix + "_points").numpy(),
            numcore.load_tensor(path_prefix + "_colors").numpy())


@dataclass
class ViewBundle:
    """7 x H x W image (RGB, depth, world xyz) plus its camera and validity."""

    image: np.ndarray
    camera: CameraModel
    valid: np.ndarray

    def __post_init__(self):
        h, w = self.camera.resolution
        if self.image.shape != (7, h, w):
            raise ShapeError(f"image must be 7x{h}x{w}, got {self.image.shape}")
        if self.valid.shape != (h, w):
            raise ShapeError("valid mask shape mismatch")

    @property
    def rgb(self):
        return self.image[:3]

    @property
    def depth(self):
        return self.image[3]

    @property
    def xyz(self):
        return self.image[4:]


@dataclass
class EgoSequence:
    frames: list            # T ViewBundles
    labels: np.ndarray      # T x 2 end-effector pixels
    ee_world: np.ndarray    # T x 3
    visible: np.ndarray     # T bool


def render_view(cloud: ColoredCloud, camera: CameraModel,
                splat_radius_px: float = 1.0) -> ViewBundle:
    """Splat cloud points onto the image with a per-pixel nearest-depth test.

    Each point covers the integer pixels within splat_radius_px of its
    projection; only the depth-test winner contributes to any channel.
    Deterministic: ties resolved by lower point index.
    """
    if len(cloud.points) == 0:
        raise FormatError("empty cloud")
    h, w = camera.resolution
    uv, z, behind = camera.project(cloud.points)
    keep = ~behind & np.isfinite(uv).all(axis=1)
    idx = np.flatnonzero(keep)
    uv, z = uv[idx], z[idx]

    r = float(splat_radius_px)
    ri = int(np.floor(r))
    offs = [(du, dv) for dv in range(-ri, ri + 1) for du in range(-ri, ri + 1)]

    pix_u, pix_v, depths, pids = [], [], [], []
    for du, dv in offs:
        pu = np.round(uv[:, 0]).astype(int) + du
        pv = np.round(uv[:, 1]).astype(int) + dv
        dist2 = (pu - uv[:, 0]) ** 2 + (pv - uv[:, 1]) ** 2
        ok = (dist2 <= r * r) & (pu >= 0) & (pu < w) & (pv >= 0) & (pv < h)
        pix_u.append(pu[ok])
        pix_v.append(pv[ok])
        depths.append(z[ok])
        pids.append(idx[ok])
    if not pix_u or sum(len(p) for p in pix_u) == 0:
        image = np.zeros((7, h, w))
        return ViewBundle(image=image, camera=camera,
                          valid=np.zeros((h, w), dtype=bool))
    pu = np.concatenate(pix_u)
    pv = np.concatenate(pix_v)
    d = np.concatenate(depths)
    pid = np.concatenate(pids)
    lin = pv * w + pu
    # winner per pixel: smallest depth, then smallest point index
    order = np.lexsort((pid, d, lin))
    lin_s = lin[order]
    first = np.ones(len(lin_s), dtype=bool)
    first[1:] = lin_s[1:] != lin_s[:-1]
    win = order[first]

    image = np.zeros((7, h, w))
    valid = np.zeros((h, w), dtype=bool)
    rows, cols = pv[win], pu[win]
    winners = pid[win]
    valid[rows, cols] = True
    image[0, rows, cols] = cloud.colors[winners, 0]
    image[1, rows, cols] = cloud.colors[winners, 1]
    image[2, rows, cols] = cloud.colors[winners, 2]
    image[3, rows, cols] = d[win]
    image[4, rows, cols] = cloud.points[winners, 0]
    image[5, rows, cols] = cloud.points[winners, 1]
    image[6, rows, cols] = cloud.points[winners, 2]
    return ViewBundle(image=image, camera=camera, valid=valid)


def make_static_cameras(workspace_bounds, resolution: int):
    """Three axis-aligned orthographic cameras (top, front, right).

    Scales are chosen so the workspace box fills the image; the eye plane
    sits outside the box so all depths are positive.
    """
    lo = np.asarray(workspace_bounds[0], dtype=np.float64)
    hi = np.asarray(workspace_bounds[1], dtype=np.float64)
    ext = hi - lo
    if np.any(ext <= 0):
        raise FormatError(f"degenerate workspace bounds {workspace_bounds}")
    center = (lo + hi) / 2.0
    diag = float(np.linalg.norm(ext))
    res = int(resolution)
    c = (res - 1) / 2.0

    # (forward, up, in-plane world axes) per view
    specs = {
        "top": (np.array([0.0, 0.0, -1.0]), np.array([0.0, 1.0, 0.0])),
        "front": (np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0])),
        "right": (np.array([-1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])),
    }
    cams = {}
    for name, (fwd, up) in specs.items():
        eye = center - fwd * diag
        pose = look_at_pose(eye, fwd, up)
        # image-plane extents of the box in this view
        pts = np.array([[x, y, zz] for x in (lo[0], hi[0])
                        for y in (lo[1], hi[1]) for zz in (lo[2], hi[2])])
        pc = pts @ pose[:3, :3].T + pose[:3, 3]
        span_x = pc[:, 0].max() - pc[:, 0].min()
        span_y = pc[:, 1].max() - pc[:, 1].min()
        cams[name] = CameraModel(
            kind="orthographic",
            fx=(res - 1) / span_x, fy=(res - 1) / span_y,
            cx=c, cy=c, pose=pose, resolution=(res, res))
    return [cams["top"], cams["front"], cams["right"]]


def make_dynamic_camera(wrist_pose: np.ndarray, fov_deg: float, resolution: int,
                        jitter: float = 0.0,
                        rng: np.random.Generator | None = None) -> CameraModel:
    """Pinhole camera at the wrist pose (camera->world), with optional jitter.

    jitter scales a uniform positional offset (up to 2 cm) and an optical-axis
    tilt (up to 5 degrees) so end-effector projections vary across frames.
    """
    wrist_pose = check_rigid(wrist_pose)
    cam_to_world = wrist_pose.copy()
    if jitter > 0.0:
        if rng is None:
            rng = np.random.default_rng(0)
        offset = rng.uniform(-0.02, 0.02, size=3) * jitter
        angles = rng.uniform(-np.deg2rad(5.0), np.deg2rad(5.0), size=2) * jitter
        rx, ry = angles
        tilt_x = np.array([[1, 0, 0],
                           [0, np.cos(rx), -np.sin(rx)],
                           [0, np.sin(rx), np.cos(rx)]])
        tilt_y = np.array([[np.cos(ry), 0, np.sin(ry)],
                           [0, 1, 0],
                           [-np.sin(ry), 0, np.cos(ry)]])
        cam_to_world[:3, :3] = cam_to_world[:3, :3] @ (tilt_x @ tilt_y)
        cam_to_world[:3, 3] = cam_to_world[:3, 3] + offset
    pose = np.eye(4)
    r = cam_to_world[:3, :3]
    pose[:3, :3] = r.T
    pose[:3, 3] = -r.T @ cam_to_world[:3, 3]
    res = int(resolution)
    f = (res / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
    c = (res - 1) / 2.0
    return CameraModel(kind="pinhole", fx=f, fy=f, cx=c, cy=c,
                       pose=pose, resolution=(res, res))


@dataclass
class EgoRenderConfig:
    resolution: int = 224
    fov_deg: float = 90.0
    jitter: float = 1.0
    splat_radius_px: float = 1.0
    ee_marker: bool = True
    ee_marker_radius: float = 0.02
    ee_marker_color: tuple = (1.0, 0.1, 0.9)
    ee_marker_points: int = 64


def _marker_cloud(center: np.ndarray, cfg: EgoRenderConfig,
                  rng: np.random.Generator) -> ColoredCloud:
    # small sphere of points marking the end-effector in rendered frames
    d = rng.normal(size=(cfg.ee_marker_points, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    radii = cfg.ee_marker_radius * rng.uniform(0.2, 1.0, cfg.ee_marker_points) ** (1 / 3)
    pts = center + d * radii[:, None]
    colors = np.tile(cfg.ee_marker_color, (cfg.ee_marker_points, 1))
    return ColoredCloud(pts, colors)


def render_ego_sequence(trajectory, cloud: ColoredCloud,
                        cfg: EgoRenderConfig | None = None,
                        seed: int = 0) -> EgoSequence:
    """Render one dynamic-camera frame per trajectory step with EE labels.

    trajectory is a sequence of (wrist_pose 4x4 camera->world, ee_world 3).
    visible[t] is False when the end-effector projects off-image or behind
    the camera; labels then hold NaN.
    """
    if len(trajectory) < 1:
        raise FormatError("trajectory must have at least one step")
    cfg = cfg or EgoRenderConfig()
    rng = np.random.default_rng(seed)
    frames, labels, ees, vis = [], [], [], []
    for wrist_pose, ee in trajectory:
        cam = make_dynamic_camera(wrist_pose, cfg.fov_deg, cfg.resolution,
                                  cfg.jitter, rng)
        pts, cols = cloud.points, cloud.colors
        if cfg.ee_marker:
            marker = _marker_cloud(np.asarray(ee, dtype=np.float64), cfg, rng)
            pts = np.vstack([pts, marker.points])
            cols = np.vstack([cols, marker.colors])
        frames.append(render_view(ColoredCloud(pts, cols), cam,
                                  cfg.splat_radius_px))
        uv, z, behind = cam.project(np.asarray(ee, dtype=np.float64))
        visible = (not behind) and bool(cam.in_image(uv)[0])
        labels.append(uv if visible else np.array([np.nan, np.nan]))
        ees.append(np.asarray(ee, dtype=np.float64))
        vis.append(visible)
    # labels are stored at image precision; a rigid zero-jitter wrist camera
    # then yields bitwise-constant pixel labels instead of f64 rounding noise
    return EgoSequence(frames=frames,
                       labels=np.asarray(labels, dtype=np.float32),
                       ee_world=np.asarray(ees),
                       visible=np.asarray(vis, dtype=bool))


def saliency_target(label_uv, resolution: tuple[int, int],
                    sigma_px: float) -> np.ndarray:
    """Normalized isotropic Gaussian centered at the label pixel."""
    if sigma_px <= 0:
        raise FormatError("sigma_px must be positive")
    h, w = resolution
    u0, v0 = float(label_uv[0]), float(label_uv[1])
    if not (0 <= u0 <= w - 1 and 0 <= v0 <= h - 1):
        raise FormatError(f"label {label_uv} off-image for {resolution}")
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    g = np.exp(-((u - u0) ** 2 + (v - v0) ** 2) / (2.0 * sigma_px ** 2))
    return g / g.sum()


# -- egocentric dataset layout ------------------------------------------------

def save_ego_sequence(dirpath: str, seq: EgoSequence):
    os.makedirs(dirpath, exist_ok=True)
    for t, fb in enumerate(seq.frames):
        numcore.save_tensor(os.path.join(dirpath, f"frame_{t}"), fb.image)
        fb.camera.save(os.path.join(dirpath, f"camera_{t}.json"))
    with open(os.path.join(dirpath, "labels.json"), "w") as fh:
        json.dump({
            "pixels": [[None, None] if not v else [float(x) for x in l]
                       for l, v in zip(seq.labels, seq.visible)],
            "world": seq.ee_world.tolist(),
            "visible": [bool(v) for v in seq.visible],
        }, fh)


def load_ego_sequence(dirpath: str) -> EgoSequence:
    with open(os.path.join(dirpath, "labels.json")) as fh:
        meta = json.load(fh)
    t = len(meta["visible"])
    frames = []
    for i in range(t):
        image = numcore.load_tensor(os.path.join(dirpath, f"frame_{i}")).numpy()
        cam = CameraModel.load(os.path.join(dirpath, f"camera_{i}.json"))
        depth = image[3]
        frames.append(ViewBundle(image=image, camera=cam, valid=depth != 0))
    labels = np.array([[np.nan, np.nan] if p[0] is None else p
                       for p in meta["pixels"]], dtype=np.float64)
    return EgoSequence(frames=frames, labels=labels,
                       ee_world=np.asarray(meta["world"], dtype=np.float64),
                       visible=np.asarray(meta["visible"], dtype=bool))
