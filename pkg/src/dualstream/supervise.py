"""3D supervision generation from multi-view depth.

From per-view depth, confidence, and cameras this module extracts
geometrically consistent keypoint bundles: co-visible world points from the
first view, pruned by 3D non-maximum suppression on confidence, then tracked
into every view.  A synthetic ray-casting oracle stands in for foundation
model outputs when none exist on disk.

View order is taken as given by the input directory (view_0 is "first").
Depth maps use the z-depth convention throughout.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import numcore
from .camgeo import CameraModel, PointMap, to_world, unproject
from .errors import FormatError, ShapeError


@dataclass
class SupervisionConfig:
    m: int = 300
    nms_radius: float = 0.02      # world units; not a published value
    covis_depth_eps: float = 0.01  # occlusion tolerance, world units
    min_confidence: float = 0.1    # relative to the per-view max

    def __post_init__(self):
        if self.m < 1:
            raise FormatError("m must be >= 1")
        if self.nms_radius <= 0 or self.covis_depth_eps <= 0:
            raise FormatError("nms_radius and covis_depth_eps must be positive")


@dataclass
class ConsistentKeypointBundle:
    """M world points with per-view pixel tracks and confidences."""

    world_points: np.ndarray   # M x 3
    tracks: np.ndarray         # M x N x 2 (u, v)
    confidences: np.ndarray    # M, sorted non-increasing
    view_count: int
    dropped: int = 0           # points failing the occlusion re-check

    def __post_init__(self):
        m = len(self.world_points)
        if self.tracks.shape != (m, self.view_count, 2):
            raise ShapeError(f"tracks shape {self.tracks.shape} inconsistent")
        if len(self.confidences) != m:
            raise ShapeError("confidences length mismatch")
        if m > 1 and np.any(np.diff(self.confidences) > 1e-12):
            raise FormatError("confidences must be sorted non-increasing")

    def save(self, path: str):
        os.makedirs(path, exist_ok=True)
        with open(os.path.join(path, "bundle.json"), "w") as fh:
            json.dump({"m": len(self.world_points), "view_count": self.view_count,
                       "dropped": self.dropped}, fh)
        numcore.save_tensor(os.path.join(path, "world_points"), self.world_points)
        numcore.save_tensor(os.path.join(path, "tracks"), self.tracks)
        numcore.save_tensor(os.path.join(path, "confidences"), self.confidences)

    @staticmethod
    def load(path: str) -> "ConsistentKeypointBundle":
        with open(os.path.join(path, "bundle.json")) as fh:
            head = json.load(fh)
        return ConsistentKeypointBundle(
            world_points=numcore.load_tensor(os.path.join(path, "world_points")).numpy(),
            tracks=numcore.load_tensor(os.path.join(path, "tracks")).numpy(),
            confidences=numcore.load_tensor(os.path.join(path, "confidences")).numpy(),
            view_count=head["view_count"], dropped=head.get("dropped", 0))


# -- foundation-output directory format --------------------------------------

def write_foundation_outputs(path: str, views):
    """Write (depth, confidence, camera) triples in the documented layout."""
    os.makedirs(path, exist_ok=True)
    for j, (depth, conf, cam) in enumerate(views):
        vdir = os.path.join(path, f"view_{j}")
        os.makedirs(vdir, exist_ok=True)
        numcore.save_tensor(os.path.join(vdir, "depth"), np.asarray(depth, dtype=np.float64))
        numcore.save_tensor(os.path.join(vdir, "conf"), np.asarray(conf, dtype=np.float64))
        cam.save(os.path.join(vdir, "camera.json"))


def ingest_foundation_outputs(path: str):
    """Read per-view (depth, confidence, CameraModel) triples from a directory."""
    if not os.path.isdir(path):
        raise FormatError(f"not a directory: {path}")
    names = sorted((n for n in os.listdir(path) if n.startswith("view_")),
                   key=lambda n: int(n.split("_")[1]))
    if not names:
        raise FormatError(f"no view_* entries in {path}")
    views = []
    for n in names:
        vdir = os.path.join(path, n)
        for fname in ("depth.bin", "depth.json", "conf.bin", "conf.json", "camera.json"):
            if not os.path.exists(os.path.join(vdir, fname)):
                raise FormatError(f"missing {fname} in {vdir}")
        depth = numcore.load_tensor(os.path.join(vdir, "depth")).numpy()
        conf = numcore.load_tensor(os.path.join(vdir, "conf")).numpy()
        cam = CameraModel.load(os.path.join(vdir, "camera.json"))
        if depth.shape != conf.shape:
            raise FormatError(f"depth/conf shape mismatch in {vdir}")
        if depth.shape != cam.resolution:
            raise FormatError(f"map resolution {depth.shape} != camera {cam.resolution}")
        views.append((depth, conf, cam))
    return views


# -- co-visibility ------------------------------------------------------------

def _depth_map_of(pm_world: PointMap, camera: CameraModel) -> np.ndarray:
    """Per-pixel camera depth recovered by projecting the view's own points."""
    h, w, _ = pm_world.points.shape
    depth = np.zeros((h, w))
    flat = pm_world.points.reshape(-1, 3)
    mask = pm_world.valid.reshape(-1)
    if mask.any():
        _, z, _ = camera.project(flat[mask])
        d = depth.reshape(-1)
        d[mask] = z
    return depth


def covisible_mask(pointmaps_world, cameras, eps: float) -> np.ndarray:
    """Boolean mask over first-view pixels whose world point is visible in all views.

    A pixel passes iff its world point projects inside every other image at a
    valid pixel whose rendered depth differs by <= eps (nearest-pixel lookup).
    """
    pm0 = pointmaps_world[0]
    if pm0.frame != "world":
        raise FormatError("pointmaps must be in the world frame")
    mask = pm0.valid.copy()
    if len(cameras) == 1:
        return mask
    flat = pm0.points.reshape(-1, 3)
    valid0 = pm0.valid.reshape(-1)
    idx = np.flatnonzero(valid0)
    pts = flat[idx]
    keep = np.ones(len(idx), dtype=bool)
    for j in range(1, len(cameras)):
        cam = cameras[j]
        depth_j = _depth_map_of(pointmaps_world[j], cam)
        valid_j = pointmaps_world[j].valid
        uv, z, behind = cam.project(pts)
        h, w = cam.resolution
        ru = np.round(uv[:, 0]).astype(int)
        rv = np.round(uv[:, 1]).astype(int)
        inside = ~behind & np.isfinite(uv).all(axis=1)
        inside &= (ru >= 0) & (ru < w) & (rv >= 0) & (rv < h)
        ok = np.zeros(len(idx), dtype=bool)
        ii = np.flatnonzero(inside)
        if len(ii):
            sampled = depth_j[rv[ii], ru[ii]]
            vj = valid_j[rv[ii], ru[ii]]
            ok[ii] = vj & (np.abs(z[ii] - sampled) <= eps)
        keep &= ok
    out = np.zeros_like(mask)
    out.reshape(-1)[idx[keep]] = True
    return out


def nms_select(points: np.ndarray, confidences: np.ndarray,
               radius: float, m: int) -> np.ndarray:
    """Greedy confidence-ordered 3D NMS; returns kept indices (original order ids).

    Points are visited in non-increasing confidence (ties by lower index);
    a point is kept iff its distance to every kept point exceeds radius.
    """
    points = np.asarray(points, dtype=np.float64)
    confidences = np.asarray(confidences, dtype=np.float64)
    if len(points) != len(confidences):
        raise ShapeError("points/confidences length mismatch")
    if not np.isfinite(points).all():
        raise FormatError("points must be finite")
    order = np.lexsort((np.arange(len(points)), -confidences))
    kept: list[int] = []
    kept_pts = np.empty((0, 3))
    for i in order:
        if kept_pts.shape[0]:
            d2 = ((kept_pts - points[i]) ** 2).sum(axis=1)
            if (d2 <= radius * radius).any():
                continue
        kept.append(int(i))
        kept_pts = np.vstack([kept_pts, points[i]])
        if len(kept) >= m:
            break
    return np.asarray(kept, dtype=int)


def track_keypoints(points: np.ndarray, confidences: np.ndarray, cameras,
                    depths, eps: float) -> ConsistentKeypointBundle:
    """Project selected world points into every view; drop occluded ones.

    depths are the per-view rendered depth maps used for the occlusion
    re-check (guards eps boundary cases at covisibility time).
    """
    n = len(cameras)
    points = np.asarray(points, dtype=np.float64)
    confidences = np.asarray(confidences, dtype=np.float64)
    order = np.lexsort((np.arange(len(points)), -confidences))
    points, confidences = points[order], confidences[order]
    tracks = np.zeros((len(points), n, 2))
    ok = np.ones(len(points), dtype=bool)
    for j, cam in enumerate(cameras):
        uv, z, behind = cam.project(points)
        h, w = cam.resolution
        ru = np.clip(np.round(np.nan_to_num(uv[:, 0], nan=-1)), -1, w).astype(int)
        rv = np.clip(np.round(np.nan_to_num(uv[:, 1], nan=-1)), -1, h).astype(int)
        inside = ~behind & np.isfinite(uv).all(axis=1)
        inside &= (ru >= 0) & (ru < w) & (rv >= 0) & (rv < h)
        depth_j = np.asarray(depths[j])
        vis = inside.copy()
        ii = np.flatnonzero(inside)
        if len(ii):
            vis[ii] = np.abs(z[ii] - depth_j[rv[ii], ru[ii]]) <= eps
        ok &= vis
        tracks[:, j, :] = np.nan_to_num(uv, nan=-1.0)
    return ConsistentKeypointBundle(
        world_points=points[ok], tracks=tracks[ok],
        confidences=confidences[ok], view_count=n,
        dropped=int((~ok).sum()))


def generate_bundle(views, cfg: SupervisionConfig) -> ConsistentKeypointBundle:
    """Full pipeline: covisibility -> confidence threshold -> NMS -> tracking."""
    depths = [v[0] for v in views]
    confs = [v[1] for v in views]
    cameras = [v[2] for v in views]
    pms = [to_world(unproject(d, c), c) for d, c in zip(depths, cameras)]
    mask = covisible_mask(pms, cameras, cfg.covis_depth_eps)
    conf0 = confs[0]
    mask &= conf0 >= cfg.min_confidence * max(conf0.max(), 1e-12)
    idx = np.flatnonzero(mask.reshape(-1))
    pts = pms[0].points.reshape(-1, 3)[idx]
    cvals = conf0.reshape(-1)[idx]
    keep = nms_select(pts, cvals, cfg.nms_radius, cfg.m)
    return track_keypoints(pts[keep], cvals[keep], cameras, depths,
                           cfg.covis_depth_eps)


# -- synthetic scene oracle ---------------------------------------------------

@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)


@dataclass
class SceneSpec:
    boxes: list = field(default_factory=list)
    spheres: list = field(default_factory=list)

    def primitives(self):
        return list(self.boxes) + list(self.spheres)


def _ray_box(origins, dirs, lo, hi, tmin=1e-9):
    """Slab-method ray/AABB intersection; returns hit t (inf on miss)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    tlo = np.minimum(t1, t2)
    thi = np.maximum(t1, t2)
    # zero direction components: inside slab -> (-inf, inf), else miss
    para = dirs == 0
    inside = (origins >= lo) & (origins <= hi)
    tlo = np.where(para, np.where(inside, -np.inf, np.inf), tlo)
    thi = np.where(para, np.where(inside, np.inf, -np.inf), thi)
    tnear = tlo.max(axis=-1)
    tfar = thi.min(axis=-1)
    hit = (tfar >= np.maximum(tnear, tmin)) & (tfar >= tmin)
    t = np.where(tnear >= tmin, tnear, tfar)
    return np.where(hit, t, np.inf)


def _ray_sphere(origins, dirs, center, radius, tmin=1e-9):
    oc = origins - center
    b = (oc * dirs).sum(axis=-1)
    a = (dirs * dirs).sum(axis=-1)
    c = (oc * oc).sum(axis=-1) - radius * radius
    disc = b * b - a * c
    hit = disc >= 0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = (-b - sq) / a
    t1 = (-b + sq) / a
    t = np.where(t0 >= tmin, t0, t1)
    return np.where(hit & (t >= tmin), t, np.inf)


def cast_rays(origins: np.ndarray, dirs: np.ndarray, scene: SceneSpec):
    """Nearest-hit distance and primitive id for a batch of rays."""
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    best_id = np.full(n, -1, dtype=int)
    pid = 0
    for b in scene.boxes:
        t = _ray_box(origins, dirs, np.asarray(b.lo, dtype=np.float64),
                     np.asarray(b.hi, dtype=np.float64))
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_id = np.where(closer, pid, best_id)
        pid += 1
    for s in scene.spheres:
        t = _ray_sphere(origins, dirs, np.asarray(s.center, dtype=np.float64),
                        float(s.radius))
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_id = np.where(closer, pid, best_id)
        pid += 1
    return best_t, best_id


def camera_rays(camera: CameraModel):
    """World-frame (origins, dirs) for every pixel.

    Pinhole dirs are scaled so the ray parameter t equals camera z-depth;
    orthographic dirs are the unit view axis, so t is the signed axis depth.
    """
    h, w = camera.resolution
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    r = camera.pose[:3, :3]
    if camera.kind == "pinhole":
        dc = np.stack([(u - camera.cx) / camera.fx,
                       (v - camera.cy) / camera.fy,
                       np.ones_like(u)], axis=2).reshape(-1, 3)
        dirs = dc @ r  # R^T applied to rows
        eye = camera.camera_to_world(np.zeros(3))[0]
        origins = np.broadcast_to(eye, dirs.shape).copy()
    else:
        oc = np.stack([(u - camera.cx) / camera.fx,
                       (v - camera.cy) / camera.fy,
                       np.zeros_like(u)], axis=2).reshape(-1, 3)
        origins = camera.camera_to_world(oc)
        axis = r[2]  # camera z axis in world coordinates
        dirs = np.broadcast_to(axis, origins.shape).copy()
    return origins, dirs


def synth_scene_oracle(seed: int, scene: SceneSpec, cameras):
    """Analytic ray-cast depth + confidence per camera, with hit registry.

    Confidence is 1 on surface hits and 0 on background; background depth is
    0 (the invalid-pixel marker).  Deterministic; seed is kept for interface
    stability with stochastic scene generators.
    """
    if not scene.primitives():
        raise FormatError("empty scene")
    out = []
    registry = []
    for cam in cameras:
        h, w = cam.resolution
        origins, dirs = camera_rays(cam)
        t, pid = cast_rays(origins, dirs, scene)
        hit = np.isfinite(t)
        depth = np.where(hit, t, 0.0).reshape(h, w)
        conf = hit.astype(np.float64).reshape(h, w)
        out.append((depth, conf, cam))
        registry.append(pid.reshape(h, w))
    return out, registry


def scene_point_colors(scene: SceneSpec, points: np.ndarray,
                       prim_ids: np.ndarray) -> np.ndarray:
    prims = scene.primitives()
    colors = np.zeros((len(points), 3))
    for i, pid in enumerate(prim_ids):
        if pid >= 0:
            colors[i] = prims[int(pid)].color
    return colors
