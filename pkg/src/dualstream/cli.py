"""Command-line pipeline: synth -> supervise -> render -> pretrain -> train -> eval.

Every command writes its artifact plus a JSON run manifest (config hash and
input hashes); rerunning with identical inputs and --cached is a no-op.
Exit codes: 0 ok, 2 config error, 3 pipeline error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .camgeo import CameraModel, look_at_pose
from .errors import (DualStreamError, FormatError, IoError, NumericalError,
                     PipelineError)
from .losses import LossConfig
from .policy import (ActionSample, DualStreamPolicy, DynamicEncoder,
                     DynamicEncoderConfig, PolicyConfig, PretrainConfig,
                     StaticEncoderConfig, TrainSample, evaluate_policy,
                     pretrain_position, train_policy, world_to_cell)
from .render import (ColoredCloud, EgoRenderConfig, load_ego_sequence,
                     render_ego_sequence, render_view, save_ego_sequence,
                     make_static_cameras)
from .supervise import (Box, ConsistentKeypointBundle, SceneSpec, Sphere,
                        SupervisionConfig, generate_bundle,
                        synth_scene_oracle)

VERSION = "0.1.0"

TASK_COLORS = [(0.9, 0.1, 0.1), (0.1, 0.8, 0.1), (0.15, 0.25, 0.9), (0.9, 0.8, 0.1)]
TABLE_COLOR = (0.45, 0.45, 0.45)
GOAL_COLOR = (0.95, 0.95, 0.95)


def worker_count() -> int:
    """Worker parallelism cap from the CORTICAL_THREADS env var (default 1)."""
    try:
        return max(1, int(os.environ.get("CORTICAL_THREADS", "1")))
    except ValueError:
        return 1


# -- configuration --------------------------------------------------------------

@dataclass
class PipelineConfig:
    seed: int = 0
    workspace_lo: tuple = (0.0, 0.0, 0.0)
    workspace_hi: tuple = (1.0, 1.0, 1.0)
    static_resolution: int = 32
    supervision_resolution: int = 128
    ego_resolution: int = 64
    episodes: int = 200
    trajectory_steps: int = 10
    cloud_points: int = 2500
    distractor: bool = False
    num_tasks: int = 4
    # toy desk objects are ~6 cm, so keypoint spacing is tightened relative
    # to the room-scale default
    supervision: SupervisionConfig = field(
        default_factory=lambda: SupervisionConfig(m=300, nms_radius=0.008))
    loss: LossConfig = field(default_factory=LossConfig)
    static_channels: int = 32
    dynamic_patch: int = 8
    dynamic_dim: int = 64
    rotation_bins: int = 72
    grid_n: int = 32
    fov_deg: float = 90.0
    jitter: float = 1.0
    train_steps: int = 400
    batch_size: int = 4
    lr: float = 1e-3
    warmup_steps: int = 20
    pretrain_epochs: int = 15
    pretrain_lr: float = 2e-3
    max_keypoints: int = 32
    augment: bool = False
    aug_rot_deg: float = 45.0
    aug_trans: float = 0.125

    @property
    def bounds(self):
        return (np.asarray(self.workspace_lo), np.asarray(self.workspace_hi))

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        d = dict(d)
        if "supervision" in d and isinstance(d["supervision"], dict):
            d["supervision"] = SupervisionConfig(**d["supervision"])
        if "loss" in d and isinstance(d["loss"], dict):
            d["loss"] = LossConfig(**d["loss"])
        for k in ("workspace_lo", "workspace_hi"):
            if k in d:
                d[k] = tuple(d[k])
        return PipelineConfig(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _dir_hash(path: str) -> str:
    entries = []
    for root, dirs, files in os.walk(path):
        dirs.sort()
        for f in sorted(files):
            if f == "manifest.json":
                continue
            full = os.path.join(root, f)
            entries.append(f"{os.path.relpath(full, path)}:{os.path.getsize(full)}")
    return hashlib.sha256("\n".join(entries).encode()).hexdigest()[:16]


def write_manifest(out_dir: str, command: str, cfg: PipelineConfig, inputs: dict):
    manifest = {"command": command, "version": VERSION,
                "config_hash": cfg.hash(), "config": cfg.to_dict(),
                "inputs": {k: _dir_hash(v) if os.path.isdir(v) else "missing"
                           for k, v in inputs.items()}}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def cached_ok(out_dir: str, command: str, cfg: PipelineConfig, inputs: dict) -> bool:
    mf = os.path.join(out_dir, "manifest.json")
    if not os.path.exists(mf):
        return False
    with open(mf) as fh:
        old = json.load(fh)
    cur_inputs = {k: _dir_hash(v) if os.path.isdir(v) else "missing"
                  for k, v in inputs.items()}
    return (old.get("command") == command and old.get("config_hash") == cfg.hash()
            and old.get("inputs") == cur_inputs)


# -- synthetic pick-place episodes ------------------------------------------------

@dataclass
class DemoEpisode:
    task_id: int
    scenes: list          # per-keyframe SceneSpec
    clouds: list          # per-keyframe ColoredCloud
    trajectory: list      # (wrist_pose 4x4 cam->world, ee_world, keyframe_idx)
    actions: list         # per-keyframe ActionSample


def _sample_box_surface(rng, lo, hi, n, top_only=False):
    lo, hi = np.asarray(lo), np.asarray(hi)
    ext = hi - lo
    if top_only:
        pts = lo + rng.uniform(0, 1, (n, 3)) * ext
        pts[:, 2] = hi[2]
        return pts
    areas = np.array([ext[1] * ext[2], ext[1] * ext[2],
                      ext[0] * ext[2], ext[0] * ext[2],
                      ext[0] * ext[1], ext[0] * ext[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = lo + rng.uniform(0, 1, (n, 3)) * ext
    pts[face == 0, 0] = lo[0]
    pts[face == 1, 0] = hi[0]
    pts[face == 2, 1] = lo[1]
    pts[face == 3, 1] = hi[1]
    pts[face == 4, 2] = lo[2]
    pts[face == 5, 2] = hi[2]
    return pts


def _sample_sphere_surface(rng, center, radius, n):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.asarray(center) + radius * d


def _scene_cloud(scene: SceneSpec, rng, total_points: int) -> ColoredCloud:
    n_obj = len(scene.boxes) - 1 + len(scene.spheres)
    pts_all, col_all = [], []
    # table gets half the budget, objects split the rest
    table_budget = total_points // 2
    obj_budget = max(total_points // (2 * max(n_obj, 1)), 64)
    for i, b in enumerate(scene.boxes):
        budget = table_budget if i == 0 else obj_budget
        pts_all.append(_sample_box_surface(rng, b.lo, b.hi, budget, top_only=(i == 0)))
        col_all.append(np.tile(b.color, (budget, 1)))
    for s in scene.spheres:
        pts_all.append(_sample_sphere_surface(rng, s.center, s.radius, obj_budget))
        col_all.append(np.tile(s.color, (obj_budget, 1)))
    return ColoredCloud(np.vstack(pts_all), np.vstack(col_all))


def _wrist_pose_for(ee: np.ndarray) -> np.ndarray:
    """Camera->world pose rigidly offset from the end-effector, looking at it."""
    eye = np.asarray(ee) + np.array([0.0, -0.18, 0.14])
    fwd = np.asarray(ee) - eye
    wc = look_at_pose(eye, fwd, np.array([0.0, 0.0, 1.0]))
    cw = np.eye(4)
    cw[:3, :3] = wc[:3, :3].T
    cw[:3, 3] = -wc[:3, :3].T @ wc[:3, 3]
    return cw


def make_episode(seed: int, cfg: PipelineConfig) -> DemoEpisode:
    rng = np.random.default_rng(seed)
    task_id = int(rng.integers(0, cfg.num_tasks))
    color = TASK_COLORS[task_id % len(TASK_COLORS)]
    table = Box(lo=np.array([0.05, 0.05, 0.0]), hi=np.array([0.95, 0.95, 0.02]),
                color=TABLE_COLOR)
    r = 0.06
    bx, by = rng.uniform(0.15, 0.85, 2)
    gx, gy = rng.uniform(0.15, 0.85, 2)
    while np.hypot(gx - bx, gy - by) < 0.25:
        gx, gy = rng.uniform(0.15, 0.85, 2)
    ball0 = Sphere(center=np.array([bx, by, 0.02 + r]), radius=r, color=color)
    # a curved goal marker exposes a surface patch co-visible from all three
    # static views, so both objects contribute consistent keypoints
    goal = Sphere(center=np.array([gx, gy, 0.02 + 0.05]), radius=0.05,
                  color=GOAL_COLOR)
    hold_z = 0.02 + 0.20
    # hold the ball beside (not above) the goal so the top view still sees
    # both objects in the second keyframe
    hx = gx + 0.13 * (1.0 if gx < 0.5 else -1.0)
    ball1 = Sphere(center=np.array([hx, gy, hold_z]), radius=r, color=color)
    scene0 = SceneSpec(boxes=[table], spheres=[ball0, goal])
    scene1 = SceneSpec(boxes=[table], spheres=[ball1, goal])
    if cfg.distractor:
        dx, dy = rng.uniform(0.15, 0.85, 2)
        while min(np.hypot(dx - bx, dy - by), np.hypot(dx - gx, dy - gy)) < 0.2:
            dx, dy = rng.uniform(0.15, 0.85, 2)
        dcolor = TASK_COLORS[(task_id + 1) % len(TASK_COLORS)]
        distract = Sphere(center=np.array([dx, dy, 0.02 + r]), radius=r,
                          color=dcolor)
        scene0.spheres.append(distract)
        scene1.spheres.append(distract)

    pick = np.array([bx, by, 0.02 + 2 * r + 0.02])
    place = np.array([hx, gy, hold_z + r + 0.02])
    yaw = np.arctan2(gy - by, gx - bx) % (2 * np.pi)
    yaw_bin = int(yaw / (2 * np.pi) * cfg.rotation_bins) % cfg.rotation_bins
    mid = cfg.rotation_bins // 2
    actions = [
        ActionSample(translation=pick,
                     grid_cell=world_to_cell(pick, cfg.bounds, cfg.grid_n),
                     rotation_bins=np.array([mid, mid, yaw_bin]),
                     gripper_open=False, collision_allowed=False),
        ActionSample(translation=place,
                     grid_cell=world_to_cell(place, cfg.bounds, cfg.grid_n),
                     rotation_bins=np.array([mid, mid, yaw_bin]),
                     gripper_open=True, collision_allowed=True),
    ]

    # approach block, lift, traverse to goal
    t_half = cfg.trajectory_steps // 2
    start = np.array([bx, by, 0.45])
    ee_path = [start + (pick - start) * (k / max(t_half - 1, 1))
               for k in range(t_half)]
    lift = pick + np.array([0.0, 0.0, 0.2])
    rest = cfg.trajectory_steps - t_half
    ee_path += [lift + (place - lift) * (k / max(rest - 1, 1))
                for k in range(rest)]
    trajectory = [(_wrist_pose_for(ee), ee, 0 if k < t_half else 1)
                  for k, ee in enumerate(ee_path)]
    clouds = [_scene_cloud(scene0, rng, cfg.cloud_points),
              _scene_cloud(scene1, rng, cfg.cloud_points)]
    return DemoEpisode(task_id=task_id, scenes=[scene0, scene1],
                       clouds=clouds, trajectory=trajectory, actions=actions)


def _scene_to_dict(scene: SceneSpec) -> dict:
    return {"boxes": [{"lo": list(map(float, b.lo)), "hi": list(map(float, b.hi)),
                       "color": list(map(float, b.color))} for b in scene.boxes],
            "spheres": [{"center": list(map(float, s.center)),
                         "radius": float(s.radius),
                         "color": list(map(float, s.color))}
                        for s in scene.spheres]}


def _scene_from_dict(d: dict) -> SceneSpec:
    return SceneSpec(
        boxes=[Box(lo=np.asarray(b["lo"]), hi=np.asarray(b["hi"]),
                   color=tuple(b["color"])) for b in d["boxes"]],
        spheres=[Sphere(center=np.asarray(s["center"]), radius=s["radius"],
                        color=tuple(s["color"])) for s in d.get("spheres", [])])


def save_episode(dirpath: str, ep: DemoEpisode):
    os.makedirs(dirpath, exist_ok=True)
    meta = {
        "task_id": ep.task_id,
        "scenes": [_scene_to_dict(s) for s in ep.scenes],
        "actions": [a.to_dict() for a in ep.actions],
        "trajectory": [{"pose": [float(x) for x in p.reshape(-1)],
                        "ee": [float(x) for x in e], "keyframe": int(k)}
                       for p, e, k in ep.trajectory],
    }
    with open(os.path.join(dirpath, "episode.json"), "w") as fh:
        json.dump(meta, fh)
    for k, cloud in enumerate(ep.clouds):
        cloud.save(os.path.join(dirpath, f"cloud_kf{k}"))


def load_episode(dirpath: str) -> DemoEpisode:
    epf = os.path.join(dirpath, "episode.json")
    if not os.path.exists(epf):
        raise PipelineError(f"missing episode.json in {dirpath}")
    with open(epf) as fh:
        meta = json.load(fh)
    clouds = [ColoredCloud.load(os.path.join(dirpath, f"cloud_kf{k}"))
              for k in range(len(meta["scenes"]))]
    trajectory = [(np.asarray(t["pose"], dtype=np.float64).reshape(4, 4),
                   np.asarray(t["ee"], dtype=np.float64), t["keyframe"])
                  for t in meta["trajectory"]]
    return DemoEpisode(task_id=meta["task_id"],
                       scenes=[_scene_from_dict(s) for s in meta["scenes"]],
                       clouds=clouds, trajectory=trajectory,
                       actions=[ActionSample.from_dict(a) for a in meta["actions"]])


def list_episodes(dataset_dir: str) -> list[str]:
    if not os.path.isdir(dataset_dir):
        raise PipelineError(f"missing dataset directory {dataset_dir}")
    names = sorted((n for n in os.listdir(dataset_dir) if n.startswith("episode_")),
                   key=lambda n: int(n.split("_")[1]))
    if not names:
        raise PipelineError(f"no episodes in {dataset_dir}")
    return [os.path.join(dataset_dir, n) for n in names]


# -- commands --------------------------------------------------------------------

def cmd_synth(cfg: PipelineConfig, out_dir: str, cached: bool = False):
    if cached and cached_ok(out_dir, "synth", cfg, {}):
        return {"cached": True}
    os.makedirs(out_dir, exist_ok=True)
    for e in range(cfg.episodes):
        ep = make_episode(cfg.seed * 1_000_003 + e, cfg)
        save_episode(os.path.join(out_dir, f"episode_{e}"), ep)
    return write_manifest(out_dir, "synth", cfg, {})


def cmd_supervise(cfg: PipelineConfig, dataset_dir: str, out_dir: str,
                  cached: bool = False):
    if cached and cached_ok(out_dir, "supervise", cfg, {"dataset": dataset_dir}):
        return {"cached": True}
    episodes = list_episodes(dataset_dir)
    os.makedirs(out_dir, exist_ok=True)
    cams = make_static_cameras(cfg.bounds, cfg.supervision_resolution)
    for edir in episodes:
        ep = load_episode(edir)
        name = os.path.basename(edir)
        for k, scene in enumerate(ep.scenes):
            views, _ = synth_scene_oracle(cfg.seed, scene, cams)
            bundle = generate_bundle(views, cfg.supervision)
            bundle.save(os.path.join(out_dir, f"{name}_kf{k}"))
    return write_manifest(out_dir, "supervise", cfg, {"dataset": dataset_dir})


def cmd_render(cfg: PipelineConfig, dataset_dir: str, out_dir: str,
               cached: bool = False):
    if cached and cached_ok(out_dir, "render", cfg, {"dataset": dataset_dir}):
        return {"cached": True}
    episodes = list_episodes(dataset_dir)
    os.makedirs(out_dir, exist_ok=True)
    ego_cfg = EgoRenderConfig(resolution=cfg.ego_resolution, fov_deg=cfg.fov_deg,
                              jitter=cfg.jitter)
    for e, edir in enumerate(episodes):
        ep = load_episode(edir)
        # render each stage segment against the cloud matching its keyframe
        frames = [(p, ee) for p, ee, _ in ep.trajectory]
        stages = [k for _, _, k in ep.trajectory]
        split = stages.index(1) if 1 in stages else len(frames)
        seqs = []
        if split > 0:
            seqs.append(render_ego_sequence(frames[:split], ep.clouds[0], ego_cfg,
                                            seed=cfg.seed + 7919 * e))
        if split < len(frames):
            seqs.append(render_ego_sequence(frames[split:], ep.clouds[1], ego_cfg,
                                            seed=cfg.seed + 7919 * e + 1))
        merged = seqs[0]
        for s in seqs[1:]:
            merged.frames += s.frames
            merged.labels = np.vstack([merged.labels, s.labels])
            merged.ee_world = np.vstack([merged.ee_world, s.ee_world])
            merged.visible = np.concatenate([merged.visible, s.visible])
        save_ego_sequence(os.path.join(out_dir, f"episode_{e}"), merged)
    return write_manifest(out_dir, "render", cfg, {"dataset": dataset_dir})


def cmd_pretrain(cfg: PipelineConfig, ego_dir: str, out_dir: str,
                 cached: bool = False):
    if cached and cached_ok(out_dir, "pretrain", cfg, {"ego": ego_dir}):
        return {"cached": True}
    names = sorted((n for n in os.listdir(ego_dir) if n.startswith("episode_")),
                   key=lambda n: int(n.split("_")[1])) if os.path.isdir(ego_dir) else []
    if not names:
        raise PipelineError(f"no ego sequences in {ego_dir}")
    seqs = [load_ego_sequence(os.path.join(ego_dir, n)) for n in names]
    enc = DynamicEncoder(DynamicEncoderConfig(
        resolution=cfg.ego_resolution, patch=cfg.dynamic_patch,
        dim=cfg.dynamic_dim, out_channels=cfg.static_channels), seed=cfg.seed)
    history = pretrain_position(enc, seqs, PretrainConfig(
        epochs=cfg.pretrain_epochs, lr=cfg.pretrain_lr, seed=cfg.seed))
    os.makedirs(out_dir, exist_ok=True)
    enc.params.save(out_dir, extra={"config_hash": cfg.hash(), "history": history})
    m = write_manifest(out_dir, "pretrain", cfg, {"ego": ego_dir})
    m["history"] = history
    return m


def _augment(cloud: ColoredCloud, bundle: ConsistentKeypointBundle,
             action: ActionSample, ee: np.ndarray, cfg: PipelineConfig, rng):
    """Random z-rotation and xy-translation of the scene, clipped to bounds."""
    lo, hi = cfg.bounds
    center = (lo + hi) / 2
    ang = np.deg2rad(rng.uniform(-cfg.aug_rot_deg, cfg.aug_rot_deg))
    rot = np.array([[np.cos(ang), -np.sin(ang), 0],
                    [np.sin(ang), np.cos(ang), 0], [0, 0, 1.0]])
    shift = np.append(rng.uniform(-cfg.aug_trans, cfg.aug_trans, 2), 0.0)

    def tf(p):
        return (np.atleast_2d(p) - center) @ rot.T + center + shift

    new_trans = np.clip(tf(action.translation)[0], lo, hi)
    pts = np.clip(tf(cloud.points), lo, hi)
    new_action = ActionSample(
        translation=new_trans,
        grid_cell=world_to_cell(new_trans, cfg.bounds, cfg.grid_n),
        rotation_bins=action.rotation_bins.copy(),
        gripper_open=action.gripper_open,
        collision_allowed=action.collision_allowed)
    new_points = tf(bundle.world_points)
    return ColoredCloud(pts, cloud.colors), new_points, new_action, tf(ee)[0]


def build_train_samples(cfg: PipelineConfig, dataset_dir: str, bundles_dir: str,
                        episode_indices=None, augment: bool | None = None,
                        rng: np.random.Generator | None = None):
    episodes = list_episodes(dataset_dir)
    if episode_indices is not None:
        episodes = [episodes[i] for i in episode_indices]
    augment = cfg.augment if augment is None else augment
    rng = rng or np.random.default_rng(cfg.seed + 31)
    cams = make_static_cameras(cfg.bounds, cfg.static_resolution)
    ego_cfg = EgoRenderConfig(resolution=cfg.ego_resolution, fov_deg=cfg.fov_deg,
                              jitter=cfg.jitter)
    samples = []
    for edir in episodes:
        ep = load_episode(edir)
        name = os.path.basename(edir)
        for k, action in enumerate(ep.actions):
            bpath = os.path.join(bundles_dir, f"{name}_kf{k}")
            if not os.path.isdir(bpath):
                raise PipelineError(f"missing bundle {bpath}; run supervise first")
            bundle = ConsistentKeypointBundle.load(bpath)
            cloud = ep.clouds[k]
            ee = action.translation
            wpts = bundle.world_points
            if augment:
                cloud, wpts, action, ee = _augment(cloud, bundle, action, ee, cfg, rng)
            # re-project tracks into the (possibly lower-resolution) training cameras
            tracks = np.stack([cam.project(wpts)[0] for cam in cams], axis=1)
            inb = np.all([cam.in_image(tracks[:, j]) for j, cam in enumerate(cams)],
                         axis=0)
            bundle = ConsistentKeypointBundle(
                world_points=wpts[inb], tracks=tracks[inb],
                confidences=bundle.confidences[inb], view_count=len(cams))
            static_views = [render_view(cloud, cam) for cam in cams]
            seq = render_ego_sequence([( _wrist_pose_for(ee), ee)], cloud, ego_cfg,
                                      seed=cfg.seed + hash(name) % 100000 + k)
            samples.append(TrainSample(static_views=static_views,
                                       dynamic_view=seq.frames[0],
                                       bundle=bundle, action=action,
                                       task_id=ep.task_id))
    return samples


def make_policy(cfg: PipelineConfig, pretrained_dir: str | None = None) -> DualStreamPolicy:
    pc = PolicyConfig(
        static=StaticEncoderConfig(channels=cfg.static_channels,
                                   resolution=cfg.static_resolution,
                                   num_tasks=cfg.num_tasks),
        dynamic=DynamicEncoderConfig(resolution=cfg.ego_resolution,
                                     patch=cfg.dynamic_patch, dim=cfg.dynamic_dim,
                                     out_channels=cfg.static_channels),
        loss=cfg.loss, rotation_bins=cfg.rotation_bins, grid_n=cfg.grid_n,
        workspace_bounds=(tuple(cfg.workspace_lo), tuple(cfg.workspace_hi)),
        lr=cfg.lr, steps=cfg.train_steps, batch_size=cfg.batch_size,
        warmup_steps=cfg.warmup_steps, max_keypoints=cfg.max_keypoints,
        seed=cfg.seed)
    policy = DualStreamPolicy(pc)
    if pretrained_dir:
        policy.dynamic_encoder.params.load(pretrained_dir)
        policy.dynamic_encoder.freeze()
    return policy


def cmd_train(cfg: PipelineConfig, dataset_dir: str, bundles_dir: str,
              out_dir: str, pretrained_dir: str | None = None,
              holdout_frac: float = 0.2, cached: bool = False):
    inputs = {"dataset": dataset_dir, "bundles": bundles_dir}
    if pretrained_dir:
        inputs["pretrained"] = pretrained_dir
    if cached and cached_ok(out_dir, "train", cfg, inputs):
        return {"cached": True}
    n_ep = len(list_episodes(dataset_dir))
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(n_ep)
    n_hold = int(round(n_ep * holdout_frac))
    train_idx, hold_idx = order[n_hold:], order[:n_hold]
    samples = build_train_samples(cfg, dataset_dir, bundles_dir, sorted(train_idx))
    policy = make_policy(cfg, pretrained_dir)
    os.makedirs(out_dir, exist_ok=True)
    history = train_policy(policy, samples,
                           metrics_path=os.path.join(out_dir, "metrics.jsonl"))
    policy.all_params().save(out_dir, extra={"config_hash": cfg.hash(),
                                             "holdout": [int(i) for i in hold_idx]})
    m = write_manifest(out_dir, "train", cfg, inputs)
    m["final"] = history[-1] if history else {}
    return m


def cmd_eval(cfg: PipelineConfig, dataset_dir: str, bundles_dir: str,
             ckpt_dir: str, pretrained_dir: str | None = None):
    with open(os.path.join(ckpt_dir, "params.json")) as fh:
        meta = json.load(fh)
    hold_idx = meta.get("holdout")
    if hold_idx is None:
        raise PipelineError("checkpoint carries no holdout split")
    samples = build_train_samples(cfg, dataset_dir, bundles_dir, sorted(hold_idx),
                                  augment=False)
    policy = make_policy(cfg, pretrained_dir)
    policy.all_params().load(ckpt_dir)
    if pretrained_dir:
        policy.dynamic_encoder.freeze()
    return evaluate_policy(policy, samples)


# -- argument parsing --------------------------------------------------------------

def _apply_flag_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "m", None) is not None:
        cfg.supervision.m = args.m
    if getattr(args, "nms_radius", None) is not None:
        cfg.supervision.nms_radius = args.nms_radius
    if getattr(args, "zeta", None) is not None:
        cfg.loss.zeta = args.zeta
    if getattr(args, "tau", None) is not None:
        cfg.loss.tau = args.tau
    if getattr(args, "lam", None) is not None:
        cfg.loss.lam = args.lam
    if getattr(args, "fov", None) is not None:
        cfg.fov_deg = args.fov
    if getattr(args, "jitter", None) is not None:
        cfg.jitter = args.jitter
    if getattr(args, "grid", None) is not None:
        cfg.grid_n = args.grid
    if getattr(args, "episodes", None) is not None:
        cfg.episodes = args.episodes
    if getattr(args, "steps", None) is not None:
        cfg.train_steps = args.steps
    if getattr(args, "epochs", None) is not None:
        cfg.pretrain_epochs = args.epochs
    return cfg


def _common_flags(p):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--cached", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dualstream")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic pick-place episodes")
    _common_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int, default=None)

    p = sub.add_parser("supervise", help="extract keypoint bundles")
    _common_flags(p)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--nms-radius", dest="nms_radius", type=float, default=None)

    p = sub.add_parser("render", help="render egocentric sequences")
    _common_flags(p)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fov", type=float, default=None)
    p.add_argument("--jitter", type=float, default=None)

    p = sub.add_parser("pretrain", help="position-aware pretraining of the dynamic encoder")
    _common_flags(p)
    p.add_argument("--ego", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("train", help="train the dual-stream policy")
    _common_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--bundles", required=True)
    p.add_argument("--pretrained", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--zeta", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--grid", type=int, default=None)
    p.add_argument("--two-stage", dest="two_stage", action="store_true")

    p = sub.add_parser("eval", help="evaluate a trained checkpoint")
    _common_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--bundles", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pretrained", default=None)
    p.add_argument("--grid", type=int, default=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            with open(args.config) as fh:
                cfg = PipelineConfig.from_dict(json.load(fh))
        else:
            cfg = PipelineConfig()
        cfg = _apply_flag_overrides(cfg, args)
    except (TypeError, ValueError, KeyError, FormatError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "synth":
            out = cmd_synth(cfg, args.out, args.cached)
        elif args.command == "supervise":
            out = cmd_supervise(cfg, args.inp, args.out, args.cached)
        elif args.command == "render":
            out = cmd_render(cfg, args.inp, args.out, args.cached)
        elif args.command == "pretrain":
            out = cmd_pretrain(cfg, args.ego, args.out, args.cached)
        elif args.command == "train":
            out = cmd_train(cfg, args.data, args.bundles, args.out,
                            args.pretrained, cached=args.cached)
        elif args.command == "eval":
            out = cmd_eval(cfg, args.data, args.bundles, args.ckpt,
                           args.pretrained)
        else:  # pragma: no cover
            return 2
        print(json.dumps({k: v for k, v in out.items() if k != "config"},
                         default=str))
        return 0
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4
    except (PipelineError, IoError, FormatError, DualStreamError, OSError) as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
