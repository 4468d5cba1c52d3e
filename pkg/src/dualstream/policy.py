"""Dual-stream policy: encoders, fusion, action heads, and training loops.

The static stream encodes three orthographic views with a small conv trunk
(plus one self-attention block) and an appended 3x3 refinement convolution
feeding keypoint feature sampling.  The dynamic stream is a compact stand-in
for a pretrained egocentric gaze encoder honoring its token/saliency
interface; it is pretrained on end-effector saliency and then frozen.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import losses, numcore as nc
from .camgeo import CameraModel
from .errors import (DecodeError, FormatError, NumericalError, ShapeError)
from .losses import KeypointFeatures, LossConfig, bilinear_sample, cgc_loss
from .numcore import Tensor
from .render import ColoredCloud, ViewBundle, make_static_cameras, render_view, saliency_target


# -- parameters and optimization ---------------------------------------------

class ParamStore(dict):
    """Named trainable tensors with checkpoint (de)serialization."""

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        t = Tensor(data, requires_grad=trainable, name=name)
        self[name] = t
        return t

    def zero_grad(self):
        for t in self.values():
            t.zero_grad()

    def set_trainable(self, trainable: bool):
        for t in self.values():
            t.requires_grad = trainable
            if not trainable:
                t._parents = ()
                t._backward = None

    def save(self, dirpath: str, extra: dict | None = None):
        os.makedirs(dirpath, exist_ok=True)
        manifest = {"names": sorted(self.keys())}
        if extra:
            manifest.update(extra)
        with open(os.path.join(dirpath, "params.json"), "w") as fh:
            json.dump(manifest, fh)
        for name, t in self.items():
            nc.save_tensor(os.path.join(dirpath, name), t, name=name)

    def load(self, dirpath: str):
        with open(os.path.join(dirpath, "params.json")) as fh:
            manifest = json.load(fh)
        for name in manifest["names"]:
            loaded = nc.load_tensor(os.path.join(dirpath, name))
            if name in self:
                if self[name].shape != loaded.shape:
                    raise ShapeError(f"checkpoint shape mismatch for {name}")
                self[name].data = loaded.data
            else:
                self.add(name, loaded.data)
        return manifest


class Adam:
    def __init__(self, params: list[Tensor], lr=1e-3, betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mh = self.m[i] / (1 - self.b1 ** self.t)
            vh = self.v[i] / (1 - self.b2 ** self.t)
            p.data = p.data - self.lr * mh / (np.sqrt(vh) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def _he(rng, *shape):
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    return rng.normal(0.0, np.sqrt(2.0 / max(fan_in, 1)), size=shape)


# -- static stream -------------------------------------------------------------

@dataclass
class StaticEncoderConfig:
    in_channels: int = 7
    channels: int = 32
    resolution: int = 32
    num_tasks: int = 4
    attention: bool = True
    attn_stride: int = 2


@dataclass
class ViewPrediction:
    feature_map: Tensor   # C x H' x W'
    heatmap: Tensor       # H x W, sums to 1
    heatmap_logits: Tensor
    kp_feature_map: Tensor


class StaticEncoder:
    """Conv trunk + one attention block + per-view heads.

    The 3x3 refinement convolution after the trunk produces the map used for
    keypoint feature sampling.
    """

    def __init__(self, cfg: StaticEncoderConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c = cfg.channels
        p = ParamStore()
        p.add("s_conv1", _he(rng, c, cfg.in_channels, 3, 3))
        p.add("s_conv2", _he(rng, c, c, 3, 3))
        p.add("s_conv3", _he(rng, c, c, 3, 3))
        p.add("s_conv4", _he(rng, c, c, 3, 3))
        p.add("s_task_emb", rng.normal(0.0, 0.1, size=(cfg.num_tasks, c)))
        if cfg.attention:
            p.add("s_wq", _he(rng, c, c))
            p.add("s_wk", _he(rng, c, c))
            p.add("s_wv", _he(rng, c, c))
            p.add("s_wo", _he(rng, c, c) * 0.1)
        p.add("s_heat", _he(rng, 1, c, 1, 1))
        p.add("s_kp_conv", _he(rng, c, c, 3, 3))
        self.params = p

    def _attend(self, fm: Tensor) -> Tensor:
        """Single-head self-attention over a strided token grid, added back."""
        p = self.params
        c, h, w = fm.shape
        s = self.cfg.attn_stride
        hs, ws = h // s, w // s
        small = nc.resize_bilinear(fm, (hs, ws))
        tokens = small.reshape(c, hs * ws).T            # T x C
        q = tokens @ p["s_wq"]
        k = tokens @ p["s_wk"]
        v = tokens @ p["s_wv"]
        att = nc.softmax(q @ k.T * (1.0 / np.sqrt(c)), axis=1)
        out = (att @ v) @ p["s_wo"]                     # T x C
        grid = out.T.reshape(c, hs, ws)
        return fm + nc.resize_bilinear(grid, (h, w))

    def forward(self, views: list[ViewBundle], task_id: int = 0) -> list[ViewPrediction]:
        cfg = self.cfg
        h, w = views[0].camera.resolution
        for vb in views:
            if vb.camera.resolution != (h, w):
                raise ShapeError("static views must share resolution")
        p = self.params
        x = Tensor(np.stack([vb.image for vb in views]))  # B x 7 x H x W
        x = nc.relu(nc.conv2d(x, p["s_conv1"], padding=1))
        onehot = np.zeros((1, cfg.num_tasks))
        onehot[0, int(task_id)] = 1.0
        task_vec = Tensor(onehot) @ p["s_task_emb"]   # 1 x C row pick
        x = x + task_vec.reshape(1, cfg.channels, 1, 1)
        x = nc.relu(nc.conv2d(x, p["s_conv2"], padding=1))
        x = nc.relu(nc.conv2d(x, p["s_conv3"], padding=1))
        trunk = nc.relu(nc.conv2d(x, p["s_conv4"], padding=1))
        preds = []
        for b in range(len(views)):
            fm = trunk.reshape(len(views), cfg.channels, h, w)
            # slice one view out via constant one-hot contraction
            sel = np.zeros((len(views), 1))
            sel[b, 0] = 1.0
            flat = fm.reshape(len(views), cfg.channels * h * w)
            fmap = (flat.T @ sel).T.reshape(cfg.channels, h, w)
            if cfg.attention:
                fmap = self._attend(fmap)
            logits = nc.conv2d(fmap.reshape(1, cfg.channels, h, w),
                               p["s_heat"]).reshape(h, w)
            heat = nc.softmax(logits.reshape(h * w), axis=0).reshape(h, w)
            kp = nc.conv2d(fmap.reshape(1, cfg.channels, h, w),
                           p["s_kp_conv"], padding=1).reshape(cfg.channels, h, w)
            preds.append(ViewPrediction(feature_map=fmap, heatmap=heat,
                                        heatmap_logits=logits, kp_feature_map=kp))
        return preds


# -- dynamic stream ------------------------------------------------------------

@dataclass
class DynamicEncoderConfig:
    in_channels: int = 7
    resolution: int = 64
    patch: int = 8          # token grid is patch x patch
    dim: int = 64           # token width per branch
    out_channels: int = 32  # projected token width (fusion space)
    saliency_downsample: int = 2


@dataclass
class DynamicFeatures:
    f_sa: Tensor          # (P*P) x D
    f_glc: Tensor         # (P*P) x D
    projected: Tensor     # (P*P) x C
    saliency_raw: Tensor  # 1 x 2 x h x w, normalized per temporal slice
    dims: dict


class DynamicEncoder:
    """Stand-in egocentric encoder honoring the token/saliency interface."""

    def __init__(self, cfg: DynamicEncoderConfig, seed: int = 0):
        self.cfg = cfg
        self.frozen = False
        rng = np.random.default_rng(seed)
        steps = int(np.log2(cfg.resolution // cfg.patch))
        if cfg.patch * 2 ** steps != cfg.resolution:
            raise FormatError("resolution must be patch * 2^k")
        p = ParamStore()
        chans = [cfg.in_channels] + [min(cfg.dim, 16 * 2 ** i) for i in range(steps - 1)] + [cfg.dim]
        self.n_layers = steps
        for i in range(steps):
            p.add(f"d_conv{i}", _he(rng, chans[i + 1], chans[i], 3, 3))
        p.add("d_glc_conv", _he(rng, cfg.dim, cfg.dim, 3, 3))
        p.add("d_sal_conv", _he(rng, 2, cfg.dim, 1, 1))
        p.add("d_lp", _he(rng, 2 * cfg.dim, cfg.out_channels))
        p.add("d_lp_b", np.zeros(cfg.out_channels))
        # fixed temporal averaging kernel for the 2 -> 1 slice compression
        p.add("d_tconv", np.full((1, 1, 2, 1, 1), 0.5), trainable=False)
        self.params = p

    def freeze(self):
        self.frozen = True
        self.params.set_trainable(False)

    def forward(self, frame: ViewBundle) -> DynamicFeatures:
        cfg = self.cfg
        h, w = frame.camera.resolution
        if (h, w) != (cfg.resolution, cfg.resolution):
            raise ShapeError(f"frame resolution {(h, w)} != {cfg.resolution}")
        p = self.params
        x = Tensor(frame.image[None])  # 1 x 7 x H x W
        for i in range(self.n_layers):
            x = nc.relu(nc.conv2d(x, p[f"d_conv{i}"], stride=2, padding=1))
        grid = x.reshape(cfg.dim, cfg.patch, cfg.patch)
        f_sa = grid.reshape(cfg.dim, cfg.patch ** 2).T           # (P*P) x D
        glc_grid = nc.relu(nc.conv2d(x, p["d_glc_conv"], padding=1))
        f_glc = glc_grid.reshape(cfg.dim, cfg.patch ** 2).T
        projected = project_dynamic(f_sa, f_glc, p["d_lp"], p["d_lp_b"])
        sal_hw = cfg.resolution // cfg.saliency_downsample
        sal_logits = nc.conv2d(glc_grid, p["d_sal_conv"]).reshape(2, cfg.patch, cfg.patch)
        sal_logits = nc.resize_bilinear(sal_logits, (sal_hw, sal_hw))
        sal = nc.softmax(sal_logits.reshape(2, sal_hw * sal_hw), axis=1)
        sal = sal.reshape(1, 2, sal_hw, sal_hw)
        return DynamicFeatures(
            f_sa=f_sa, f_glc=f_glc, projected=projected, saliency_raw=sal,
            dims={"P": cfg.patch, "D": cfg.dim, "C": cfg.out_channels, "B": 1})


def project_dynamic(f_sa: Tensor, f_glc: Tensor, lp_w: Tensor, lp_b: Tensor) -> Tensor:
    """Channel-concatenate the two token streams and linearly project to C."""
    if f_sa.shape != f_glc.shape:
        raise ShapeError(f"token shapes differ: {f_sa.shape} vs {f_glc.shape}")
    cat = nc.concat([f_sa, f_glc], axis=1)      # (P*P) x 2D
    if cat.shape[1] != lp_w.shape[0]:
        raise ShapeError(f"projection expects width {lp_w.shape[0]}, got {cat.shape[1]}")
    return cat @ lp_w + lp_b.reshape(1, lp_w.shape[1])


def compress_saliency(raw: Tensor, target_resolution: tuple[int, int],
                      temporal_kernel: Tensor | None = None) -> Tensor:
    """Resize each temporal slice, compress 2 -> 1 slices, renormalize.

    raw is 1 x 2 x h x w with each slice normalized; output is
    1 x 1 x H x W summing to 1.
    """
    if raw.data.ndim != 4 or raw.shape[0] != 1 or raw.shape[1] != 2:
        raise ShapeError(f"raw saliency must be 1x2xhxw, got {raw.shape}")
    resized = nc.resize_bilinear(raw, target_resolution)  # 1 x 2 x H x W
    x = resized.reshape(1, 1, 2, *target_resolution)      # B x C x T x H x W
    if temporal_kernel is None:
        temporal_kernel = Tensor(np.full((1, 1, 2, 1, 1), 0.5))
    out = nc.conv3d_temporal(x, temporal_kernel)          # 1 x 1 x 1 x H x W
    out = nc.clamp(out, lo=0.0)
    out = out.reshape(1, 1, *target_resolution)
    return out / out.sum()


# -- fusion and decoding --------------------------------------------------------

def build_global_feature(preds: list[ViewPrediction]) -> Tensor:
    """Concatenate heatmap-weighted sums then per-channel maxima, 4 views each."""
    if len(preds) != 4:
        raise ShapeError(f"expected 4 view predictions, got {len(preds)}")
    phis, psis = [], []
    for pr in preds:
        c, hf, wf = pr.feature_map.shape
        heat = pr.heatmap
        if heat.shape != (hf, wf):
            heat = nc.resize_bilinear(heat.reshape(1, *heat.shape), (hf, wf)).reshape(hf, wf)
            heat = heat / heat.sum()
        weighted = pr.feature_map * heat.reshape(1, hf, wf)
        phis.append(weighted.sum(axis=(1, 2)))
        psis.append(pr.feature_map.reshape(c, hf * wf).max(axis=1))
    return nc.concat(phis + psis, axis=0)


def make_grid(workspace_bounds, n: int):
    """Cell-center grid over the workspace; returns (points n^3 x 3, cell size)."""
    lo = np.asarray(workspace_bounds[0], dtype=np.float64)
    hi = np.asarray(workspace_bounds[1], dtype=np.float64)
    cell = (hi - lo) / n
    axes = [lo[k] + (np.arange(n) + 0.5) * cell[k] for k in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    return pts, cell


def world_to_cell(point, workspace_bounds, n: int) -> np.ndarray:
    lo = np.asarray(workspace_bounds[0], dtype=np.float64)
    hi = np.asarray(workspace_bounds[1], dtype=np.float64)
    cell = (hi - lo) / n
    idx = np.floor((np.asarray(point) - lo) / cell).astype(int)
    return np.clip(idx, 0, n - 1)


def _bilinear_np(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    h, w = img.shape
    u, v = uv[:, 0], uv[:, 1]
    u0 = np.clip(np.floor(u).astype(int), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(v).astype(int), 0, max(h - 2, 0))
    fu, fv = u - u0, v - v0
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    return (img[v0, u0] * (1 - fu) * (1 - fv) + img[v0, u1] * fu * (1 - fv) +
            img[v1, u0] * (1 - fu) * fv + img[v1, u1] * fu * fv)


def decode_translation(heatmaps: list[np.ndarray], cameras: list[CameraModel],
                       grid_points: np.ndarray):
    """Exhaustive back-projection scan: argmax of summed heatmap lookups.

    Views where a grid point projects off-image (or behind a pinhole camera)
    are skipped for that point.  Ties break to the lowest linear grid index.
    """
    scores = np.zeros(len(grid_points))
    contributing = np.zeros(len(grid_points), dtype=int)
    for hm, cam in zip(heatmaps, cameras):
        hm = np.asarray(hm, dtype=np.float64)
        uv, z, behind = cam.project(grid_points)
        ok = cam.in_image(uv) & ~behind
        ii = np.flatnonzero(ok)
        if len(ii):
            scores[ii] += _bilinear_np(hm, uv[ii])
            contributing[ii] += 1
    usable = contributing > 0
    if not usable.any():
        raise DecodeError("every grid point projects off-image in all views")
    masked = np.where(usable, scores, -np.inf)
    best = int(np.argmax(masked))
    return grid_points[best], best, scores


@dataclass
class ActionSample:
    translation: np.ndarray       # world 3-vector
    grid_cell: np.ndarray         # 3 ints
    rotation_bins: np.ndarray     # 3 ints in [0, R)
    gripper_open: bool
    collision_allowed: bool

    def to_dict(self):
        return {"translation": self.translation.tolist(),
                "grid_cell": [int(x) for x in self.grid_cell],
                "rotation_bins": [int(x) for x in self.rotation_bins],
                "gripper_open": bool(self.gripper_open),
                "collision_allowed": bool(self.collision_allowed)}

    @staticmethod
    def from_dict(d):
        return ActionSample(np.asarray(d["translation"], dtype=np.float64),
                            np.asarray(d["grid_cell"], dtype=int),
                            np.asarray(d["rotation_bins"], dtype=int),
                            d["gripper_open"], d["collision_allowed"])


class ActionHeads:
    """Dense heads on [global ; 4 local] features for the discrete components."""

    def __init__(self, feat_c: int, rotation_bins: int = 72, hidden: int = 64,
                 seed: int = 0):
        rng = np.random.default_rng(seed)
        self.rotation_bins = rotation_bins
        in_dim = 8 * feat_c + 4 * feat_c
        p = ParamStore()
        p.add("h_w1", _he(rng, in_dim, hidden))
        p.add("h_b1", np.zeros(hidden))
        for k in range(3):
            p.add(f"h_rot{k}", _he(rng, hidden, rotation_bins))
        p.add("h_grip", _he(rng, hidden, 2))
        p.add("h_coll", _he(rng, hidden, 2))
        self.params = p

    def forward(self, global_feat: Tensor, local_feats: list[Tensor]):
        p = self.params
        x = nc.concat([global_feat] + list(local_feats), axis=0)
        h = nc.relu(x.reshape(1, x.shape[0]) @ p["h_w1"] + p["h_b1"].reshape(1, -1))
        rot = [(h @ p[f"h_rot{k}"]).reshape(self.rotation_bins) for k in range(3)]
        grip = (h @ p["h_grip"]).reshape(2)
        coll = (h @ p["h_coll"]).reshape(2)
        return {"rotation": rot, "gripper": grip, "collision": coll}


def local_features(preds: list[ViewPrediction]) -> list[Tensor]:
    """Pool each view's feature map at its heatmap argmax pixel."""
    out = []
    for pr in preds:
        hm = pr.heatmap.data
        flat = int(np.argmax(hm.reshape(-1)))
        h, w = hm.shape
        v, u = divmod(flat, w)
        c, hf, wf = pr.feature_map.shape
        # map heatmap pixel to feature-map coordinates
        uf = u * (wf - 1) / max(w - 1, 1)
        vf = v * (hf - 1) / max(h - 1, 1)
        out.append(bilinear_sample(pr.feature_map, np.array([[uf, vf]])).reshape(c))
    return out


def refine_stage(coarse: np.ndarray, cloud: ColoredCloud, workspace_bounds,
                 resolution: int, zoom: float, splat_radius_px: float = 1.0):
    """Re-render the static views zoomed to a cube centered on the coarse point."""
    lo = np.asarray(workspace_bounds[0], dtype=np.float64)
    hi = np.asarray(workspace_bounds[1], dtype=np.float64)
    center = np.asarray(coarse, dtype=np.float64)
    half = zoom / 2.0
    zlo = np.maximum(center - half, lo)
    zhi = np.minimum(center + half, hi)
    clipped = bool(np.any(zlo > center - half) or np.any(zhi < center + half))
    if np.any(zhi - zlo <= 0):
        raise FormatError("zoom cube has no overlap with the workspace")
    cams = make_static_cameras((zlo, zhi), resolution)
    inside = np.all((cloud.points >= zlo - 1e-9) & (cloud.points <= zhi + 1e-9), axis=1)
    pts = cloud.points[inside] if inside.any() else cloud.points
    cols = cloud.colors[inside] if inside.any() else cloud.colors
    sub = ColoredCloud(pts, cols)
    views = [render_view(sub, cam, splat_radius_px) for cam in cams]
    return views, cams, clipped


# -- pretraining ------------------------------------------------------------------

@dataclass
class PretrainConfig:
    epochs: int = 15
    lr: float = 2e-3
    sigma_px: float = 2.0
    seed: int = 0


def pretrain_position(encoder: DynamicEncoder, sequences,
                      cfg: PretrainConfig | None = None):
    """Minimize KL between compressed saliency and Gaussian EE-pixel targets.

    Returns the per-epoch mean loss history; the caller freezes the encoder
    afterwards for policy training.
    """
    cfg = cfg or PretrainConfig()
    if not sequences:
        raise FormatError("empty pretraining dataset")
    frames = []
    for seq in sequences:
        for fb, label, vis in zip(seq.frames, seq.labels, seq.visible):
            if vis:
                frames.append((fb, label))
    rng = np.random.default_rng(cfg.seed)
    opt = Adam([t for t in encoder.params.values() if t.requires_grad], lr=cfg.lr)
    res = encoder.cfg.resolution
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(frames))
        ep_losses = []
        for k in order:
            fb, label = frames[k]
            df = encoder.forward(fb)
            pred = compress_saliency(df.saliency_raw, (res, res),
                                     encoder.params["d_tconv"].reshape(1, 1, 2, 1, 1))
            target = saliency_target(label, (res, res), cfg.sigma_px)
            loss = losses.kl_saliency(pred.reshape(res, res), target)
            opt.zero_grad()
            loss.backward()
            opt.step()
            ep_losses.append(loss.item())
        history.append(float(np.mean(ep_losses)))
    return history


def predict_saliency(encoder: DynamicEncoder, frame: ViewBundle) -> np.ndarray:
    res = encoder.cfg.resolution
    df = encoder.forward(frame)
    pred = compress_saliency(df.saliency_raw, (res, res),
                             encoder.params["d_tconv"].reshape(1, 1, 2, 1, 1))
    return pred.numpy().reshape(res, res)


# -- policy training ----------------------------------------------------------------

@dataclass
class TrainSample:
    """One keyframe: rendered views, supervision bundle, and action target."""

    static_views: list            # 3 ViewBundles
    dynamic_view: ViewBundle
    bundle: object                # ConsistentKeypointBundle
    action: ActionSample
    task_id: int = 0


@dataclass
class PolicyConfig:
    static: StaticEncoderConfig = field(default_factory=StaticEncoderConfig)
    dynamic: DynamicEncoderConfig = field(default_factory=DynamicEncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    rotation_bins: int = 72
    grid_n: int = 32
    workspace_bounds: tuple = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    lr: float = 1e-3
    steps: int = 400
    batch_size: int = 4
    warmup_steps: int = 20
    max_keypoints: int = 32
    seed: int = 0


class DualStreamPolicy:
    def __init__(self, cfg: PolicyConfig, dynamic_encoder: DynamicEncoder | None = None):
        self.cfg = cfg
        self.static_encoder = StaticEncoder(cfg.static, seed=cfg.seed)
        self.dynamic_encoder = dynamic_encoder or DynamicEncoder(cfg.dynamic, seed=cfg.seed + 1)
        self.heads = ActionHeads(cfg.static.channels, cfg.rotation_bins, seed=cfg.seed + 2)

    def trainable_params(self) -> list[Tensor]:
        out = [t for t in self.static_encoder.params.values() if t.requires_grad]
        if not self.dynamic_encoder.frozen:
            out += [t for t in self.dynamic_encoder.params.values() if t.requires_grad]
        out += [t for t in self.heads.params.values() if t.requires_grad]
        return out

    def all_params(self) -> ParamStore:
        store = ParamStore()
        for src in (self.static_encoder.params, self.dynamic_encoder.params,
                    self.heads.params):
            for k, v in src.items():
                store[k] = v
        return store

    # -- forward pieces ---------------------------------------------------------

    def forward_views(self, sample: TrainSample):
        static_preds = self.static_encoder.forward(sample.static_views, sample.task_id)
        df = self.dynamic_encoder.forward(sample.dynamic_view)
        res = self.dynamic_encoder.cfg.resolution
        sal = compress_saliency(df.saliency_raw, (res, res),
                                self.dynamic_encoder.params["d_tconv"].reshape(1, 1, 2, 1, 1))
        p = self.dynamic_encoder.cfg.patch
        c = self.dynamic_encoder.cfg.out_channels
        dyn_fm = df.projected.T.reshape(c, p, p)
        dyn_pred = ViewPrediction(
            feature_map=dyn_fm,
            heatmap=sal.reshape(res, res),
            heatmap_logits=sal.reshape(res, res),
            kp_feature_map=dyn_fm)
        return static_preds, dyn_pred, df

    def sample_keypoint_features(self, static_preds, bundle) -> KeypointFeatures | None:
        total = len(bundle.world_points)
        m = min(total, self.cfg.max_keypoints)
        if m < 2:
            return None
        # evenly strided subsample keeps spatial coverage when confidences tie
        pick = np.linspace(0, total - 1, m).round().astype(int)
        feats = []
        for j, pr in enumerate(static_preds):
            uv = bundle.tracks[pick, j, :]
            feats.append(bilinear_sample(pr.kp_feature_map, uv))
        return KeypointFeatures(features=feats, world_points=bundle.world_points[pick])

    def loss_for_sample(self, sample: TrainSample):
        static_preds, dyn_pred, _ = self.forward_views(sample)
        preds = static_preds + [dyn_pred]
        # per-view translation targets (static views only; the dynamic
        # heatmap comes from the frozen encoder)
        heat_logits, heat_targets = [], []
        for pr, vb in zip(static_preds, sample.static_views):
            uv, z, behind = vb.camera.project(sample.action.translation)
            if behind or not vb.camera.in_image(uv)[0]:
                heat_targets.append(None)
                heat_logits.append(pr.heatmap_logits)
                continue
            h, w = vb.camera.resolution
            tgt = int(round(uv[1])) * w + int(round(uv[0]))
            heat_logits.append(pr.heatmap_logits)
            heat_targets.append(tgt)
        gfeat = build_global_feature(preds)
        lfeat = local_features(preds)
        head_out = self.heads.forward(gfeat, lfeat)
        pred_dict = {"heatmaps": heat_logits, "rotation": head_out["rotation"],
                     "gripper": head_out["gripper"], "collision": head_out["collision"]}
        tgt_dict = {"heatmaps": heat_targets,
                    "rotation": [int(b) for b in sample.action.rotation_bins],
                    "gripper": int(sample.action.gripper_open),
                    "collision": int(sample.action.collision_allowed)}
        l_action = losses.action_loss(pred_dict, tgt_dict)
        kf = self.sample_keypoint_features(static_preds, sample.bundle)
        if kf is not None and self.cfg.loss.lam > 0:
            l_cgc = cgc_loss(kf, self.cfg.loss)
        else:
            l_cgc = Tensor(0.0)
        return l_action, l_cgc, preds

    # -- inference -----------------------------------------------------------------

    def predict(self, sample: TrainSample):
        static_preds, dyn_pred, _ = self.forward_views(sample)
        preds = static_preds + [dyn_pred]
        heatmaps = [pr.heatmap.numpy() for pr in preds]
        cameras = [vb.camera for vb in sample.static_views] + [sample.dynamic_view.camera]
        grid_pts, _ = make_grid(self.cfg.workspace_bounds, self.cfg.grid_n)
        trans, best, _ = decode_translation(heatmaps, cameras, grid_pts)
        gfeat = build_global_feature(preds)
        lfeat = local_features(preds)
        head_out = self.heads.forward(gfeat, lfeat)
        rot = [int(np.argmax(r.numpy())) for r in head_out["rotation"]]
        grip = bool(np.argmax(head_out["gripper"].numpy()))
        coll = bool(np.argmax(head_out["collision"].numpy()))
        cell = world_to_cell(trans, self.cfg.workspace_bounds, self.cfg.grid_n)
        return {"translation": trans, "cell": cell, "rotation": rot,
                "gripper_open": grip, "collision_allowed": coll}

    def matched_cosine(self, sample: TrainSample) -> float:
        """Cross-view feature alignment: matched cosine minus mean negative cosine.

        Raw matched cosine is already high for a random smooth encoder, so the
        consistency-driven quantity is the margin over the negative set.
        """
        static_preds = self.static_encoder.forward(sample.static_views, sample.task_id)
        kf = self.sample_keypoint_features(static_preds, sample.bundle)
        if kf is None:
            return float("nan")
        feats = [f.numpy() for f in kf.features]
        feats = [f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)
                 for f in feats]
        pts = kf.world_points
        dist = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        neg = dist > self.cfg.loss.zeta
        n = len(feats)
        vals = []
        for pidx in range(n):
            qidx = (pidx + 1) % n
            sims = feats[qidx] @ feats[pidx].T   # sims[j, i]
            pos = np.diag(sims)
            for i in range(len(pts)):
                js = np.flatnonzero(neg[:, i])
                if len(js):
                    vals.append(pos[i] - sims[js, i].mean())
        return float(np.mean(vals)) if vals else float("nan")


def train_policy(policy: DualStreamPolicy, samples: list[TrainSample],
                 metrics_path: str | None = None, log_every: int = 10):
    """Stochastic minimization of the weighted action + consistency loss."""
    cfg = policy.cfg
    rng = np.random.default_rng(cfg.seed)
    params = policy.trainable_params()
    opt = Adam(params, lr=cfg.lr)
    history = []
    last_good = {id(p): p.data.copy() for p in params}
    mfh = open(metrics_path, "w") if metrics_path else None
    try:
        for step in range(cfg.steps):
            lr_scale = min(1.0, (step + 1) / max(cfg.warmup_steps, 1))
            opt.lr = cfg.lr * lr_scale
            batch = rng.choice(len(samples), size=min(cfg.batch_size, len(samples)),
                               replace=False)
            opt.zero_grad()
            tot_a = tot_c = 0.0
            loss_sum = None
            for bi in batch:
                l_action, l_cgc, _ = policy.loss_for_sample(samples[bi])
                loss = losses.total_loss(l_action, l_cgc, cfg.loss)
                loss_sum = loss if loss_sum is None else loss_sum + loss
                tot_a += l_action.item()
                tot_c += l_cgc.item()
            loss_mean = loss_sum * (1.0 / len(batch))
            if not np.isfinite(loss_mean.data).all():
                for p in params:
                    p.data = last_good[id(p)]
                raise NumericalError("NaN loss; restored last-good parameters")
            loss_mean.backward()
            opt.step()
            if step % 50 == 0:
                last_good = {id(p): p.data.copy() for p in params}
            rec = {"step": step, "loss_action": tot_a / len(batch),
                   "loss_cgc": tot_c / len(batch),
                   "loss_total": loss_mean.item(), "lr": opt.lr}
            history.append(rec)
            if mfh and step % log_every == 0:
                mfh.write(json.dumps(rec) + "\n")
    finally:
        if mfh:
            mfh.close()
    return history


def evaluate_policy(policy: DualStreamPolicy, samples: list[TrainSample]) -> dict:
    """Per-component accuracies over held-out keyframes."""
    n = len(samples)
    if n == 0:
        raise FormatError("no evaluation samples")
    t_hits = r_hits = g_hits = c_hits = 0
    cosines = []
    for s in samples:
        out = policy.predict(s)
        if np.abs(out["cell"] - s.action.grid_cell).max() <= 1:
            t_hits += 1
        if all(int(a) == int(b) for a, b in zip(out["rotation"], s.action.rotation_bins)):
            r_hits += 1
        if out["gripper_open"] == s.action.gripper_open:
            g_hits += 1
        if out["collision_allowed"] == s.action.collision_allowed:
            c_hits += 1
        c = policy.matched_cosine(s)
        if np.isfinite(c):
            cosines.append(c)
    return {"translation_acc": t_hits / n, "rotation_acc": r_hits / n,
            "gripper_acc": g_hits / n, "collision_acc": c_hits / n,
            "feature_alignment": float(np.mean(cosines)) if cosines else float("nan")}
