"""Differentiable training objectives.

Implements the smooth average-precision ranking objective over cross-view
keypoint features, its cyclic multi-view form, per-component action
cross-entropy, the KL saliency objective, and the weighted total.

Per query keypoint i in view p, the positive set is the singleton matching
keypoint in view q and the negative set is every other keypoint farther than
zeta in 3D; keypoints inside the zeta ball are excluded from both sets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import FormatError, SampleError, ShapeError
from .numcore import Tensor


@dataclass
class LossConfig:
    tau: float = 0.01        # sigmoid temperature
    zeta: float = 0.1        # negative-set 3D distance threshold
    lam: float = 1.0         # consistency loss weight
    normalize_features: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise FormatError("tau must be positive")
        if self.zeta < 0 or self.lam < 0:
            raise FormatError("zeta and lam must be non-negative")


@dataclass
class KeypointFeatures:
    """Per-view sampled feature vectors for one keypoint bundle."""

    features: list           # N Tensors, each M x C
    world_points: np.ndarray  # M x 3

    def __post_init__(self):
        m = self.features[0].shape[0]
        for f in self.features:
            if f.shape[0] != m:
                raise ShapeError("all views must carry the same keypoint count")
        if len(self.world_points) != m:
            raise ShapeError("world_points length mismatch")

    @property
    def view_count(self):
        return len(self.features)


def bilinear_sample(fm: Tensor, uv: np.ndarray) -> Tensor:
    """Sample a C x H x W feature map at continuous pixel coordinates.

    uv is Mx2 (or a single pair); returns an MxC tensor, differentiable
    w.r.t. the feature map.  Coordinates must lie in [0, W-1] x [0, H-1].
    """
    if fm.data.ndim != 3:
        raise ShapeError("feature map must be C x H x W")
    c, h, w = fm.shape
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    if np.any(uv[:, 0] < 0) or np.any(uv[:, 0] > w - 1) or \
       np.any(uv[:, 1] < 0) or np.any(uv[:, 1] > h - 1):
        raise SampleError(f"uv outside [0,{w - 1}]x[0,{h - 1}]")
    u, v = uv[:, 0], uv[:, 1]
    u0 = np.clip(np.floor(u).astype(int), 0, w - 2) if w > 1 else np.zeros(len(u), int)
    v0 = np.clip(np.floor(v).astype(int), 0, h - 2) if h > 1 else np.zeros(len(v), int)
    fu = u - u0
    fv = v - v0
    w00 = (1 - fu) * (1 - fv)
    w01 = fu * (1 - fv)
    w10 = (1 - fu) * fv
    w11 = fu * fv
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    data = fm.data
    out = (data[:, v0, u0] * w00 + data[:, v0, u1] * w01 +
           data[:, v1, u0] * w10 + data[:, v1, u1] * w11).T  # M x C

    def _backward(g):
        gf = np.zeros_like(data)
        gt = g.T  # C x M
        np.add.at(gf, (slice(None), v0, u0), gt * w00)
        np.add.at(gf, (slice(None), v0, u1), gt * w01)
        np.add.at(gf, (slice(None), v1, u0), gt * w10)
        np.add.at(gf, (slice(None), v1, u1), gt * w11)
        fm._accumulate(gf)

    track = fm.requires_grad
    return Tensor(out, _parents=(fm,) if track else (),
                  _backward=_backward if track else None)


def negative_set(i: int, world_points: np.ndarray, zeta: float) -> np.ndarray:
    """Indices j != i whose 3D distance to point i exceeds zeta."""
    d = np.linalg.norm(world_points - world_points[i], axis=1)
    mask = d > zeta
    mask[i] = False
    return np.flatnonzero(mask)


def _negative_mask(world_points: np.ndarray, zeta: float) -> np.ndarray:
    """mask[j, i] = True iff j is a negative for query i."""
    diff = world_points[:, None, :] - world_points[None, :, :]
    d = np.linalg.norm(diff, axis=2)
    mask = d > zeta
    np.fill_diagonal(mask, False)
    return mask


def smooth_ap(p: int, q: int, kf: KeypointFeatures, cfg: LossConfig) -> Tensor:
    """Smooth average precision for ranking view-q matches of view-p queries.

    For each query i the positive is its own track in view q; a negative j
    counts through a temperature-tau sigmoid of the similarity margin
    D_ij = f_j . f_i^{vp} - f_i^{vq} . f_i^{vp}.  Returns the mean over
    queries, a differentiable scalar in (0, 1].
    """
    m = kf.features[0].shape[0]
    if m == 0:
        raise FormatError("empty keypoint bundle")
    f_p, f_q = kf.features[p], kf.features[q]
    if cfg.normalize_features:
        f_p = nc.l2_normalize_rows(f_p)
        f_q = nc.l2_normalize_rows(f_q)
    sims = f_q @ f_p.T                      # sims[j, i] = f_j^vq . f_i^vp
    eye = np.eye(m)
    diag = (sims * eye).sum(axis=0, keepdims=True)   # 1 x M, f_i^vq . f_i^vp
    d = sims - diag                                   # D[j, i]
    g = nc.sigmoid(d * (1.0 / cfg.tau))
    pos = (g * eye).sum(axis=0)                       # G(D_ii) = G(0) = 0.5
    neg_mask = _negative_mask(kf.world_points, cfg.zeta).astype(np.float64)
    neg = (g * neg_mask).sum(axis=0)
    num = pos + 1.0
    ap_per_query = num / (num + neg)
    return ap_per_query.mean()


def cgc_loss(kf: KeypointFeatures, cfg: LossConfig) -> Tensor:
    """Cyclic cross-view consistency: 1 - mean smooth AP over the view loop."""
    n = kf.view_count
    if n < 2:
        raise FormatError("cyclic consistency needs at least 2 views")
    total = None
    for p in range(n):
        ap = smooth_ap(p, (p + 1) % n, kf, cfg)
        total = ap if total is None else total + ap
    return 1.0 - total * (1.0 / n)


def action_loss(preds: dict, targets: dict) -> Tensor:
    """Sum of softmax cross-entropies over all action components.

    preds: {"heatmaps": [Tensor HW-logits per view], "rotation": [3 Tensors],
    "gripper": Tensor[2], "collision": Tensor[2]}.  targets mirror the
    structure with integer class indices ("heatmaps" entries may be None for
    views where the target projects off-image).
    """
    total = None

    def _add(t):
        nonlocal total
        total = t if total is None else total + t

    for logits, tgt in zip(preds.get("heatmaps", []), targets.get("heatmaps", [])):
        if tgt is None:
            continue
        flat = logits.reshape(logits.size)
        if not (0 <= int(tgt) < flat.shape[0]):
            raise FormatError(f"heatmap target {tgt} out of range")
        _add(nc.softmax_cross_entropy(flat, int(tgt)))
    for logits, tgt in zip(preds.get("rotation", []), targets.get("rotation", [])):
        if not (0 <= int(tgt) < logits.shape[0]):
            raise FormatError(f"rotation bin {tgt} out of range")
        _add(nc.softmax_cross_entropy(logits, int(tgt)))
    for key in ("gripper", "collision"):
        if key in preds:
            tgt = int(targets[key])
            if not (0 <= tgt < preds[key].shape[0]):
                raise FormatError(f"{key} target {tgt} out of range")
            _add(nc.softmax_cross_entropy(preds[key], tgt))
    if total is None:
        raise FormatError("no action components to score")
    return total


def kl_saliency(pred: Tensor, target: np.ndarray) -> Tensor:
    """KL(target || pred) between two normalized H x W distributions."""
    target = np.asarray(target, dtype=np.float64)
    if abs(float(target.sum()) - 1.0) > 1e-5:
        raise FormatError("target distribution must sum to 1")
    if abs(float(pred.data.sum()) - 1.0) > 1e-5:
        raise FormatError("pred distribution must sum to 1")
    p = nc.clamp(pred, lo=1e-12)
    tpos = np.where(target > 0, target, 1.0)  # 0 log 0 = 0
    const = float((target * np.log(tpos)).sum())
    cross = (Tensor(target) * nc.tlog(p)).sum()
    return const - cross


def total_loss(action: Tensor, cgc: Tensor, cfg: LossConfig) -> Tensor:
    """Weighted sum of the action and consistency objectives."""
    return action + cfg.lam * cgc


def discrete_ap(p: int, q: int, features: list, world_points: np.ndarray,
                zeta: float, normalize: bool = True) -> float:
    """Brute-force ranking oracle: hard-count negatives above each positive.

    Independent of the smooth path: plain numpy similarities, binary counts,
    step(0) = 1/2 for the positive's own zero margin.
    """
    f_p = np.asarray(features[p], dtype=np.float64)
    f_q = np.asarray(features[q], dtype=np.float64)
    if normalize:
        f_p = f_p / np.linalg.norm(f_p, axis=1, keepdims=True)
        f_q = f_q / np.linalg.norm(f_q, axis=1, keepdims=True)
    m = len(f_p)
    vals = []
    for i in range(m):
        pos_sim = float(f_q[i] @ f_p[i])
        above = 0.0
        for j in negative_set(i, world_points, zeta):
            s = float(f_q[j] @ f_p[i])
            if s > pos_sim:
                above += 1.0
            elif s == pos_sim:
                above += 0.5
        vals.append(1.5 / (1.5 + above))
    return float(np.mean(vals))
