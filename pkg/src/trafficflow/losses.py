"""Weakly-supervised training objective.

All terms are computed in float64 so the per-term report sums exactly to
the total; gradients flow back to whatever precision the network runs in.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .geometry import SE3Transform, gaussian_kde, knn_points


class AllPointsDiscardedWarning(UserWarning):
    """Every point fell below the soft-Chamfer density threshold."""


@dataclass
class LossConfig:
    delta: float = 0.05
    eps_chamfer: float = 1e-3
    alpha: float = 0.5
    lambda_bg: float = 0.5
    lambda_opt: float = 0.1
    dt: float = 0.1
    k_smooth: int = 4
    kde_bandwidth: float = 1.0

    def __post_init__(self):
        for name in ("delta", "eps_chamfer", "alpha", "lambda_bg", "lambda_opt", "dt", "kde_bandwidth"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.k_smooth < 1:
            raise ValueError("k_smooth must be >= 1")


@dataclass
class CameraModel:
    """Pinhole camera; ``extrinsics`` maps radar coordinates to camera coordinates
    (z forward)."""
    intrinsics: np.ndarray
    extrinsics: SE3Transform
    image_size: tuple  # (width, height) pixels

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        if self.intrinsics[0, 0] <= 0 or self.intrinsics[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")

    @classmethod
    def forward_facing(cls, focal=800.0, size=(1280, 720)):
        # radar x forward, y left, z up -> camera z forward, x right, y down
        rot = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
        k = np.array([[focal, 0.0, size[0] / 2], [0.0, focal, size[1] / 2], [0.0, 0.0, 1.0]])
        return cls(k, SE3Transform.from_rt(rot, [0.0, 0.0, 0.0]), size)

    def to_camera(self, points):
        return self.extrinsics.transform_points(points)

    def project(self, points):
        """Pixels (N, 2) and depth (N,) of radar-frame points."""
        cam = np.asarray(self.to_camera(points))
        uvw = cam @ self.intrinsics.T
        with np.errstate(divide="ignore", invalid="ignore"):
            pix = uvw[:, :2] / uvw[:, 2:3]
        return pix, cam[:, 2]

    def inside(self, pix, depth):
        w, h = self.image_size
        return (depth > 0) & (pix[:, 0] >= 0) & (pix[:, 0] < w) & (pix[:, 1] >= 0) & (pix[:, 1] < h)


def pseudo_optical_flow(camera: CameraModel, positions, flow):
    """Pixel displacement of each point's projection under ``flow`` plus a
    validity mask (both ends in front of the camera and inside the image)."""
    pix0, d0 = camera.project(positions)
    pix1, d1 = camera.project(np.asarray(positions) + np.asarray(flow))
    valid = camera.inside(pix0, d0) & camera.inside(pix1, d1)
    return np.where(valid[:, None], pix1 - pix0, 0.0), valid


def _f64(x):
    return torch.as_tensor(x).to(torch.float64)


# ------------------------------------------------------------ self-supervised

def soft_chamfer(p_warp, q, cfg: LossConfig):
    """Symmetric hinged nearest-neighbour squared distance, dropping points
    whose KDE density (within their own cloud) is at or below ``delta``."""
    p_warp, q = _f64(p_warp), _f64(q)
    if len(p_warp) == 0 or len(q) == 0:
        raise ValueError("soft Chamfer needs two nonempty clouds")
    total = p_warp.new_zeros(())
    kept = 0
    for a, b in ((p_warp, q), (q, p_warp)):
        dens = gaussian_kde(a.detach().numpy(), cfg.kde_bandwidth)
        keep = torch.from_numpy(dens > cfg.delta)
        kept += int(keep.sum())
        nn_idx = torch.from_numpy(knn_points(a.detach().numpy(), b.detach().numpy(), 1)[:, 0])
        d2 = ((a - b[nn_idx]) ** 2).sum(-1)
        total = total + torch.where(keep, torch.clamp(d2 - cfg.eps_chamfer, min=0.0), 0.0).sum()
    if kept == 0:
        warnings.warn("soft Chamfer: all points below density threshold", AllPointsDiscardedWarning)
    return total


def _neighbors_excluding_self(positions, k):
    n = len(positions)
    k = min(k, n - 1)
    if k < 1:
        return np.zeros((n, 0), dtype=np.int64)
    idx = knn_points(positions, positions, k + 1)
    is_self = idx == np.arange(n)[:, None]
    no_self = ~is_self.any(axis=1)
    is_self[no_self, -1] = True
    return idx[~is_self].reshape(n, k)


def spatial_smoothness(positions, flow, cfg: LossConfig):
    """Sum over points and their ``k_smooth`` nearest neighbours of the
    per-point softmax of RBF kernel values times the squared flow difference."""
    pos_np = np.asarray(positions.detach().numpy() if isinstance(positions, torch.Tensor) else positions,
                        dtype=np.float64)
    flow = _f64(flow)
    idx = torch.from_numpy(_neighbors_excluding_self(pos_np, cfg.k_smooth))
    if idx.shape[1] == 0:
        return flow.new_zeros(())
    pos = _f64(pos_np)
    d2 = ((pos[:, None, :] - pos[idx]) ** 2).sum(-1)
    weights = torch.softmax(torch.exp(-d2 / cfg.alpha), dim=1)
    diff = ((flow[:, None, :] - flow[idx]) ** 2).sum(-1)
    return (weights * diff).sum()


def radial_displacement(positions, flow, rrv, dt):
    """Sum of |radial flow component - RRV * dt|; points at the origin are skipped."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    pos, flow, rrv = _f64(positions), _f64(flow), _f64(rrv)
    norms = torch.linalg.norm(pos, dim=1)
    ok = norms > 0
    radial = (flow[ok] * pos[ok]).sum(-1) / norms[ok]
    return torch.abs(radial - rrv[ok] * dt).sum()


# ---------------------------------------------------------------- supervised

def _masked_mean_l2(pred, target, mask):
    pred, target = _f64(pred), _f64(target)
    mask = torch.as_tensor(np.asarray(mask), dtype=torch.bool)
    if not mask.any():
        return pred.new_zeros(())
    return torch.linalg.norm(pred[mask] - target[mask], dim=1).mean()


def foreground_loss(pred_flow, pseudo_gt, moving_mask):
    return _masked_mean_l2(pred_flow, pseudo_gt, moving_mask)


def background_loss(pred_flow, pseudo_gt, static_mask):
    return _masked_mean_l2(pred_flow, pseudo_gt, static_mask)


def seg_loss(prob, pseudo_mask, clamp=1e-7):
    """Half the summed binary cross-entropy (nonnegative form)."""
    s = torch.clamp(_f64(prob), clamp, 1 - clamp)
    y = _f64(np.asarray(pseudo_mask, dtype=np.float64))
    return -0.5 * (y * torch.log(s) + (1 - y) * torch.log(1 - s)).sum()


def ego_loss(omega_pred, omega_gt, positions):
    """Mean norm of ``(omega_gt - omega_pred) @ [p; 1]``."""
    pred = _f64(omega_pred)
    gt = _f64(omega_gt.matrix if isinstance(omega_gt, SE3Transform) else omega_gt)
    pos = _f64(positions)
    homo = torch.cat([pos, torch.ones(len(pos), 1, dtype=torch.float64)], dim=1)
    return torch.linalg.norm(homo @ (gt - pred).T, dim=1).mean()


def optical_flow_loss(positions, pred_flow, camera: CameraModel, pseudo_opt_flow, moving_mask):
    """Mean distance between each warped moving point and the camera ray
    through its optical-flow-displaced pixel. Points whose start or warped
    pseudo-target is behind the camera or off-image are excluded."""
    pos = np.asarray(positions, dtype=np.float64)
    pix0, depth = camera.project(pos)
    target_pix = pix0 + np.asarray(pseudo_opt_flow)
    valid = np.asarray(moving_mask, dtype=bool) & camera.inside(pix0, depth)
    w, h = camera.image_size
    valid &= (target_pix[:, 0] >= 0) & (target_pix[:, 0] < w) & (target_pix[:, 1] >= 0) & (target_pix[:, 1] < h)
    flow = _f64(pred_flow)
    if not valid.any():
        return flow.new_zeros(())
    rays = np.concatenate([target_pix[valid], np.ones((valid.sum(), 1))], axis=1) @ np.linalg.inv(camera.intrinsics).T
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    rot = _f64(camera.extrinsics.rotation)
    trans = _f64(camera.extrinsics.translation)
    sel = torch.from_numpy(np.flatnonzero(valid))
    x = (_f64(pos[valid]) + flow[sel]) @ rot.T + trans
    d = _f64(rays)
    along = (x * d).sum(-1, keepdim=True) * d
    return torch.linalg.norm(x - along, dim=1).mean()


# --------------------------------------------------------------------- total

@dataclass
class LossTargets:
    """Labels for one P -> Q pair, all indexed like the full cloud P."""
    p_positions: np.ndarray
    q_positions: np.ndarray
    rrv: np.ndarray
    dt: float
    moving_mask: np.ndarray
    fg_flow: np.ndarray
    bg_flow: np.ndarray
    gt_flow: Optional[np.ndarray] = None
    seg_mask: Optional[np.ndarray] = None
    omega_gt: Optional[SE3Transform] = None
    camera: Optional[CameraModel] = None
    opt_flow: Optional[np.ndarray] = None
    opt_mask: Optional[np.ndarray] = None


TERMS = ("sc", "ss", "rd", "fg", "bg", "seg", "ego", "opt")


def total_loss(out, targets: LossTargets, cfg: LossConfig, supervision: str):
    """Combine the terms active for ``supervision``.

    Returns ``(total, report)`` where ``report`` maps each term name to its
    weighted contribution; the contributions add up to ``total`` exactly.
    """
    if supervision not in ("cross", "cross_plus", "self", "full"):
        raise ValueError(f"unknown supervision {supervision!r}")
    terms = {}
    p_pos = targets.p_positions
    flow = out.flow
    if supervision != "full":
        terms["sc"] = soft_chamfer(_f64(p_pos) + _f64(flow), targets.q_positions, cfg)
        terms["ss"] = spatial_smoothness(p_pos, flow, cfg)
        terms["rd"] = radial_displacement(p_pos, flow, targets.rrv, targets.dt)
    if supervision != "self":
        fg_target = targets.gt_flow if supervision == "full" else targets.fg_flow
        bg_target = targets.gt_flow if supervision == "full" else targets.bg_flow
        moving = np.asarray(targets.moving_mask, dtype=bool)
        fg = bg = None
        for level in out.levels:
            idx = level.index
            f = foreground_loss(level.flow, fg_target[idx], moving[idx])
            b = background_loss(level.flow, bg_target[idx], ~moving[idx])
            fg = f if fg is None else fg + f
            bg = b if bg is None else bg + b
        terms["fg"] = fg
        terms["bg"] = cfg.lambda_bg * bg
    if supervision in ("cross", "full") and out.seg_prob is not None:
        terms["seg"] = seg_loss(out.seg_prob, targets.seg_mask)
        terms["ego"] = ego_loss(out.omega, targets.omega_gt, p_pos)
    if supervision == "cross" and targets.camera is not None:
        terms["opt"] = cfg.lambda_opt * optical_flow_loss(
            p_pos, flow, targets.camera, targets.opt_flow,
            targets.moving_mask if targets.opt_mask is None else targets.opt_mask)
    total = None
    for name in TERMS:
        if name in terms:
            total = terms[name] if total is None else total + terms[name]
    report = {name: terms[name].item() for name in TERMS if name in terms}
    return total, report
