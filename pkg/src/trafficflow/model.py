"""Traffic-aware hierarchical scene-flow network.

The network predicts per-point flow from cloud P (time t) to cloud Q
(time t+1) coarse to fine over ``levels`` point sets. Level 1 uses point
matching only; every finer level additionally builds a BEV traffic vector
field (TVF) from the BEV detector pyramid of Q and the previous level's flow
embeddings, and reads it back per point.

Level lists are ordered coarsest first: ``levels[0]`` is level 1.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import (MLP, Attention, AttentionSpec, AxialAttentionBlock, Conv2d, ConvGRUCell,
                     PointToGridAttention, SpatialAttentionFusion, leaky)
from .geometry import (DegenerateGeometryError, GridSpec, SizeError, farthest_point_sampling,
                       inverse_distance_interpolate, knn_points, voxelize_2d)

VARIANTS = ("ego", "superego", "no-ego")
SUPERVISION = ("cross", "cross_plus", "self", "full")
ALLOWED_SUPERVISION = {
    "ego": ("cross", "self", "full"),
    "superego": ("cross_plus", "self", "full"),
    "no-ego": ("cross_plus", "self", "full"),
}


@dataclass
class ModelConfig:
    levels: int = 4
    gamma: int = 1
    point_channels: int = 64
    embed_channels: int = 256
    tvf_channels: int = 128
    axial_blocks: int = 4
    k_cross: int = 16
    k_tvf: int = 9
    clip_length: int = 5
    grid: GridSpec = field(default_factory=lambda: GridSpec((0.0, -25.6), 1.28, (40, 40)))
    variant: str = "ego"
    supervision: str = "cross"
    k_self: int = 8
    k_encoder: int = 8
    k_interp: int = 3
    k_temporal: int = 3
    use_tvf: bool = True
    use_od: bool = True
    use_temporal: bool = True
    od_channels: int = 32
    od_base_shape: tuple = (32, 32)

    def __post_init__(self):
        if isinstance(self.grid, dict):
            self.grid = GridSpec(**self.grid)
        self.od_base_shape = tuple(self.od_base_shape)
        if self.levels < 2:
            raise ValueError("need at least two levels")
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if self.k_tvf not in (5, 9, 13):
            raise ValueError("k_tvf must be one of 5, 9, 13")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.supervision not in ALLOWED_SUPERVISION[self.variant]:
            raise ValueError(f"supervision {self.supervision!r} not valid for variant {self.variant!r}")
        if self.k_tvf > self.grid.num_cells:
            raise ValueError("k_tvf exceeds the number of grid cells")

    @classmethod
    def vod(cls, **kw):
        return cls(**kw)

    @classmethod
    def proprietary(cls, **kw):
        base = dict(gamma=2, k_cross=8, clip_length=12,
                    grid=GridSpec((0.0, -40.0), 2.0, (70, 40)), variant="superego",
                    supervision="cross_plus")
        base.update(kw)
        return cls(**base)

    def level_sizes(self, n):
        return [max(1, int(round(n / self.gamma ** (self.levels - l)))) for l in range(1, self.levels + 1)]

    def to_dict(self):
        d = asdict(self)
        d["grid"] = {"origin": list(self.grid.origin), "cell_size": self.grid.cell_size,
                     "shape": list(self.grid.shape)}
        d["od_base_shape"] = list(self.od_base_shape)
        return d

    def fingerprint(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TemporalHidden:
    """Per-point recurrent state keyed to the cloud it was computed on."""
    positions: np.ndarray
    features: torch.Tensor

    def detach(self):
        return TemporalHidden(self.positions, self.features.detach())


@dataclass
class LevelOutput:
    index: np.ndarray          # rows of the full cloud P held at this level
    positions: np.ndarray      # P^l, unwarped
    features: torch.Tensor     # p^l
    flow: torch.Tensor         # F^l
    embedding: torch.Tensor    # e^l
    e_point: torch.Tensor
    e_traffic: Optional[torch.Tensor] = None
    tvf: Optional[torch.Tensor] = None


@dataclass
class ForwardOutput:
    flow: torch.Tensor
    levels: list
    hidden: Optional[TemporalHidden]
    seg_prob: Optional[torch.Tensor] = None
    static_mask: Optional[torch.Tensor] = None
    omega: Optional[torch.Tensor] = None


# ------------------------------------------------------------------ helpers

def _rel(positions, idx, centers):
    return positions[idx] - centers[:, None, :]


def weighted_kabsch(src, dst, weights, min_points=3, rank_tol=1e-9):
    """Rigid transform (4x4 tensor) minimising sum w_i |R src_i + t - dst_i|^2.

    Differentiable through ``torch.linalg.svd``. Raises
    :class:`DegenerateGeometryError` for fewer than ``min_points`` positive
    weights or a covariance of rank < 2 (collinear points).
    """
    if src.shape != dst.shape or src.shape[0] != weights.shape[0]:
        raise ValueError("src, dst and weights must describe the same points")
    if int((weights > 0).sum()) < min_points:
        raise DegenerateGeometryError("fewer than three weighted correspondences")
    w = weights / weights.sum()
    mu_s = (w[:, None] * src).sum(0)
    mu_d = (w[:, None] * dst).sum(0)
    cov = (src - mu_s).T @ (w[:, None] * (dst - mu_d))
    u, s, vh = torch.linalg.svd(cov)
    if s[0] <= 0 or s[1] <= rank_tol * s[0]:
        raise DegenerateGeometryError("rank-deficient covariance (collinear points)")
    d = torch.sign(torch.linalg.det(vh.T @ u.T)).detach()
    fix = torch.diag(torch.stack([torch.ones_like(d), torch.ones_like(d), d]))
    rot = vh.T @ fix @ u.T
    trans = mu_d - rot @ mu_s
    top = torch.cat([rot, trans[:, None]], dim=1)
    bottom = torch.tensor([[0.0, 0.0, 0.0, 1.0]], dtype=src.dtype)
    return torch.cat([top, bottom], dim=0)


# ------------------------------------------------------------------ modules

class PointGRU(nn.Module):
    """GRU over point sets: the previous cloud's hidden features are carried to
    the current points by inverse-distance interpolation over ``k`` neighbours,
    then gated against the current features (update gate weights the old state)."""

    def __init__(self, channels, k=3):
        super().__init__()
        self.k = k
        self.gates = nn.Linear(2 * channels, 2 * channels)
        self.cand = nn.Linear(2 * channels, channels)
        self.channels = channels

    def carry(self, positions, hidden: TemporalHidden):
        return inverse_distance_interpolate(hidden.positions, hidden.features, positions, k=self.k)

    def forward(self, features, positions, hidden: Optional[TemporalHidden]):
        if hidden is None or len(hidden.positions) == 0:
            hidden = TemporalHidden(np.asarray(positions), features)
        old = self.carry(positions, hidden)
        g = torch.sigmoid(self.gates(torch.cat([features, old], dim=-1)))
        r, z = g[:, : self.channels], g[:, self.channels:]
        cand = torch.tanh(self.cand(torch.cat([features, r * old], dim=-1)))
        new = z * old + (1 - z) * cand
        return new, TemporalHidden(np.asarray(positions), new)


class SetAbstraction(nn.Module):
    """Max-pool of an MLP over ``[neighbour feature, offset]`` for each center."""

    def __init__(self, in_channels, out_channels, k):
        super().__init__()
        self.k = k
        self.mlp = MLP(in_channels + 3, [out_channels, out_channels])

    def forward(self, centers, positions, features):
        k = min(self.k, len(positions))
        idx = torch.from_numpy(knn_points(centers, positions, k))
        pos_t = torch.as_tensor(positions, dtype=features.dtype)
        ctr_t = torch.as_tensor(centers, dtype=features.dtype)
        grouped = torch.cat([features[idx], _rel(pos_t, idx, ctr_t)], dim=-1)
        return self.mlp(grouped).max(dim=1).values


class MultiScaleEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.point_channels
        self.cfg = cfg
        self.stages = nn.ModuleList(SetAbstraction(c, c, cfg.k_encoder) for _ in range(cfg.levels))

    def level_indices(self, positions):
        """Row indices of the full cloud per level, coarsest first."""
        n = len(positions)
        cfg = self.cfg
        if n < cfg.gamma ** (cfg.levels - 1):
            raise SizeError(f"{n} points cannot fill {cfg.levels} levels at gamma={cfg.gamma}")
        sizes = cfg.level_sizes(n)
        out = [np.arange(n)]
        for m in reversed(sizes[:-1]):
            finer = out[0]
            sel = farthest_point_sampling(positions[finer], m, 0)
            out.insert(0, finer[np.sort(sel)])
        return out

    def forward(self, positions, features, indices=None):
        """Returns ``[(index, features)]`` per level, coarsest first."""
        indices = indices or self.level_indices(positions)
        L = self.cfg.levels
        feats = [None] * L
        top = indices[-1]
        feats[-1] = self.stages[-1](positions[top], positions[top], features[top])
        for l in range(L - 2, -1, -1):
            finer_idx, idx = indices[l + 1], indices[l]
            feats[l] = self.stages[l](positions[idx], positions[finer_idx], feats[l + 1])
        return list(zip(indices, feats))


class PointLevelEmbedding(nn.Module):
    """Cross-attention from each warped P point to its nearest Q points, then
    self-attention over the cross embeddings of its P neighbours."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c, d = cfg.point_channels, cfg.embed_channels
        self.k_cross, self.k_self = cfg.k_cross, cfg.k_self
        self.cross = Attention(AttentionSpec(c, c, d, d, positional_encoding=True, pe_hidden=d))
        self.self_attn = Attention(AttentionSpec(d, d, d, d, positional_encoding=True, pe_hidden=d))

    def forward(self, p_warp, q_pos, p_feat, q_feat):
        if self.k_cross > len(q_pos):
            raise SizeError(f"k_cross={self.k_cross} exceeds {len(q_pos)} points in Q")
        pw = torch.as_tensor(p_warp, dtype=p_feat.dtype)
        qp = torch.as_tensor(q_pos, dtype=p_feat.dtype)
        idx = torch.from_numpy(knn_points(pw, qp, self.k_cross))
        e_cross = self.cross(p_feat, q_feat[idx], rel_pos=_rel(qp, idx, pw))
        k = min(self.k_self, len(pw))
        nidx = torch.from_numpy(knn_points(pw, pw, k))
        return self.self_attn(e_cross, e_cross[nidx], rel_pos=_rel(pw, nidx, pw))


class TVFEncoder(nn.Module):
    """Builds TVF^l from the BEV detector map and the previous level's embeddings."""

    def __init__(self, cfg: ModelConfig, gru: ConvGRUCell):
        super().__init__()
        d_tvf = cfg.tvf_channels
        self.grid = cfg.grid
        self.use_od = cfg.use_od
        self.adapt = Conv2d(cfg.od_channels, d_tvf, 3)
        self.painter = PointToGridAttention(cfg.point_channels + cfg.embed_channels, d_tvf)
        self.fusion = SpatialAttentionFusion(d_tvf)
        self.axial = nn.ModuleList(AxialAttentionBlock(d_tvf) for _ in range(cfg.axial_blocks))
        # shared across levels, so not registered here
        self._gru = [gru]
        self.d_tvf = d_tvf

    def traffic(self, od_map, prev_tvf, dtype):
        h, w = self.grid.shape
        if od_map is None or not self.use_od:
            x = torch.zeros(h, w, self.d_tvf, dtype=dtype)
        else:
            x = leaky(self.adapt(od_map.to(dtype)))
            if x.shape[:2] != (h, w):
                x = F.adaptive_avg_pool2d(x.permute(2, 0, 1), (h, w)).permute(1, 2, 0)
        if prev_tvf is None:
            return x
        return self._gru[0](x, prev_tvf)

    def motion(self, warped_positions, features):
        h, w = self.grid.shape
        cells = voxelize_2d(warped_positions, self.grid)
        inside = cells[:, 0] >= 0
        flat = cells[inside, 0] * w + cells[inside, 1]
        keep = torch.from_numpy(np.flatnonzero(inside))
        pooled = self.painter(features[keep], torch.from_numpy(flat), h * w)
        return pooled.reshape(h, w, self.d_tvf)

    def forward(self, prev: LevelOutput, od_map, prev_tvf):
        dtype = prev.features.dtype
        x_traffic = self.traffic(od_map, prev_tvf, dtype)
        warped = torch.as_tensor(prev.positions, dtype=dtype) + prev.flow
        x_motion = self.motion(warped.detach().numpy(),
                               torch.cat([prev.features, prev.embedding], dim=-1))
        tvf = self.fusion(x_traffic, x_motion)
        for block in self.axial:
            tvf = block(tvf)
        return tvf


class TVFDecoder(nn.Module):
    """Grid-to-point cross-attention over the ``k_tvf`` nearest cell centers."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_channels
        self.k = cfg.k_tvf
        self.grid = cfg.grid
        self.centers = cfg.grid.cell_centers()
        self.attn = Attention(AttentionSpec(d + cfg.point_channels, cfg.tvf_channels, d, d,
                                            positional_encoding=True, pos_dim=2, pe_hidden=d))

    def neighbor_cells(self, warped):
        xy = warped.detach().numpy() if isinstance(warped, torch.Tensor) else np.asarray(warped)
        return knn_points(xy[:, :2], self.centers, self.k)

    def forward(self, p_warp, query, tvf):
        pw = torch.as_tensor(p_warp, dtype=query.dtype)
        idx = torch.from_numpy(self.neighbor_cells(pw))
        cells = tvf.reshape(-1, tvf.shape[-1])
        ctr = torch.as_tensor(self.centers, dtype=query.dtype)
        return self.attn(query, cells[idx], rel_pos=_rel(ctr, idx, pw[:, :2]))


class FlowHead(nn.Module):
    """Self-attention over the concatenated embeddings, reduction to C channels,
    residual flow regression on top of the interpolated coarse flow."""

    def __init__(self, in_dim, cfg: ModelConfig):
        super().__init__()
        d, c = cfg.embed_channels, cfg.point_channels
        self.k_self = cfg.k_self
        self.attn = Attention(AttentionSpec(in_dim, in_dim, d, d, positional_encoding=True, pe_hidden=d))
        self.reduce = nn.Linear(d, c)
        self.out = nn.Linear(c, 3)

    def forward(self, p_warp, parts, coarse_flow):
        x = torch.cat(parts, dim=-1)
        pw = torch.as_tensor(p_warp, dtype=x.dtype)
        k = min(self.k_self, len(pw))
        nidx = torch.from_numpy(knn_points(pw, pw, k))
        e = self.attn(x, x[nidx], rel_pos=_rel(pw, nidx, pw))
        flow = coarse_flow + self.out(leaky(self.reduce(e)))
        return flow, e


class SegmentationHead(nn.Module):
    def __init__(self, d):
        super().__init__()
        self.mlp = MLP(d, [d, d // 2, 1])

    def forward(self, e):
        return torch.sigmoid(self.mlp(e)).squeeze(-1)


class TrafficAwareFlowNet(nn.Module):
    """Hierarchical radar scene-flow network with a traffic vector field."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c, d = cfg.point_channels, cfg.embed_channels
        self.point_mlp = MLP(5, [c, c])
        self.temporal = PointGRU(c, cfg.k_temporal) if cfg.use_temporal else None
        self.encoder = MultiScaleEncoder(cfg)
        self.point_embed = nn.ModuleList(PointLevelEmbedding(cfg) for _ in range(cfg.levels))
        if cfg.use_tvf:
            self.scene_gru = ConvGRUCell(cfg.tvf_channels, cfg.tvf_channels)
            self.tvf_encoders = nn.ModuleList(TVFEncoder(cfg, self.scene_gru) for _ in range(cfg.levels - 1))
            self.tvf_decoders = nn.ModuleList(TVFDecoder(cfg) for _ in range(cfg.levels - 1))
        per_level = 3 * d if cfg.use_tvf else 2 * d
        self.heads = nn.ModuleList([FlowHead(d, cfg)] + [FlowHead(per_level, cfg) for _ in range(cfg.levels - 1)])
        self.seg_head = SegmentationHead(d) if cfg.variant == "ego" else None

    @property
    def dtype(self):
        return self.point_mlp.layers[0].weight.dtype

    def _inputs(self, frame):
        arr = np.concatenate([frame.positions, frame.rrv[:, None], frame.rcs[:, None]], axis=1)
        return torch.as_tensor(arr, dtype=self.dtype)

    def point_features(self, p_frame, q_frame, hidden):
        pf = self.point_mlp(self._inputs(p_frame))
        qf = self.point_mlp(self._inputs(q_frame))
        if self.temporal is None:
            return pf, qf, None
        pf, new_hidden = self.temporal(pf, p_frame.positions, hidden)
        qf, _ = self.temporal(qf, q_frame.positions, new_hidden)
        return pf, qf, new_hidden

    def forward(self, p_frame, q_frame, hidden: Optional[TemporalHidden] = None,
                od_pyramid=None, static_override=None) -> ForwardOutput:
        """One P -> Q prediction.

        ``od_pyramid`` maps level number (2..L) to an (H_l, W_l, D_od) tensor.
        ``static_override`` (bool array) replaces the predicted static mask and
        the Kabsch weights of the ego variant, as done with pseudo labels
        during training.
        """
        cfg = self.cfg
        dtype = self.dtype
        p_pos, q_pos = p_frame.positions, q_frame.positions
        pf, qf, new_hidden = self.point_features(p_frame, q_frame, hidden)
        p_levels = self.encoder(p_pos, pf)
        q_levels = self.encoder(q_pos, qf)

        outputs = []
        prev, tvf = None, None
        for l in range(cfg.levels):
            p_idx, p_feat = p_levels[l]
            q_idx, q_feat = q_levels[l]
            pos = p_pos[p_idx]
            if prev is None:
                coarse_flow = torch.zeros(len(pos), 3, dtype=dtype)
            else:
                coarse_flow = inverse_distance_interpolate(prev.positions, prev.flow, pos, k=cfg.k_interp)
            p_warp = torch.as_tensor(pos, dtype=dtype) + coarse_flow
            e_point = self.point_embed[l](p_warp, q_pos[q_idx], p_feat, q_feat)
            e_traffic = None
            if prev is None:
                parts = [e_point]
            else:
                e_prev = inverse_distance_interpolate(prev.positions, prev.embedding, pos, k=cfg.k_interp)
                parts = [e_point, e_prev]
                if cfg.use_tvf:
                    od_map = None if od_pyramid is None else od_pyramid.get(l + 1)
                    tvf = self.tvf_encoders[l - 1](prev, od_map, tvf)
                    query = torch.cat([e_prev, p_feat], dim=-1)
                    e_traffic = self.tvf_decoders[l - 1](p_warp, query, tvf)
                    parts.append(e_traffic)
            flow, emb = self.heads[l](p_warp, parts, coarse_flow)
            prev = LevelOutput(p_idx, pos, p_feat, flow, emb, e_point, e_traffic, tvf)
            outputs.append(prev)

        final = outputs[-1].flow
        out = ForwardOutput(flow=final, levels=outputs, hidden=new_hidden)
        if self.seg_head is not None:
            out.seg_prob = self.seg_head(outputs[-1].embedding)
            out.flow, out.static_mask, out.omega = self.static_correction(
                p_pos, final, out.seg_prob, static_override)
        return out

    def static_correction(self, p_pos, flow, seg_prob, static_override=None):
        """Replace the flow of static points with the rigid ego displacement
        estimated by weighted Kabsch between P and P + flow."""
        pos = torch.as_tensor(p_pos, dtype=flow.dtype)
        if static_override is not None:
            static = torch.as_tensor(np.asarray(static_override), dtype=torch.bool)
            weights = static.to(flow.dtype)
        else:
            static = seg_prob <= 0.5
            weights = 1.0 - seg_prob
        try:
            omega = weighted_kabsch(pos, pos + flow, weights)
        except DegenerateGeometryError:
            # too few static points to fix the ego motion; leave the flow alone
            eye = torch.eye(4, dtype=flow.dtype)
            return flow, static, eye
        ego_flow = pos @ omega[:3, :3].T + omega[:3, 3] - pos
        corrected = torch.where(static[:, None], ego_flow, flow)
        return corrected, static, omega
