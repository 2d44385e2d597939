"""Pillar-style BEV feature pyramid standing in for an object detector.

The stub pools per-point MLP features into pillars on a base grid and runs a
small strided CNN, emitting one map per flow level 2..L (finest map for
level L). A proxy head trained on per-cell occupancy and class heatmaps
gives the maps detection-flavoured content before they are frozen.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import MLP, Conv2d, ParamStore, leaky
from .geometry import GridSpec, voxelize_2d

log = logging.getLogger(__name__)

NUM_CLASSES = 4  # car, pedestrian, cyclist, truck


@dataclass
class BEVPyramid:
    maps: dict    # level -> (H_l, W_l, D) tensor
    grids: dict   # level -> GridSpec

    def get(self, level):
        return self.maps.get(level)


class PillarBEVStub(nn.Module):
    def __init__(self, grid: GridSpec, levels: int, channels: int = 32):
        super().__init__()
        self.grid = grid
        self.levels = list(range(2, levels + 1))
        self.channels = channels
        self.point_mlp = MLP(7, [channels, channels])
        # stages[0] feeds level L, each later stage halves the resolution
        self.stages = nn.ModuleList(
            Conv2d(channels, channels, 3, stride=1 if i == 0 else 2) for i in range(len(self.levels)))
        self.heads = nn.ModuleList(Conv2d(channels, 1 + NUM_CLASSES, 1) for _ in self.levels)

    @property
    def dtype(self):
        return self.point_mlp.layers[0].weight.dtype

    def pillar_features(self, frame):
        """Max-pooled point features per pillar on the base grid; empty pillars are zero."""
        h, w = self.grid.shape
        out = torch.zeros(h * w, self.channels, dtype=self.dtype)
        if frame is None or len(frame.positions) == 0:
            return out.reshape(h, w, -1)
        cells = voxelize_2d(frame.positions, self.grid)
        inside = cells[:, 0] >= 0
        if not inside.any():
            return out.reshape(h, w, -1)
        pos = frame.positions[inside]
        centers = self.grid.cell_centers()[cells[inside, 0] * w + cells[inside, 1]]
        x = np.concatenate([pos, frame.rrv[inside, None], frame.rcs[inside, None], pos[:, :2] - centers], axis=1)
        feats = self.point_mlp(torch.as_tensor(x, dtype=self.dtype))
        flat = torch.from_numpy(cells[inside, 0] * w + cells[inside, 1])
        idx = flat[:, None].expand(-1, self.channels)
        out = out.scatter_reduce(0, idx, feats, reduce="amax", include_self=False)
        return out.reshape(h, w, -1)

    def features(self, frame):
        """List of feature maps, finest first (level L, L-1, ...)."""
        x = self.pillar_features(frame)
        maps = []
        for stage in self.stages:
            x = leaky(stage(x))
            maps.append(x)
        return maps

    def forward(self, frame) -> BEVPyramid:
        maps = self.features(frame)
        out, grids = {}, {}
        for level, m in zip(reversed(self.levels), maps):
            out[level] = m
            grids[level] = self.grid.scaled(m.shape[:2])
        return BEVPyramid(out, grids)

    def proxy_logits(self, frame):
        return [head(m) for head, m in zip(self.heads, self.features(frame))]


def proxy_targets(frame, grid: GridSpec):
    """Occupancy (H, W) and class (H, W, long; -1 where empty) from actor points."""
    h, w = grid.shape
    occ = np.zeros((h, w), dtype=np.float64)
    votes = np.zeros((h, w, NUM_CLASSES))
    cells = voxelize_2d(frame.positions, grid)
    for (r, c), cls in zip(cells, frame.class_id):
        if r < 0 or cls == 0:
            continue
        occ[r, c] = 1.0
        votes[r, c, int(cls) - 1] += 1
    cls_map = np.where(occ > 0, votes.argmax(-1), -1)
    return occ, cls_map


def proxy_loss(stub: PillarBEVStub, frame):
    total = 0.0
    for logits, level in zip(stub.proxy_logits(frame), reversed(stub.levels)):
        grid = stub.grid.scaled(logits.shape[:2])
        occ, cls_map = proxy_targets(frame, grid)
        occ_t = torch.as_tensor(occ, dtype=logits.dtype)
        total = total + F.binary_cross_entropy_with_logits(logits[..., 0], occ_t)
        cls_t = torch.as_tensor(cls_map, dtype=torch.long)
        occupied = cls_t >= 0
        if occupied.any():
            total = total + F.cross_entropy(logits[..., 1:][occupied], cls_t[occupied])
    return total


def train_od_proxy(stub: PillarBEVStub, frames, steps=200, lr=1e-2, seed=0):
    """Fit the stub on the occupancy/class proxy, then freeze it.

    Returns the frozen :class:`ParamStore` and the per-step loss history.
    """
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(stub.parameters(), lr=lr)
    history = []
    for _ in range(steps):
        frame = frames[int(torch.randint(len(frames), (1,), generator=gen))]
        opt.zero_grad()
        loss = proxy_loss(stub, frame)
        loss.backward()
        opt.step()
        history.append(loss.item())
    store = ParamStore(stub, prefix="od.")
    store.zero_grad()
    store.freeze()
    log.info("od proxy: %.4f -> %.4f over %d steps", history[0], history[-1], steps)
    return store, history
