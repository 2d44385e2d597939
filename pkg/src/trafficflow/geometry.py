"""Point-cloud and rigid-motion primitives.

Index-producing operations (KNN, FPS, voxelization, KDE) go through
:mod:`trafficflow.kernels` and return numpy integer/float arrays. Operations
that sit on the gradient path (warping, interpolation, rigid transforms)
accept and return torch tensors as well as numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import torch

from . import kernels


class SizeError(ValueError):
    """Requested more elements than a point set holds."""


class ShapeError(ValueError):
    """Array shapes disagree."""


class DegenerateGeometryError(ValueError):
    """Point configuration does not determine the requested quantity."""


@dataclass
class PointCloud:
    positions: np.ndarray
    rrv: Optional[np.ndarray] = None
    rcs: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        if n < 1:
            raise SizeError("point cloud must hold at least one point")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("non-finite positions")
        n_rrv = n if self.rrv is None else len(self.rrv)
        n_rcs = n if self.rcs is None else len(self.rcs)
        n_feat = n if self.features is None else len(self.features)
        if not n_rrv == n_rcs == n_feat == n:
            raise ShapeError("per-point arrays must match the number of positions")

    def __len__(self):
        return len(self.positions)


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned BEV grid. Rows run along x, columns along y."""

    origin: tuple
    cell_size: float
    shape: tuple

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if self.shape[0] < 1 or self.shape[1] < 1:
            raise ValueError("grid needs at least one cell")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "shape", (int(self.shape[0]), int(self.shape[1])))
        object.__setattr__(self, "cell_size", float(self.cell_size))

    @property
    def num_cells(self):
        return self.shape[0] * self.shape[1]

    def cell_centers(self) -> np.ndarray:
        """(H*W, 2) centers in row-major order."""
        r, c = np.meshgrid(np.arange(self.shape[0]), np.arange(self.shape[1]), indexing="ij")
        x = self.origin[0] + (r.ravel() + 0.5) * self.cell_size
        y = self.origin[1] + (c.ravel() + 0.5) * self.cell_size
        return np.stack([x, y], axis=1)

    def scaled(self, shape) -> "GridSpec":
        """Same extent, different resolution (square cells assumed)."""
        factor = self.shape[0] / shape[0]
        return GridSpec(self.origin, self.cell_size * factor, shape)


class SE3Transform:
    """4x4 homogeneous rigid transform."""

    def __init__(self, matrix, check=True):
        m = np.array(matrix, dtype=np.float64).reshape(4, 4)
        if check:
            rot = m[:3, :3]
            if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9) or abs(np.linalg.det(rot) - 1.0) > 1e-9:
                raise ValueError("rotation block is not a proper rotation")
            if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
                raise ValueError("last row must be (0, 0, 0, 1)")
        self.matrix = m

    @classmethod
    def identity(cls):
        return cls(np.eye(4), check=False)

    @classmethod
    def from_rt(cls, rotation, translation):
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return cls(m)

    @classmethod
    def from_yaw(cls, yaw, translation=(0.0, 0.0, 0.0)):
        c, s = math.cos(yaw), math.sin(yaw)
        return cls.from_rt([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], translation)

    @property
    def rotation(self):
        return self.matrix[:3, :3]

    @property
    def translation(self):
        return self.matrix[:3, 3]

    def compose(self, other: "SE3Transform") -> "SE3Transform":
        """``self @ other``: apply ``other`` first."""
        return SE3Transform(self.matrix @ other.matrix, check=False)

    def inverse(self) -> "SE3Transform":
        m = np.eye(4)
        m[:3, :3] = self.rotation.T
        m[:3, 3] = -self.rotation.T @ self.translation
        return SE3Transform(m, check=False)

    def transform_points(self, points):
        if isinstance(points, torch.Tensor):
            m = torch.as_tensor(self.matrix, dtype=points.dtype)
            return points @ m[:3, :3].T + m[:3, 3]
        return np.asarray(points) @ self.rotation.T + self.translation

    def __repr__(self):
        return f"SE3Transform({self.matrix.tolist()})"


# ---------------------------------------------------------------- neighbors

def knn_points(query, target, k):
    """Indices of the ``k`` nearest ``target`` points for every query, ascending
    by distance, ties broken by the lower index."""
    query = _positions(query)
    target = _positions(target)
    if k > len(target):
        raise SizeError(f"k={k} > {len(target)} target points")
    return kernels.knn_indices(query, target, k)


def farthest_point_sampling(cloud, m, seed_index=0):
    points = _positions(cloud)
    if m < 1 or m > len(points):
        raise SizeError(f"cannot sample {m} of {len(points)} points")
    return kernels.farthest_point_sampling(points, m, seed_index)


def inverse_distance_interpolate(source_positions, source_values, query_positions, k=3, eps=1e-8):
    """Inverse-distance weighted average of the ``k`` nearest source values.

    Weights are ``1 / (d + eps)`` with Euclidean ``d``. A query that coincides
    with a source point returns that source's value exactly. Differentiable
    with respect to ``source_values``.
    """
    n_src = len(source_positions)
    if n_src == 0:
        raise SizeError("no source points to interpolate from")
    k = min(k, n_src)
    values = torch.as_tensor(source_values)
    src = torch.as_tensor(np.asarray(_positions(source_positions)), dtype=values.dtype)
    qry = torch.as_tensor(np.asarray(_positions(query_positions)), dtype=values.dtype)
    idx = torch.from_numpy(kernels.knn_indices(qry, src, k))
    d = torch.linalg.norm(qry[:, None, :] - src[idx], dim=-1)
    w = 1.0 / (d + eps)
    exact = d == 0
    has_exact = exact.any(dim=1, keepdim=True)
    w = torch.where(has_exact, exact.to(w.dtype), w)
    w = w / w.sum(dim=1, keepdim=True)
    return (w[..., None] * values[idx]).sum(dim=1)


# ----------------------------------------------------------- rigid motion

def apply_se3(t: SE3Transform, cloud: PointCloud) -> PointCloud:
    return replace(cloud, positions=t.transform_points(cloud.positions))


def warp(cloud, flow):
    """Displace positions by per-point flow vectors."""
    if isinstance(cloud, PointCloud):
        flow = np.asarray(flow)
        if flow.shape != cloud.positions.shape:
            raise ShapeError(f"flow {flow.shape} vs positions {cloud.positions.shape}")
        return replace(cloud, positions=cloud.positions + flow)
    if tuple(cloud.shape) != tuple(flow.shape):
        raise ShapeError(f"flow {tuple(flow.shape)} vs positions {tuple(cloud.shape)}")
    return cloud + flow


def ego_compensate(frame, omega: SE3Transform):
    """Express ``frame`` (time t) in the sensor coordinates of time t+1.

    ``omega`` maps frame-t coordinates into frame-(t+1) coordinates. Positions
    are transformed, the ground-truth flow is re-expressed so static points
    carry zero flow, and RRV gets the ego-velocity radial component added back
    so it measures the target's own radial motion.
    """
    pos = frame.positions
    new_pos = omega.transform_points(pos)
    changes = {"positions": new_pos}
    if frame.gt_flow is not None:
        # target location at t+1 is unchanged; only the start point moves
        flow = pos + frame.gt_flow - new_pos
        # residue of the two roundings on world-static points
        flow[np.linalg.norm(flow, axis=1) < 1e-9] = 0.0
        changes["gt_flow"] = flow
    if frame.dt > 0:
        ego_velocity = omega.inverse().translation / frame.dt
        norms = np.linalg.norm(pos, axis=1)
        safe = np.where(norms > 0, norms, 1.0)
        radial = (pos @ ego_velocity) / safe
        changes["rrv"] = frame.rrv + np.where(norms > 0, radial, 0.0)
    return replace(frame, **changes)


# ------------------------------------------------------------------- grids

def voxelize_2d(cloud, grid: GridSpec):
    """Cell (row, col) per point on half-open cells; (-1, -1) when outside."""
    return kernels.voxelize_2d(_positions(cloud), grid.origin, grid.cell_size, grid.shape)


def gaussian_kde(cloud, bandwidth=1.0):
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    return kernels.gaussian_kde(_positions(cloud), bandwidth)


def _positions(obj):
    if isinstance(obj, PointCloud):
        return obj.positions
    if hasattr(obj, "positions"):
        return obj.positions
    if isinstance(obj, torch.Tensor):
        return obj.detach().cpu().numpy()
    return np.asarray(obj, dtype=np.float64)
