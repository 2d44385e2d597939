"""Learnable building blocks shared by the flow network and the BEV stub.

Grid-shaped tensors are channel-last (H, W, C) throughout; conversion to
torch's NCHW layout happens only around ``F.conv2d``.
"""

from __future__ import annotations

import hashlib
import io
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import ShapeError

LEAKY_SLOPE = 0.1


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Named, ordered view over the parameters of a module.

    Gradient slots are the parameters' ``.grad`` tensors. Iteration order is
    the module registration order, which is deterministic for a fixed config.
    """

    def __init__(self, module: nn.Module, prefix: str = ""):
        self.module = module
        self.prefix = prefix

    def items(self):
        for name, p in self.module.named_parameters():
            yield self.prefix + name, p

    def names(self):
        return [n for n, _ in self.items()]

    def __getitem__(self, name):
        return dict(self.items())[name]

    def __len__(self):
        return sum(1 for _ in self.items())

    def shapes(self):
        return OrderedDict((n, tuple(p.shape)) for n, p in self.items())

    def num_scalars(self):
        return sum(p.numel() for _, p in self.items())

    def grads(self):
        return OrderedDict(
            (n, p.grad if p.grad is not None else torch.zeros_like(p)) for n, p in self.items()
        )

    def zero_grad(self):
        for _, p in self.items():
            p.grad = None

    def freeze(self):
        for _, p in self.items():
            p.requires_grad_(False)

    @property
    def frozen(self):
        return all(not p.requires_grad for _, p in self.items())

    def arrays(self):
        return OrderedDict((n, p.detach().cpu().numpy().copy()) for n, p in self.items())

    def assign(self, arrays, strict=True):
        own = dict(self.items())
        missing = set(own) - set(arrays)
        if strict and missing:
            raise CheckpointError(f"missing entries: {sorted(missing)}")
        with torch.no_grad():
            for name, value in arrays.items():
                if name not in own:
                    if strict:
                        raise CheckpointError(f"unexpected entry {name}")
                    continue
                if tuple(value.shape) != tuple(own[name].shape):
                    raise CheckpointError(
                        f"{name}: shape {tuple(value.shape)} != {tuple(own[name].shape)}")
                own[name].copy_(torch.as_tensor(np.asarray(value)))

    def fingerprint(self):
        """SHA-256 over names, shapes and raw values."""
        h = hashlib.sha256()
        for name, p in self.items():
            h.update(name.encode())
            h.update(str(tuple(p.shape)).encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()


# ----------------------------------------------------------------- archive

_FINGERPRINT_KEY = "__config_fingerprint__"


def save_archive(path, arrays, config_fingerprint=""):
    """Write named arrays as little-endian float32 plus a config fingerprint."""
    payload = {name: np.asarray(a, dtype="<f4") for name, a in arrays.items()}
    payload[_FINGERPRINT_KEY] = np.frombuffer(config_fingerprint.encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    Path(path).write_bytes(buf.getvalue())


def load_archive(path, expected_fingerprint=None):
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = OrderedDict((k, data[k]) for k in data.files)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    fp = arrays.pop(_FINGERPRINT_KEY, np.zeros(0, np.uint8)).tobytes().decode()
    if expected_fingerprint is not None and fp != expected_fingerprint:
        raise CheckpointError(f"config fingerprint mismatch: {fp!r} != {expected_fingerprint!r}")
    return arrays, fp


# ------------------------------------------------------------------ layers

def leaky(x):
    return F.leaky_relu(x, LEAKY_SLOPE)


class MLP(nn.Module):
    """Affine layers with a leaky rectifier between (not after) them."""

    def __init__(self, in_dim, widths):
        super().__init__()
        if not widths:
            raise ValueError("MLP needs at least one layer")
        dims = [in_dim, *widths]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    @property
    def out_dim(self):
        return self.layers[-1].out_features

    def forward(self, x):
        if x.shape[-1] != self.layers[0].in_features:
            raise ShapeError(f"MLP expects {self.layers[0].in_features} channels, got {x.shape[-1]}")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = leaky(x)
        return x


@dataclass(frozen=True)
class AttentionSpec:
    d_query: int
    d_key: int
    d_k: int
    d_v: int
    positional_encoding: bool = False
    pos_dim: int = 3
    pe_hidden: int = 0
    heads: int = 1

    def __post_init__(self):
        for name in ("d_query", "d_key", "d_k", "d_v"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.heads != 1:
            raise NotImplementedError("only single-head attention is supported")


class Attention(nn.Module):
    """Single-head scaled dot-product attention over a per-query key set.

    ``forward(query (N, dq), keys (N, K, dk), values (N, K, dk), rel_pos (N, K, p))``.
    Keys and values share one input tensor layout and are projected by
    independent linear maps. With positional encoding on, an MLP of the
    relative offsets is added to keys and values before projection.
    """

    def __init__(self, spec: AttentionSpec):
        super().__init__()
        self.spec = spec
        self.q = nn.Linear(spec.d_query, spec.d_k)
        self.k = nn.Linear(spec.d_key, spec.d_k)
        self.v = nn.Linear(spec.d_key, spec.d_v)
        self.pe = None
        if spec.positional_encoding:
            self.pe = MLP(spec.pos_dim, [spec.pe_hidden or spec.d_k, spec.d_key])

    def forward(self, query, keys, values=None, rel_pos=None, mask=None):
        values = keys if values is None else values
        if keys.shape[:-1] != values.shape[:-1]:
            raise ShapeError("keys and values must have equal counts")
        if query.shape[-1] != self.spec.d_query or keys.shape[-1] != self.spec.d_key:
            raise ShapeError(
                f"attention expects ({self.spec.d_query}, {self.spec.d_key}) channels, "
                f"got ({query.shape[-1]}, {keys.shape[-1]})")
        if self.pe is not None:
            if rel_pos is None:
                raise ShapeError("positional encoding needs rel_pos")
            enc = self.pe(rel_pos)
            keys = keys + enc
            values = values + enc
        q = self.q(query)
        k = self.k(keys)
        v = self.v(values)
        scores = (k @ q.unsqueeze(-1)).squeeze(-1) / math.sqrt(self.spec.d_k)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        w = torch.softmax(scores, dim=-1)
        return (w.unsqueeze(-1) * v).sum(dim=-2)


def conv2d(field, kernel, bias=None, stride=1, padding=None):
    """Cross-correlation of a channel-last field with a (k, k, C, C') kernel.

    ``padding=None`` means "same" zero padding for odd kernels.
    """
    kh, kw, c_in, c_out = kernel.shape
    if field.shape[-1] != c_in:
        raise ShapeError(f"kernel expects {c_in} channels, got {field.shape[-1]}")
    if padding is None:
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("same padding needs an odd kernel")
        padding = (kh // 2, kw // 2)
    x = field.permute(2, 0, 1).unsqueeze(0)
    w = kernel.permute(3, 2, 0, 1)
    y = F.conv2d(x, w, bias, stride=stride, padding=padding)
    return y.squeeze(0).permute(1, 2, 0)


class Conv2d(nn.Module):
    """Channel-last wrapper around ``nn.Conv2d`` with same padding."""

    def __init__(self, c_in, c_out, kernel_size=3, stride=1, bias=True):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, kernel_size, stride=stride,
                              padding=kernel_size // 2, bias=bias)

    def forward(self, field):
        if field.shape[-1] != self.conv.in_channels:
            raise ShapeError(f"conv expects {self.conv.in_channels} channels, got {field.shape[-1]}")
        y = self.conv(field.permute(2, 0, 1).unsqueeze(0))
        return y.squeeze(0).permute(1, 2, 0)


class ConvGRUCell(nn.Module):
    """Convolutional GRU in which the update gate weights the *old* state:
    ``out = z * hidden + (1 - z) * tanh(W*x + U*(r * hidden))``."""

    def __init__(self, c_in, c_hidden, kernel_size=3):
        super().__init__()
        self.gates = Conv2d(c_in + c_hidden, 2 * c_hidden, kernel_size)
        self.w_g = Conv2d(c_in, c_hidden, kernel_size)
        self.u_g = Conv2d(c_hidden, c_hidden, kernel_size, bias=False)
        self.c_hidden = c_hidden

    def forward(self, x, hidden):
        if x.shape[:2] != hidden.shape[:2] or hidden.shape[-1] != self.c_hidden:
            raise ShapeError(f"input {tuple(x.shape)} and hidden {tuple(hidden.shape)} disagree")
        g = torch.sigmoid(self.gates(torch.cat([x, hidden], dim=-1)))
        r, z = g[..., : self.c_hidden], g[..., self.c_hidden:]
        cand = torch.tanh(self.w_g(x) + self.u_g(r * hidden))
        return z * hidden + (1 - z) * cand


class SpatialAttentionFusion(nn.Module):
    """Per-pixel convex combination of a traffic and a motion field.

    Each input gets its own score convolution; the two scores are softmaxed
    against each other per pixel, which makes the traffic weight
    ``sigmoid(s_traffic - s_motion)``.
    """

    def __init__(self, channels, kernel_size=3):
        super().__init__()
        self.w1 = Conv2d(channels, 1, kernel_size)
        self.w2 = Conv2d(channels, 1, kernel_size)

    def weights(self, traffic, motion):
        scores = torch.cat([self.w1(traffic), self.w2(motion)], dim=-1)
        return torch.softmax(scores, dim=-1)[..., :1]

    def forward(self, traffic, motion):
        if traffic.shape != motion.shape:
            raise ShapeError(f"{tuple(traffic.shape)} vs {tuple(motion.shape)}")
        w = self.weights(traffic, motion)
        return w * traffic + (1 - w) * motion


class AxialAttentionBlock(nn.Module):
    """Column-wise then row-wise self-attention; returns the sum of both passes."""

    def __init__(self, channels):
        super().__init__()
        spec = AttentionSpec(channels, channels, channels, channels)
        self.col = Attention(spec)
        self.row = Attention(spec)

    @staticmethod
    def _self_attend(attn, seqs):
        # seqs: (B, L, C); every element attends over its own sequence
        b, length, c = seqs.shape
        q = seqs.reshape(b * length, c)
        kv = seqs.unsqueeze(1).expand(b, length, length, c).reshape(b * length, length, c)
        return attn(q, kv).reshape(b, length, -1)

    def forward(self, field):
        h, w, c = field.shape
        cols = field.permute(1, 0, 2)  # (W, H, C)
        along_h = self._self_attend(self.col, cols).permute(1, 0, 2)
        along_w = self._self_attend(self.row, along_h)
        return along_h + along_w


class PointToGridAttention(nn.Module):
    """Pools the points of each occupied cell into one vector.

    Point-wise step: softmax over per-point scores inside the cell weights the
    value projections. Channel-wise step: sigmoid gates computed from the cell
    mean scale the pooled vector. Empty cells yield zeros.
    """

    def __init__(self, d_in, d_out):
        super().__init__()
        self.score = nn.Linear(d_in, 1)
        self.value = nn.Linear(d_in, d_out)
        self.gate = nn.Linear(d_in, d_out)
        self.d_out = d_out

    def forward(self, features, cell_ids, num_cells):
        """``features`` (n, d_in), ``cell_ids`` (n,) flat cell index per point."""
        out = features.new_zeros(num_cells, self.d_out)
        if len(features) == 0:
            return out
        ids = torch.as_tensor(cell_ids, dtype=torch.long)
        s = self.score(features).squeeze(-1)
        cell_max = torch.full((num_cells,), float("-inf"), dtype=s.dtype)
        cell_max = cell_max.scatter_reduce(0, ids, s.detach(), reduce="amax")
        e = torch.exp(s - cell_max[ids])
        denom = features.new_zeros(num_cells).index_add(0, ids, e)
        alpha = e / denom[ids]
        pooled = out.index_add(0, ids, alpha.unsqueeze(-1) * self.value(features))
        counts = features.new_zeros(num_cells).index_add(0, ids, torch.ones_like(s))
        means = features.new_zeros(num_cells, features.shape[1]).index_add(0, ids, features)
        occupied = counts > 0
        means = means / counts.clamp(min=1).unsqueeze(-1)
        gates = torch.sigmoid(self.gate(means))
        return torch.where(occupied.unsqueeze(-1), gates * pooled, out)
