"""End-to-end gradient check of the tiny network's total loss."""

import numpy as np
import torch

from trafficflow.pipeline import ClipRunner, RunConfig, build_models
from trafficflow.synthworld import ScenarioConfig, simulate_sequence


def tiny_clip(n=12, frames=3, seed=11):
    seq = simulate_sequence(ScenarioConfig.tiny(seed=seed, clip_length=frames, static_actor_prob=0.0))
    rng = np.random.default_rng(seed)
    out = []
    for f in seq:
        moving = np.flatnonzero(f.moving_mask)
        static = np.flatnonzero(~f.moving_mask)
        take = np.concatenate([moving[: n // 2], static[: n - min(len(moving), n // 2)]])[:n]
        out.append(f.subset(np.sort(take)))
    return out


def e2e_gradient_errors(variant="ego", supervision="cross", step=1e-5, seed=0):
    """Per-parameter-tensor directional-derivative relative errors, float64.

    For each tensor the direction v is the unit gradient plus a random unit
    vector, normalised. A purely random direction gives a derivative far
    below the cancellation noise of a loss in the thousands; leaning on the
    gradient keeps the signal large while the random part still exposes a
    wrongly oriented gradient. <grad, v> is compared to
    (L(θ + hv) - L(θ - hv)) / 2h.
    """
    cfg = RunConfig.tiny(seed=seed)
    cfg.model.variant = variant
    cfg.model.supervision = supervision
    net, stub = build_models(cfg, dtype=torch.float64)
    runner = ClipRunner(net, stub, cfg)
    clip = tiny_clip()

    def loss():
        return runner.clip_loss(clip)[0]

    net.zero_grad()
    base = loss()
    base.backward()
    # derivatives below sqrt(eps) * |L| are unresolvable by differencing
    floor = max(float(np.sqrt(np.finfo(np.float64).eps)) * max(1.0, abs(base.item())), 1e-6)
    gen = torch.Generator().manual_seed(seed)
    errors = {}
    with torch.no_grad():
        for name, p in net.named_parameters():
            v = torch.randn(p.shape, generator=gen, dtype=p.dtype)
            v /= v.norm()
            if p.grad is not None and p.grad.norm() > 0:
                u = p.grad / p.grad.norm()
                v = v + u if (v + u).norm() > 0.5 else u
                v /= v.norm()
            analytic = (p.grad * v).sum().item() if p.grad is not None else 0.0
            orig = p.detach().clone()
            p.copy_(orig + step * v)
            plus = loss().item()
            p.copy_(orig - step * v)
            minus = loss().item()
            p.copy_(orig)
            numeric = (plus - minus) / (2 * step)
            errors[name] = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
    return errors
