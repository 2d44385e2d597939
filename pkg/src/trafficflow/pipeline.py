"""Run configuration, staged training, evaluation, inference and plots."""

from __future__ import annotations

import json
import logging
import os
import random
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import yaml

from .blocks import ParamStore, save_archive
from .geometry import GridSpec, SE3Transform, ego_compensate
from .losses import CameraModel, LossConfig, LossTargets, pseudo_optical_flow, total_loss
from .metrics import MetricReport
from .model import ModelConfig, TrafficAwareFlowNet
from .od_stub import PillarBEVStub, train_od_proxy
from .synthworld import (ScenarioConfig, derive_pseudo_labels, encode_frame, generate_dataset,
                         load_manifest, load_split, relative_motion)

log = logging.getLogger(__name__)

DATA_ENV = "TRAFFICFLOW_DATA"


def default_data_root():
    return Path(os.environ.get(DATA_ENV, "data"))


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or infinite loss."""


@dataclass
class OptimConfig:
    name: str = "adam"
    lr: float = 1e-3
    decay: float = 0.9          # multiplicative, per epoch
    epochs: int = 10
    max_steps: Optional[int] = None
    grad_clip: float = 5.0
    od_steps: int = 200
    od_lr: float = 1e-2

    def __post_init__(self):
        if self.name not in ("adam", "rmsprop", "sgd"):
            raise ValueError(f"unknown optimizer {self.name!r}")
        if self.lr <= 0 or not 0 < self.decay <= 1 or self.epochs < 1 or self.grad_clip <= 0:
            raise ValueError("optimizer schedule must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train_sequences: int = 64
    test_sequences: int = 16
    checkpoint_every: int = 0   # steps; 0 writes only the final checkpoint
    resolution_ratio: float = 2.5
    odometry_noise: float = 0.0  # metres / radians of pseudo-label odometry error
    seed: int = 0

    def __post_init__(self):
        for name, cls in (("model", ModelConfig), ("loss", LossConfig),
                          ("scenario", ScenarioConfig), ("optim", OptimConfig)):
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, cls(**value))
        if self.train_sequences < 1 or self.test_sequences < 0:
            raise ValueError("sequence counts must be positive")
        if self.resolution_ratio <= 0:
            raise ValueError("resolution_ratio must be positive")

    @classmethod
    def tiny(cls, **kw):
        """Desk-scale model: two levels, 8/16 channels, 4x4 TVF."""
        model = ModelConfig(levels=2, gamma=2, point_channels=8, embed_channels=16, tvf_channels=8,
                            axial_blocks=1, k_cross=4, k_self=4, k_encoder=4, k_tvf=5, k_interp=3,
                            k_temporal=3, clip_length=3,
                            grid=GridSpec((0.0, -16.0), 8.0, (4, 4)), variant="superego",
                            supervision="cross_plus", od_channels=8, od_base_shape=(8, 8))
        base = dict(model=model, scenario=ScenarioConfig.tiny(),
                    optim=OptimConfig(lr=3e-3, epochs=5, od_steps=50),
                    train_sequences=8, test_sequences=4)
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        return {"model": self.model.to_dict(), "loss": asdict(self.loss),
                "scenario": self.scenario.to_dict(), "optim": asdict(self.optim),
                "train_sequences": self.train_sequences, "test_sequences": self.test_sequences,
                "checkpoint_every": self.checkpoint_every, "resolution_ratio": self.resolution_ratio,
                "odometry_noise": self.odometry_noise, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_yaml(self, path=None):
        text = yaml.safe_dump(self.to_dict(), sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_yaml(cls, path_or_text):
        p = Path(path_or_text) if "\n" not in str(path_or_text) else None
        text = p.read_text() if p is not None and p.exists() else str(path_or_text)
        return cls.from_dict(yaml.safe_load(text) or {})


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.set_num_threads(1)


# --------------------------------------------------------------- data prep

@dataclass
class PairSample:
    """One P -> Q step after variant preprocessing."""
    p: object
    q: object
    omega_gt: SE3Transform
    eval_flow: np.ndarray
    targets: LossTargets


def _noisy_odometry(omega: SE3Transform, noise, rng):
    if noise <= 0:
        return omega
    delta = SE3Transform.from_yaw(rng.normal(0, noise), rng.normal(0, noise, 3))
    return delta.compose(omega)


def prepare_pair(p_frame, q_frame, cfg: RunConfig, camera: Optional[CameraModel] = None,
                 rng: Optional[np.random.Generator] = None) -> PairSample:
    """Variant-specific preprocessing and pseudo labels for one frame pair.

    ``superego`` compensates P with the ground-truth ego motion; ``ego`` and
    ``no-ego`` keep raw coordinates.
    """
    variant = cfg.model.variant
    omega = relative_motion(p_frame.ego_pose, q_frame.ego_pose)
    odom = _noisy_odometry(omega, cfg.odometry_noise, rng or np.random.default_rng(0))
    p = ego_compensate(p_frame, omega) if variant == "superego" else p_frame
    seg_mask, fg, bg = derive_pseudo_labels(p, odom, compensated=variant == "superego")
    moving = np.asarray(p.moving_mask, dtype=bool)
    opt_flow = None
    opt_mask = moving
    if cfg.model.supervision == "cross" and camera is not None:
        opt_flow, valid = pseudo_optical_flow(camera, p.positions, p.gt_flow)
        opt_mask = moving & valid
    targets = LossTargets(
        p_positions=p.positions, q_positions=q_frame.positions, rrv=p.rrv, dt=p.dt,
        moving_mask=moving, fg_flow=fg, bg_flow=bg, gt_flow=p.gt_flow, seg_mask=seg_mask,
        omega_gt=omega, camera=camera if opt_flow is not None else None, opt_flow=opt_flow,
        opt_mask=opt_mask)
    return PairSample(p, q_frame, omega, p.gt_flow, targets)


def clip_windows(sequence, length):
    """Non-overlapping windows of ``length`` frames (the tail window may be shorter but >= 2)."""
    out = [sequence[i:i + length] for i in range(0, len(sequence), length)]
    return [w for w in out if len(w) >= 2]


# ------------------------------------------------------------------ models

def od_grid(mcfg: ModelConfig) -> GridSpec:
    g = mcfg.grid
    factor = g.shape[0] / mcfg.od_base_shape[0]
    return GridSpec(g.origin, g.cell_size * factor, mcfg.od_base_shape)


def build_models(cfg: RunConfig, dtype=torch.float32):
    torch.manual_seed(cfg.seed)
    net = TrafficAwareFlowNet(cfg.model).to(dtype)
    stub = None
    if cfg.model.use_tvf and cfg.model.use_od:
        stub = PillarBEVStub(od_grid(cfg.model), cfg.model.levels, cfg.model.od_channels).to(dtype)
    return net, stub


def _make_optimizer(params, ocfg: OptimConfig):
    if ocfg.name == "adam":
        return torch.optim.Adam(params, lr=ocfg.lr)
    if ocfg.name == "rmsprop":
        return torch.optim.RMSprop(params, lr=ocfg.lr)
    return torch.optim.SGD(params, lr=ocfg.lr)


class ClipRunner:
    """Runs the network over consecutive pairs of a clip, carrying the temporal state."""

    def __init__(self, net: TrafficAwareFlowNet, stub: Optional[PillarBEVStub], cfg: RunConfig):
        self.net, self.stub, self.cfg = net, stub, cfg
        self.camera = CameraModel.forward_facing() if cfg.model.supervision == "cross" else None

    def pyramid(self, frame):
        if self.stub is None:
            return None
        with torch.no_grad():
            return self.stub(frame)

    def pairs(self, clip, rng=None):
        return [prepare_pair(clip[i], clip[i + 1], self.cfg, self.camera, rng) for i in range(len(clip) - 1)]

    def clip_loss(self, clip, rng=None):
        """Summed loss over the clip's pairs and the per-term report (summed too)."""
        hidden = None
        total = None
        report = {}
        for sample in self.pairs(clip, rng):
            static = None
            if self.cfg.model.variant == "ego":
                static = ~sample.targets.seg_mask
            out = self.net(sample.p, sample.q, hidden, self.pyramid(sample.q), static_override=static)
            hidden = out.hidden
            loss, terms = total_loss(out, sample.targets, self.cfg.loss, self.cfg.model.supervision)
            total = loss if total is None else total + loss
            for k, v in terms.items():
                report[k] = report.get(k, 0.0) + v
        return total, report

    @torch.no_grad()
    def predict_clip(self, clip):
        """``[(sample, flow (N, 3) numpy, omega 4x4 or None)]`` per pair."""
        hidden = None
        results = []
        for sample in self.pairs(clip):
            out = self.net(sample.p, sample.q, hidden, self.pyramid(sample.q))
            hidden = out.hidden
            omega = None if out.omega is None else out.omega.detach().double().numpy()
            results.append((sample, out.flow.detach().double().numpy(), omega))
        return results


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    checkpoint: Path
    history: list
    od_fingerprint: Optional[str]


def _checkpoint_payload(net, stub, opt, step, cfg):
    return {"model": net.state_dict(), "od": None if stub is None else stub.state_dict(),
            "optimizer": opt.state_dict(), "step": step, "config": cfg.to_dict(),
            "fingerprint": cfg.model.fingerprint()}


def _write_checkpoint(path, payload, net, cfg):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    save_archive(path.with_suffix(".npz"), ParamStore(net).arrays(), cfg.model.fingerprint())


def _dump_batch(out_dir, step, clip):
    path = Path(out_dir) / f"nan_batch_step{step}.npz"
    arrays = {}
    for i, f in enumerate(clip):
        arrays[f"positions_{i}"] = f.positions
        arrays[f"rrv_{i}"] = f.rrv
        arrays[f"gt_flow_{i}"] = f.gt_flow
    np.savez(path, **arrays)
    return path


def run_training(cfg: RunConfig, data_root, out_dir, resume=None, train_sequences=None,
                 log_name="train.jsonl") -> TrainResult:
    """Stage 1 fits and freezes the BEV stub; stage 2 trains the flow network
    on mini-clips. One optimizer step per clip, learning rate decayed per epoch.

    An epoch is one pass over all clips in a seeded order, so the step count
    alone fixes the position in the schedule and a resumed run replays the
    same batches.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(cfg.seed)
    if train_sequences is None:
        if not (Path(data_root) / "manifest.json").exists():
            raise FileNotFoundError(f"no dataset at {data_root}; run generate first")
        train_sequences = load_split(data_root, "train")
    clips = [w for seq in train_sequences for w in clip_windows(seq, cfg.model.clip_length)]
    if not clips:
        raise ValueError("no training clips")

    net, stub = build_models(cfg)
    od_fp = None
    state = torch.load(resume, weights_only=False) if resume is not None else None
    if stub is not None:
        if state is not None and state["od"] is not None:
            stub.load_state_dict(state["od"])
            ParamStore(stub).freeze()
        else:
            frames = [f for seq in train_sequences for f in seq]
            train_od_proxy(stub, frames, steps=cfg.optim.od_steps, lr=cfg.optim.od_lr, seed=cfg.seed)
        od_fp = ParamStore(stub).fingerprint()

    runner = ClipRunner(net, stub, cfg)
    opt = _make_optimizer(net.parameters(), cfg.optim)
    step = 0
    if state is not None:
        net.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        step = state["step"]

    n = len(clips)
    max_steps = cfg.optim.max_steps or cfg.optim.epochs * n
    history = []
    orders = {}
    with open(out_dir / log_name, "a" if state is not None else "w") as logf:
        while step < max_steps:
            epoch, pos = divmod(step, n)
            if epoch not in orders:
                orders = {epoch: np.random.default_rng([cfg.seed, epoch]).permutation(n)}
            lr = cfg.optim.lr * cfg.optim.decay ** epoch
            for group in opt.param_groups:
                group["lr"] = lr
            clip = clips[orders[epoch][pos]]
            opt.zero_grad()
            loss, terms = runner.clip_loss(clip, np.random.default_rng([cfg.seed, epoch, pos]))
            if not torch.isfinite(loss):
                dump = _dump_batch(out_dir, step, clip)
                raise NonFiniteLossError(f"loss {loss.item()} at step {step}; batch dumped to {dump}")
            loss.backward()
            torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.optim.grad_clip)
            opt.step()
            step += 1
            record = {"step": step, "epoch": epoch, "lr": lr, "loss": loss.item(), "terms": terms}
            history.append(record)
            logf.write(json.dumps(record, sort_keys=True) + "\n")
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                _write_checkpoint(out_dir / f"ckpt_step{step:06d}.pt",
                                  _checkpoint_payload(net, stub, opt, step, cfg), net, cfg)

    if stub is not None and ParamStore(stub).fingerprint() != od_fp:
        raise RuntimeError("BEV stub parameters changed during flow training")
    final = out_dir / "final.pt"
    _write_checkpoint(final, _checkpoint_payload(net, stub, opt, step, cfg), net, cfg)
    return TrainResult(final, history, od_fp)


def load_checkpoint(path, cfg: Optional[RunConfig] = None):
    state = torch.load(path, weights_only=False)
    cfg = cfg or RunConfig.from_dict(state["config"])
    if state["fingerprint"] != cfg.model.fingerprint():
        raise ValueError("checkpoint was trained with a different model config")
    net, stub = build_models(cfg)
    net.load_state_dict(state["model"])
    if stub is not None and state["od"] is not None:
        stub.load_state_dict(state["od"])
    net.eval()
    return net, stub, cfg


# -------------------------------------------------------------- evaluation

Predictor = Callable[[list], list]


def evaluate_sequences(sequences, predict: Predictor, cfg: RunConfig) -> MetricReport:
    """Aggregate metrics of ``predict`` over every clip window of every sequence.

    ``predict(clip)`` returns ``[(sample, flow, omega)]`` like
    :meth:`ClipRunner.predict_clip`.
    """
    report = MetricReport()
    for seq in sequences:
        for clip in clip_windows(seq, cfg.model.clip_length):
            for sample, flow, omega in predict(clip):
                ego = cfg.model.variant == "ego" and omega is not None
                report.add_frame(flow, sample.eval_flow, sample.p.moving_mask, sample.p.class_id,
                                 cfg.resolution_ratio,
                                 omega_pred=omega if ego else None,
                                 omega_gt=sample.omega_gt if ego else None)
    return report


def gt_predictor(cfg: RunConfig):
    def predict(clip):
        samples = [prepare_pair(clip[i], clip[i + 1], cfg) for i in range(len(clip) - 1)]
        return [(s, s.eval_flow.copy(), s.omega_gt.matrix) for s in samples]
    return predict


def zero_predictor(cfg: RunConfig):
    def predict(clip):
        samples = [prepare_pair(clip[i], clip[i + 1], cfg) for i in range(len(clip) - 1)]
        return [(s, np.zeros_like(s.eval_flow), None) for s in samples]
    return predict


def run_eval(cfg: Optional[RunConfig], checkpoint, data_root, report_path, split="test",
             sequences=None) -> MetricReport:
    net, stub, cfg = load_checkpoint(checkpoint, cfg)
    if sequences is None:
        sequences = load_split(data_root, split)
    runner = ClipRunner(net, stub, cfg)
    report = evaluate_sequences(sequences, runner.predict_clip, cfg)
    if report_path is not None:
        report.write(report_path)
    return report


def run_generate(cfg: RunConfig, out_dir):
    return generate_dataset(out_dir, cfg.scenario, cfg.train_sequences, cfg.test_sequences, seed=cfg.seed)


def run_infer(cfg: Optional[RunConfig], checkpoint, data_root, out_dir, split="test"):
    """Write predicted flow per frame in the dataset layout (``gt_flow`` holds the prediction).

    Returns the list of written files.
    """
    net, stub, cfg = load_checkpoint(checkpoint, cfg)
    runner = ClipRunner(net, stub, cfg)
    names = load_manifest(data_root)[split]
    written = []
    for name, seq in zip(names, load_split(data_root, split)):
        target = Path(out_dir) / name
        target.mkdir(parents=True, exist_ok=True)
        for clip in clip_windows(seq, cfg.model.clip_length):
            for sample, flow, _ in runner.predict_clip(clip):
                frame = replace(sample.p, gt_flow=flow)
                path = target / f"frame_{frame.frame_index:04d}.bin"
                path.write_bytes(encode_frame(frame))
                written.append(path)
    return written


def run_plot(positions, flow, path, title=None, scale=1.0):
    """BEV arrow field (x forward up, y left); returns the drawn arrow lengths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    positions = np.asarray(positions, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    lengths = np.linalg.norm(flow[:, :2], axis=1) * scale
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.scatter(-positions[:, 1], positions[:, 0], s=4, c="0.4")
    ax.quiver(-positions[:, 1], positions[:, 0], -flow[:, 1] * scale, flow[:, 0] * scale,
              angles="xy", scale_units="xy", scale=1.0, width=0.003, color="tab:red")
    ax.set_xlabel("-y [m]")
    ax.set_ylabel("x [m]")
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return lengths
