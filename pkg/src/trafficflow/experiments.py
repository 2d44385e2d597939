"""Scaled-down experiments: overfitting a tiny model and the TVF ablation."""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass, replace

import numpy as np

from .pipeline import (ClipRunner, OptimConfig, RunConfig, evaluate_sequences, load_checkpoint,
                       run_training, zero_predictor)
from .synthworld import ScenarioConfig, simulate_sequence


def make_sequences(scenario: ScenarioConfig, count, base_seed):
    return [simulate_sequence(replace(scenario, seed=base_seed + i)) for i in range(count)]


def train_and_score(cfg: RunConfig, train, test, workdir=None):
    """Train on ``train`` sequences, return (MetricReport on ``test``, TrainResult)."""
    with tempfile.TemporaryDirectory() as tmp:
        result = run_training(cfg, None, workdir or tmp, train_sequences=train)
        net, stub, cfg = load_checkpoint(result.checkpoint, cfg)
        report = evaluate_sequences(test, ClipRunner(net, stub, cfg).predict_clip, cfg)
    return report, result


@dataclass
class OverfitResult:
    baseline_mepe: float
    mepe: float
    seconds: float

    @property
    def ratio(self):
        return self.mepe / self.baseline_mepe


def overfit_config(steps=2000, seed=0):
    cfg = RunConfig.tiny(optim=OptimConfig(lr=3e-3, decay=0.99, epochs=1, max_steps=steps, od_steps=50),
                         seed=seed)
    cfg.model.supervision = "full"
    return cfg


def overfit_experiment(clips=8, steps=2000, seed=0):
    """Train the tiny model on ``clips`` sequences and score it on the same clips.

    The zero-flow baseline is evaluated by the same evaluator.
    """
    cfg = overfit_config(steps, seed)
    seqs = make_sequences(cfg.scenario, clips, 1000 + 100 * seed)
    baseline = evaluate_sequences(seqs, zero_predictor(cfg), cfg).values["MEPE"]
    start = time.perf_counter()
    report, _ = train_and_score(cfg, seqs, seqs)
    return OverfitResult(baseline, report.values["MEPE"], time.perf_counter() - start)


def ablation_configs(steps, seed, supervision="full"):
    """(full model, point-level-only model) trained identically."""
    full = RunConfig.tiny(optim=OptimConfig(lr=3e-3, decay=0.9, epochs=1, max_steps=steps, od_steps=100),
                          seed=seed)
    full.model.supervision = supervision
    point = RunConfig.from_dict(full.to_dict())
    point.model.use_tvf = False
    point.model.use_od = False
    return full, point


def ablation_experiment(seeds=(0, 1, 2), train_clips=32, test_clips=32, steps=600, supervision="full"):
    """Mean held-out MEPE of the full and point-only models over ``seeds``.

    Returns ``(full_mepes, point_mepes)`` as lists, one entry per seed.
    """
    full_scores, point_scores = [], []
    for seed in seeds:
        full, point = ablation_configs(steps, seed, supervision)
        train = make_sequences(full.scenario, train_clips, 5000 + 1000 * seed)
        test = make_sequences(full.scenario, test_clips, 900000)
        full_scores.append(train_and_score(full, train, test)[0].values["MEPE"])
        point_scores.append(train_and_score(point, train, test)[0].values["MEPE"])
    return full_scores, point_scores
