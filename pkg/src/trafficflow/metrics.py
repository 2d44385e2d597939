"""Scene-flow and ego-motion evaluation metrics.

Metrics over an empty bucket (e.g. MEPE on a frame without moving points)
are absent from the report rather than zero.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import SE3Transform
from .synthworld import CLASS_NAMES

COLUMNS = ("EPE", "AccS", "AccR", "RNE", "MRNE", "SRNE", "MEPE", "MagE", "DirE",
           "SEPE", "AvgEPE", "RTE", "RAE")


def _errors(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return np.linalg.norm(pred - gt, axis=1), np.linalg.norm(gt, axis=1)


def _accuracy(err, gt_norm, abs_tol, rel_tol):
    """Percentage of points with error below ``abs_tol`` or relative error
    below ``rel_tol``; the relative clause is skipped where ``gt`` is zero."""
    with np.errstate(divide="ignore", invalid="ignore"):
        rel_ok = np.where(gt_norm > 0, err / np.where(gt_norm > 0, gt_norm, 1.0) < rel_tol, False)
    return 100.0 * np.mean((err < abs_tol) | rel_ok)


def _ratio(ratio, n):
    r = np.broadcast_to(np.asarray(ratio, dtype=np.float64), (n,))
    if np.any(r <= 0):
        raise ValueError("resolution ratios must be positive")
    return r


def overall_metrics(pred, gt, ratio=1.0):
    err, gt_norm = _errors(pred, gt)
    if len(err) == 0:
        return {}
    r = _ratio(ratio, len(err))
    return {
        "EPE": float(err.mean()),
        "AccS": float(_accuracy(err, gt_norm, 0.05, 0.05)),
        "AccR": float(_accuracy(err, gt_norm, 0.1, 0.1)),
        "RNE": float(np.mean(err / r)),
    }


def direction_errors(pred, gt):
    """Angle (rad) between predicted and true vectors; pairs with a zero vector are dropped.

    Evaluated as atan2(|a x b|, a . b), which equals the arccos of the
    normalised dot product but stays accurate near 0 and pi (exactly pi for
    opposite vectors).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    ok = (np.linalg.norm(pred, axis=1) > 0) & (np.linalg.norm(gt, axis=1) > 0)
    a, b = pred[ok], gt[ok]
    return np.arctan2(np.linalg.norm(np.cross(a, b), axis=1), np.sum(a * b, axis=1))


def moving_static_metrics(pred, gt, moving_mask, class_id=None, ratio=1.0):
    err, gt_norm = _errors(pred, gt)
    moving = np.asarray(moving_mask, dtype=bool)
    r = _ratio(ratio, len(err))
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    out = {}
    if moving.any():
        out["MRNE"] = float(np.mean(err[moving] / r[moving]))
        out["MEPE"] = float(err[moving].mean())
        out["MagE"] = float(np.mean(np.abs(np.linalg.norm(pred[moving], axis=1) - gt_norm[moving])))
        dire = direction_errors(pred[moving], gt[moving])
        if len(dire):
            out["DirE"] = float(dire.mean())
        out["AccS_moving"] = float(_accuracy(err[moving], gt_norm[moving], 0.05, 0.05))
        out["AccR_moving"] = float(_accuracy(err[moving], gt_norm[moving], 0.1, 0.1))
    static = ~moving
    if static.any():
        out["SRNE"] = float(np.mean(err[static] / r[static]))
        out["SEPE"] = float(err[static].mean())
    if "MEPE" in out and "SEPE" in out:
        out["AvgEPE"] = (out["MEPE"] + out["SEPE"]) / 2
    if class_id is not None:
        cls = np.asarray(class_id)
        per_class = {}
        for c in np.unique(cls[moving]):
            sel = moving & (cls == c)
            per_class[CLASS_NAMES.get(int(c), str(int(c)))] = float(np.mean(err[sel] / r[sel]))
        out["per_class_MRNE"] = per_class
    return out


def rotation_angle(rot):
    """Rotation angle (rad) of a 3x3 rotation matrix."""
    c = (np.trace(rot) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def ego_metrics(omega_pred, omega_gt):
    """RTE (m) and RAE (degrees); both transforms map frame t into frame t+1."""
    pred = omega_pred.matrix if isinstance(omega_pred, SE3Transform) else np.asarray(omega_pred, dtype=np.float64)
    gt = omega_gt.matrix if isinstance(omega_gt, SE3Transform) else np.asarray(omega_gt, dtype=np.float64)
    rte = float(np.linalg.norm(pred[:3, 3] - gt[:3, 3]))
    rae = math.degrees(rotation_angle(gt[:3, :3].T @ pred[:3, :3]))
    return {"RTE": rte, "RAE": rae}


@dataclass
class MetricReport:
    """Point-weighted aggregate over frames.

    Each metric is averaged over frames weighted by the number of points in
    its bucket (all points, moving, or static), which equals computing it on
    the pooled points. Ego metrics are averaged per frame.
    """
    values: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    per_class: dict = field(default_factory=dict)

    _BUCKET = {"EPE": "all", "AccS": "all", "AccR": "all", "RNE": "all",
               "MRNE": "moving", "MEPE": "moving", "MagE": "moving", "DirE": "dir",
               "AccS_moving": "moving", "AccR_moving": "moving",
               "SRNE": "static", "SEPE": "static", "RTE": "ego", "RAE": "ego"}

    def __post_init__(self):
        self._sums = {}
        self._class_sums = {}

    def add_frame(self, pred, gt, moving_mask, class_id=None, ratio=1.0, omega_pred=None, omega_gt=None):
        moving = np.asarray(moving_mask, dtype=bool)
        frame = overall_metrics(pred, gt, ratio)
        frame.update(moving_static_metrics(pred, gt, moving, class_id, ratio))
        n_dir = len(direction_errors(np.asarray(pred)[moving], np.asarray(gt)[moving]))
        weights = {"all": len(moving), "moving": int(moving.sum()), "static": int((~moving).sum()),
                   "dir": n_dir, "ego": 1}
        if omega_pred is not None and omega_gt is not None:
            frame.update(ego_metrics(omega_pred, omega_gt))
        for name, value in frame.items():
            if name == "per_class_MRNE" or name == "AvgEPE":
                continue
            w = weights[self._BUCKET[name]]
            s, n = self._sums.get(name, (0.0, 0))
            self._sums[name] = (s + value * w, n + w)
        if class_id is not None:
            cls = np.asarray(class_id)
            for name, value in frame.get("per_class_MRNE", {}).items():
                c = [k for k, v in CLASS_NAMES.items() if v == name]
                w = int((moving & (cls == c[0])).sum()) if c else 1
                s, n = self._class_sums.get(name, (0.0, 0))
                self._class_sums[name] = (s + value * w, n + w)
        for bucket in ("all", "moving", "static"):
            self.counts[bucket] = self.counts.get(bucket, 0) + weights[bucket]
        self._finalize()

    def _finalize(self):
        self.values = {k: s / n for k, (s, n) in self._sums.items() if n > 0}
        if "MEPE" in self.values and "SEPE" in self.values:
            self.values["AvgEPE"] = (self.values["MEPE"] + self.values["SEPE"]) / 2
        self.per_class = {k: s / n for k, (s, n) in sorted(self._class_sums.items()) if n > 0}

    def to_csv(self) -> str:
        """Header plus one row; absent metrics are empty cells."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        writer.writerow(["" if c not in self.values else repr(float(self.values[c])) for c in COLUMNS])
        return buf.getvalue()

    def per_class_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "MRNE", "points"])
        for name, value in self.per_class.items():
            writer.writerow([name, repr(float(value)), self._class_sums[name][1]])
        return buf.getvalue()

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        path.with_name(path.stem + "_per_class.csv").write_text(self.per_class_csv())
