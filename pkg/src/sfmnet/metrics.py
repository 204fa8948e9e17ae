"""Evaluation metrics: scale-invariant depth error, relative pose error,
motion-mask IoU and flow endpoint error, plus the report container."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import RigidMotion
from .losses import pose_error


def scale_invariant_log_rmse(d, d_gt, valid=None) -> float:
    """Variance of the log-depth difference over valid pixels."""
    d = np.asarray(d, dtype=np.float64)
    d_gt = np.asarray(d_gt, dtype=np.float64)
    if d.shape != d_gt.shape:
        raise ValueError("depth shapes differ")
    valid = np.ones(d.shape, bool) if valid is None else np.asarray(valid) > 0
    if not valid.any():
        raise ValueError("empty valid mask")
    if np.any(d[valid] <= 0) or np.any(d_gt[valid] <= 0):
        raise ValueError("depths must be positive on valid pixels")
    diff = np.log(d[valid]) - np.log(d_gt[valid])
    diff -= diff.mean()
    # centred form; algebraically mean(diff^2) - mean(diff)^2 without the cancellation
    return float(np.mean(diff * diff))


def relative_pose_error(pred: RigidMotion, gt_R, gt_t) -> tuple[float, float]:
    """(translation error, rotation error in radians) between frame-to-frame motions."""
    t_err, r_err = pose_error(pred, gt_R, gt_t)
    return float(t_err), float(r_err)


def mask_iou(pred, gt_masks, threshold: float = 0.5) -> float:
    """Mean over ground-truth objects of the best IoU among each predicted mask
    and its complement."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    gt_masks = [np.asarray(g) > 0.5 for g in gt_masks]
    if not gt_masks:
        raise ValueError("no ground-truth objects")
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim == 2:
        pred = pred[None]
    proposals = []
    for m in pred:
        b = m > threshold
        proposals += [b, ~b]
    scores = []
    for g in gt_masks:
        best = 0.0
        for p in proposals:
            union = np.count_nonzero(p | g)
            iou = np.count_nonzero(p & g) / union if union else 1.0
            best = max(best, iou)
        scores.append(best)
    return float(np.mean(scores))


def endpoint_error(flow, gt_flow, valid=None) -> float:
    U, V = np.asarray(flow[0], dtype=np.float64), np.asarray(flow[1], dtype=np.float64)
    Ug, Vg = np.asarray(gt_flow[0], dtype=np.float64), np.asarray(gt_flow[1], dtype=np.float64)
    if U.shape != Ug.shape or V.shape != Vg.shape:
        raise ValueError("flow shapes differ")
    epe = np.hypot(U - Ug, V - Vg)
    if valid is None:
        return float(epe.mean())
    valid = np.asarray(valid) > 0
    return float(epe[valid].mean()) if valid.any() else 0.0


@dataclass
class EvalReport:
    """Per-pair metric values plus means over pairs."""

    pairs: dict[str, dict[str, float]] = field(default_factory=dict)

    def add(self, pair: str, metric: str, value: float) -> None:
        value = float(value)
        if not math.isfinite(value) or value < 0:
            raise ValueError(f"metric {metric} for {pair} must be finite and >= 0, got {value}")
        self.pairs.setdefault(pair, {})[metric] = value

    def aggregates(self) -> dict[str, float]:
        sums: dict[str, list[float]] = {}
        for values in self.pairs.values():
            for k, v in values.items():
                sums.setdefault(k, []).append(v)
        return {k: float(np.mean(v)) for k, v in sorted(sums.items())}

    def to_text(self) -> str:
        lines = [f"{pair}.{k}={v:.9g}" for pair in sorted(self.pairs) for k, v in sorted(self.pairs[pair].items())]
        lines += [f"mean.{k}={v:.9g}" for k, v in self.aggregates().items()]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"pairs": self.pairs, "mean": self.aggregates()}, indent=2, sort_keys=True)

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        rep = cls()
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            pair, _, metric = key.rpartition(".")
            if pair != "mean":
                rep.add(pair, metric, float(value))
        return rep

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        rep = cls()
        for pair, values in json.loads(text)["pairs"].items():
            for k, v in values.items():
                rep.add(pair, k, v)
        return rep
