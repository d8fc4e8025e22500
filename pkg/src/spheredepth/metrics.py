"""Depth metrics over valid samples (ground truth inside the depth range)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .panorama import MeshTensor

PRED_FLOOR = 1e-6


class NoValidPixelsError(ValueError):
    pass


@dataclass(frozen=True)
class MetricReport:
    mae: float
    mre: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    n_valid: int
    mae_sum: float   # un-normalised sums, kept for comparison with sum-style reporting
    mre_sum: float

    def csv_header(self) -> str:
        return ",".join(f.name for f in fields(self))

    def csv_row(self) -> str:
        return ",".join(repr(v) for v in asdict(self).values())

    def pretty(self) -> str:
        return "\n".join([
            f"valid samples : {self.n_valid}",
            f"MAE           : {self.mae:.6f}",
            f"MRE           : {self.mre:.6f}",
            f"RMSE          : {self.rmse:.6f}",
            f"RMSE(log10)   : {self.rmse_log:.6f}",
            f"delta < 1.25  : {self.delta1:.6f}",
            f"delta < 1.25^2: {self.delta2:.6f}",
            f"delta < 1.25^3: {self.delta3:.6f}",
        ])


def evaluate(pred, gt, d_min: float = 0.1, d_max: float = 10.0) -> MetricReport:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    valid = np.isfinite(gt) & (gt >= d_min) & (gt <= d_max)
    n = int(valid.sum())
    if n == 0:
        raise NoValidPixelsError(f"no valid pixels: no ground truth inside [{d_min}, {d_max}]")
    g = gt[valid]
    p = np.maximum(pred[valid], PRED_FLOOR)
    abs_err = np.abs(g - p)
    ratio = np.maximum(g / p, p / g)
    mae_sum = float(abs_err.sum())
    mre_sum = float((abs_err / g).sum())
    return MetricReport(
        mae=mae_sum / n,
        mre=mre_sum / n,
        rmse=float(np.sqrt(np.mean((g - p) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log10(g) - np.log10(p)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        n_valid=n,
        mae_sum=mae_sum,
        mre_sum=mre_sum,
    )


def evaluate_mesh(pred: MeshTensor, gt: MeshTensor, d_min: float = 0.1,
                  d_max: float = 10.0) -> MetricReport:
    if pred.data.shape != gt.data.shape or pred.level != gt.level or pred.tr != gt.tr:
        raise ValueError(f"mesh tensors differ: {pred.data.shape} level {pred.level} tr {pred.tr}"
                         f" vs {gt.data.shape} level {gt.level} tr {gt.tr}")
    return evaluate(pred.data, gt.data, d_min, d_max)
