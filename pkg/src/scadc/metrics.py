"""Depth error metrics: RMSE, mean absolute relative error and delta accuracies.

Only pixels with valid groundtruth count. A pixel the prediction leaves
invalid is scored as a prediction of 0 m: it adds its full depth to the
RMSE, a relative error of 1, and fails every delta threshold. Methods with
sparse output therefore cannot improve their scores by abstaining.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .depthio import DepthMap
from .errors import ArgumentError, DimensionError

DELTA_BASE = 1.25
REGIONS = ("full", "lower", "upper")


@dataclass(frozen=True)
class EvalReport:
    rmse: float
    rel: float
    delta1: float
    delta2: float
    delta3: float
    n_pixels: int
    region: str = "full"

    def to_dict(self) -> dict:
        return {
            "region": self.region,
            "rmse": self.rmse,
            "rel": self.rel,
            "delta1": self.delta1,
            "delta2": self.delta2,
            "delta3": self.delta3,
            "n_pixels": self.n_pixels,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        return cls(
            float(d["rmse"]), float(d["rel"]), float(d["delta1"]), float(d["delta2"]),
            float(d["delta3"]), int(d["n_pixels"]), d.get("region", "full"),
        )

    def format_row(self, name: str = "") -> str:
        """Table-style line; deltas rounded to one decimal for display."""
        return (
            f"{name:<8} RMSE {self.rmse:.4f}  Rel {self.rel:.4f}  "
            f"d1 {self.delta1:.1f}  d2 {self.delta2:.1f}  d3 {self.delta3:.1f}  (n={self.n_pixels})"
        )


def _rows(region, height):
    if region is None or region == "full":
        return 0, height
    start, stop = region
    return max(0, start), min(height, stop)


def evaluate(pred: DepthMap, gt: DepthMap, region=None, label: str | None = None) -> EvalReport:
    """Metrics over gt-valid pixels, optionally restricted to a half-open row range."""
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and groundtruth {gt.shape} differ in size")
    start, stop = _rows(region, gt.height)
    mask = np.zeros(gt.shape, dtype=bool)
    mask[start:stop] = gt.valid[start:stop]
    n = int(mask.sum())
    if n == 0:
        raise ArgumentError(f"no valid groundtruth pixels in region {region}")
    d = gt.values[mask]
    d_hat = np.where(pred.valid[mask], pred.values[mask], 0.0)
    ok = pred.valid[mask]

    err = d_hat - d
    rmse = float(np.sqrt(np.mean(err**2)))
    rel = float(np.mean(np.abs(err) / d))
    ratio = np.ones_like(d)
    ratio[ok] = np.maximum(d_hat[ok] / d[ok], d[ok] / d_hat[ok])
    deltas = []
    for i in (1, 2, 3):
        passed = ok & (ratio < DELTA_BASE**i)
        deltas.append(100.0 * float(passed.sum()) / n)
    name = label if label is not None else ("full" if region is None or region == "full" else "region")
    return EvalReport(rmse, rel, *deltas, n, name)


def completeness_report(pred: DepthMap, full_ref: DepthMap, lidar_horizon: int) -> dict[str, EvalReport]:
    """Separate reports for the rows above (``upper``) and below (``lower``) the lidar horizon."""
    return {
        "lower": evaluate(pred, full_ref, (lidar_horizon, full_ref.height), "lower"),
        "upper": evaluate(pred, full_ref, (0, lidar_horizon), "upper"),
    }


def aggregate(reports: Iterable[EvalReport], region: str | None = None) -> EvalReport:
    """Pixel-weighted combination, as if all frames' pixels were pooled."""
    reports = list(reports)
    if not reports:
        raise ArgumentError("nothing to aggregate")
    n = np.array([r.n_pixels for r in reports], dtype=np.float64)
    total = n.sum()

    def wmean(values):
        return float(np.dot(n, values) / total)

    return EvalReport(
        rmse=float(np.sqrt(wmean([r.rmse**2 for r in reports]))),
        rel=wmean([r.rel for r in reports]),
        delta1=wmean([r.delta1 for r in reports]),
        delta2=wmean([r.delta2 for r in reports]),
        delta3=wmean([r.delta3 for r in reports]),
        n_pixels=int(total),
        region=region or reports[0].region,
    )


# typical magnitudes on KITTI validation, used as display fixtures
REFERENCE_TABLE = {
    "PSMNet": EvalReport(2.4107, 0.1296, 98.6, 99.8, 99.9, 0, "full"),
    "SSDC": EvalReport(1.0438, 0.0191, 99.3, 99.8, 99.9, 0, "full"),
    "SCADC": EvalReport(1.0096, 0.0226, 99.5, 99.9, 100.0, 0, "full"),
}


def format_table(rows: Sequence[tuple[str, EvalReport]]) -> str:
    header = "Methods   RMSE     Rel      d1     d2     d3"
    lines = [header]
    for name, r in rows:
        lines.append(f"{name:<9} {r.rmse:.4f}  {r.rel:.4f}  {r.delta1:5.1f}  {r.delta2:5.1f}  {r.delta3:5.1f}")
    return "\n".join(lines)


__all__ = ["EvalReport", "evaluate", "completeness_report", "aggregate", "format_table"]
