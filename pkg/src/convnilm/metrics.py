"""Disaggregation metrics: MAE, estimated accuracy and signal aggregate error.

All functions take (C, T) arrays of predictions and ground truth. They are
meant to be fed watt-space values; ``MetricsReport.space`` records which
space a report was computed in.
"""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    return pred, target


def mae(pred, target) -> tuple[np.ndarray, float]:
    """Per-appliance mean absolute error and its unweighted mean."""
    pred, target = _pair(pred, target)
    per = np.abs(pred - target).mean(axis=1)
    return per, float(per.mean())


def est_acc(pred, target, per_appliance: bool = False):
    """1 - sum|pred - target| / (2 sum target).

    The total pools every appliance in both sums. With ``per_appliance``
    each appliance gets its own ratio; appliances with no energy come back
    as NaN.
    """
    pred, target = _pair(pred, target)
    err = np.abs(pred - target).sum(axis=1)
    energy = target.sum(axis=1)
    if per_appliance:
        out = np.full(len(err), np.nan)
        ok = energy != 0
        if not ok.all():
            warnings.warn("estimated accuracy undefined for appliances with zero energy", stacklevel=2)
        out[ok] = 1.0 - err[ok] / (2.0 * energy[ok])
        return out
    total = energy.sum()
    if total == 0:
        raise ValueError("estimated accuracy is undefined for an all-zero target")
    return float(1.0 - err.sum() / (2.0 * total))


def sae(pred, target) -> tuple[np.ndarray, float]:
    """|sum pred - sum target| / sum target per appliance, and the mean over defined ones."""
    pred, target = _pair(pred, target)
    r_hat = pred.sum(axis=1)
    r = target.sum(axis=1)
    per = np.full(len(r), np.nan)
    ok = r != 0
    per[ok] = np.abs(r_hat[ok] - r[ok]) / r[ok]
    if not ok.all():
        warnings.warn(f"SAE undefined for {int((~ok).sum())} appliance(s) with zero energy; "
                      "excluded from the total", stacklevel=2)
    total = float(per[ok].mean()) if ok.any() else float("nan")
    return per, total


@dataclass
class MetricsReport:
    appliances: list[str]
    mae: np.ndarray
    mae_total: float
    est_acc: np.ndarray
    est_acc_total: float
    sae: np.ndarray
    sae_total: float
    n_windows: int
    space: str = "watts"

    @classmethod
    def compute(cls, pred, target, appliances: list[str] | None = None,
                n_windows: int = 1, space: str = "watts") -> "MetricsReport":
        pred, target = _pair(pred, target)
        names = appliances or [f"appliance_{i}" for i in range(pred.shape[0])]
        m, m_tot = mae(pred, target)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            acc = est_acc(pred, target, per_appliance=True)
        s, s_tot = sae(pred, target)
        return cls(list(names), m, m_tot, acc, est_acc(pred, target), s, s_tot, n_windows, space)

    def rows(self) -> list[tuple]:
        rows = [(n, float(a), float(b), float(c))
                for n, a, b, c in zip(self.appliances, self.mae, self.est_acc, self.sae)]
        rows.append(("total", self.mae_total, self.est_acc_total, self.sae_total))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        unit = "mae_w" if self.space == "watts" else "mae_scaled"
        writer.writerow(["appliance", unit, "est_acc", "sae"])
        for name, a, b, c in self.rows():
            writer.writerow([name, repr(a), repr(b), repr(c)])
        return buf.getvalue()

    def table(self) -> str:
        width = max(len(n) for n in self.appliances + ["appliance"])
        unit = "MAE [W]" if self.space == "watts" else "MAE [scaled]"
        lines = [f"metrics over {self.n_windows} window(s), {self.space} space",
                 f"{'appliance':<{width}}  {unit:>12}  {'Est.Acc':>8}  {'SAE':>8}"]
        for name, a, b, c in self.rows():
            lines.append(f"{name:<{width}}  {a:>12.4f}  {b:>8.4f}  {c:>8.4f}")
        return "\n".join(lines)
