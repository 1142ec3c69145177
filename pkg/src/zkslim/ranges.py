"""Activation range statistics.

Two views of the same trace:

* per site: batch-level ``[min, max]`` over all samples and neurons, which is
  what sizes the lookup table;
* per sample: the activation loss ``sum_i (max_j z_ij - min_j z_ij)``, whose
  mean and standard deviation summarise the range distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ActivationTrace


class SiteMismatch(ValueError):
    pass


@dataclass
class RangeStats:
    site_min: np.ndarray
    site_max: np.ndarray
    sample_loss: np.ndarray = field(repr=False)
    mean: float
    std: float

    @property
    def site_range(self) -> np.ndarray:
        return self.site_max - self.site_min

    @property
    def n_sites(self) -> int:
        return len(self.site_min)

    def to_dict(self) -> dict:
        return {
            "site_min": [float(v) for v in self.site_min],
            "site_max": [float(v) for v in self.site_max],
            "site_range": [float(v) for v in self.site_range],
            "mean": float(self.mean),
            "std": float(self.std),
        }


def range_stats(trace: ActivationTrace, real_units: bool = True) -> RangeStats:
    unit = 2.0 ** trace.scale if (real_units and trace.scale is not None) else 1.0
    mins, maxs = [], []
    loss = np.zeros(trace.n_samples)
    for z in trace.sites:
        z = np.asarray(z, dtype=np.float64) / unit
        mins.append(z.min())
        maxs.append(z.max())
        loss += z.max(axis=1) - z.min(axis=1)
    mean = float(loss.mean()) if loss.size else 0.0
    std = float(loss.std()) if loss.size else 0.0
    return RangeStats(np.array(mins), np.array(maxs), loss, mean, std)


def _reduction(before: float, after: float) -> float:
    if before == 0:
        return 0.0
    return (1.0 - after / before) * 100.0


@dataclass
class RangeReport:
    before: RangeStats
    after: RangeStats | None = None

    @property
    def reduction_pct(self) -> float:
        if self.after is None:
            return 0.0
        return _reduction(self.before.mean, self.after.mean)

    @property
    def std_reduction_pct(self) -> float:
        if self.after is None:
            return 0.0
        return _reduction(self.before.std, self.after.std)

    @property
    def empty(self) -> bool:
        return self.before.n_sites == 0 and self.before.sample_loss.size == 0

    def domains(self, scale: int, which: str = "after") -> list[tuple[int, int]]:
        """Per-site integer lookup domains; only meaningful for reports in integer units."""
        stats = self.after if (which == "after" and self.after is not None) else self.before
        return [(int(np.floor(lo)), int(np.ceil(hi))) for lo, hi in zip(stats.site_min, stats.site_max)]

    def to_dict(self) -> dict:
        out = {"before": self.before.to_dict(), "empty": self.empty}
        if self.after is not None:
            out["after"] = self.after.to_dict()
            out["reduction_pct"] = round(self.reduction_pct, 6)
            out["std_reduction_pct"] = round(self.std_reduction_pct, 6)
        return out


def activation_range_stats(trace_before: ActivationTrace,
                           trace_after: ActivationTrace | None = None,
                           real_units: bool = True) -> RangeReport:
    before = range_stats(trace_before, real_units)
    if trace_after is None:
        return RangeReport(before)
    if len(trace_after.sites) != len(trace_before.sites):
        raise SiteMismatch(
            f"{len(trace_before.sites)} sites before vs {len(trace_after.sites)} after"
        )
    for a, b in zip(trace_before.sites, trace_after.sites):
        if a.shape[1] != b.shape[1]:
            raise SiteMismatch(f"site width {a.shape[1]} vs {b.shape[1]}")
    return RangeReport(before, range_stats(trace_after, real_units))


def summary_report(mean_before: float, std_before: float,
                   mean_after: float, std_after: float) -> RangeReport:
    """A report carrying only aggregate figures (no per-site detail)."""
    empty = np.zeros(0)
    return RangeReport(RangeStats(empty, empty, empty, mean_before, std_before),
                       RangeStats(empty, empty, empty, mean_after, std_after))
