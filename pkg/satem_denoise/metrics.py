"""Denoising quality metrics.

``snr`` puts the energy of the *denoised* signal in the numerator,
10 log10(||x_d||^2 / ||x_t - x_d||^2), not the clean-signal convention of
most textbooks. ``ssim`` is computed from whole-record statistics (a single
global window). Callers in this package pass normalized-domain signals.
"""
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .data import write_csv
from .uncertainties import cast_columns_to_ufloat

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["mse", "snr_db", "ssim"]
REPORT_COLUMNS = ["record_id"] + METRIC_COLUMNS
HISTOGRAM_COLUMNS = ["bin_lo", "bin_hi", "count"]

# reported when the denoised signal is identically zero
SNR_FLOOR_DB = -300.0


def _pair(x_d, x_t) -> Tuple[np.ndarray, np.ndarray]:
    x_d = np.asarray(x_d, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_d.shape != x_t.shape:
        raise ValueError(f"length mismatch: {x_d.shape} vs {x_t.shape}")
    return x_d, x_t


def mse(x_d, x_t) -> float:
    """mean squared error"""
    x_d, x_t = _pair(x_d, x_t)
    return float(np.mean((x_d - x_t) ** 2))


def snr(x_d, x_t) -> float:
    """signal-to-noise ratio in dB, +inf when the two signals are identical"""
    x_d, x_t = _pair(x_d, x_t)
    residual = float(np.sum((x_t - x_d) ** 2))
    energy = float(np.sum(x_d ** 2))
    if residual == 0:
        return np.inf
    if energy == 0:
        return SNR_FLOOR_DB
    return max(10.0 * np.log10(energy / residual), SNR_FLOOR_DB)


def _ratio(num: float, den: float) -> float:
    # 0/0 arises only for two identical degenerate inputs
    return 1.0 if den == 0 and num == 0 else num / den


def ssim(x_d, x_t, L: Optional[float] = None) -> float:
    """structural similarity from global means, population variances and covariance

    Parameters
    ----------
    x_d, x_t : array-like
        Denoised and reference signals, length >= 2.
    L : float, optional
        Dynamic range, ``max(x_t) - min(x_t)`` when None.
    """
    x_d, x_t = _pair(x_d, x_t)
    if x_d.size < 2:
        raise ValueError(f"ssim needs at least 2 samples, got {x_d.size}")
    if L is None:
        L = float(np.max(x_t) - np.min(x_t))
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2

    mu_d, mu_t = x_d.mean(), x_t.mean()
    var_d, var_t = x_d.var(), x_t.var()
    cov = np.mean((x_d - mu_d) * (x_t - mu_t))
    luminance = _ratio(2 * mu_d * mu_t + c1, mu_d ** 2 + mu_t ** 2 + c1)
    structure = _ratio(2 * cov + c2, var_d + var_t + c2)
    return float(luminance * structure)


@dataclass
class MetricReport(object):
    """
    Per-record metrics with aggregates and histograms

    Aggregates ignore non-finite values (an SNR of +inf for a perfect record);
    histograms count them in the top bin.
    """

    records: pd.DataFrame
    bins: int = 20
    histograms: Dict[str, pd.DataFrame] = field(default_factory=dict, init=False)

    def __post_init__(self):
        if self.records.empty:
            raise ValueError("cannot report on zero records")
        for name in METRIC_COLUMNS:
            self.histograms[name] = histogram(self.records[name].to_numpy(), self.bins)

    @property
    def summary(self) -> Dict[str, Any]:
        """mean +/- standard error per metric as ufloats"""
        return cast_columns_to_ufloat(self.records, METRIC_COLUMNS)

    @property
    def aggregates(self) -> pd.DataFrame:
        rows = []
        for name, value in self.summary.items():
            values = self.records[name].to_numpy()
            finite = values[np.isfinite(values)]
            rows.append(
                {
                    "metric": name,
                    "mean": value.nominal_value,
                    "sem": value.std_dev,
                    "median": float(np.median(finite)) if finite.size else np.nan,
                    "count": int(finite.size),
                }
            )
        return pd.DataFrame(rows, columns=["metric", "mean", "sem", "median", "count"])


def histogram(values: np.ndarray, bins: int = 20) -> pd.DataFrame:
    """``bin_lo, bin_hi, count`` table over ``values``

    Infinite entries (an SNR of +inf for a perfect record) are counted in the
    outermost bins, so the counts add up to the number of non-NaN values.
    """
    values = np.asarray(values, dtype=np.float64)
    values = values[~np.isnan(values)]
    if values.size == 0:
        return pd.DataFrame(columns=HISTOGRAM_COLUMNS)
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        rows = [
            {"bin_lo": v, "bin_hi": v, "count": int(np.sum(values == v))}
            for v in np.unique(values)
        ]
        return pd.DataFrame(rows, columns=HISTOGRAM_COLUMNS)
    counts, edges = np.histogram(np.clip(values, finite.min(), finite.max()), bins=bins)
    return pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:], "count": counts})


def record_metrics(x_d, x_t, L: Optional[float] = None) -> Dict[str, float]:
    return {"mse": mse(x_d, x_t), "snr_db": snr(x_d, x_t), "ssim": ssim(x_d, x_t, L)}


def batch_report(
    pairs: Iterable[Tuple[np.ndarray, np.ndarray]],
    bins: int = 20,
    record_ids: Optional[Sequence[Any]] = None,
) -> MetricReport:
    """metrics for every (denoised, reference) pair

    Parameters
    ----------
    pairs : iterable of (x_d, x_t)
        Denoised and reference signals.
    bins : int
        Histogram bin count.
    record_ids : sequence, optional
        Labels for the ``record_id`` column; positions when None.
    """
    rows: List[Dict[str, Any]] = []
    for i, (x_d, x_t) in enumerate(pairs):
        row = {"record_id": i if record_ids is None else record_ids[i]}
        row.update(record_metrics(x_d, x_t))
        rows.append(row)
    if not rows:
        raise ValueError("batch_report needs at least one pair")
    return MetricReport(pd.DataFrame(rows, columns=REPORT_COLUMNS), bins=bins)


def write_report(report: MetricReport, directory: str, prefix: str = "") -> List[str]:
    """write the per-record table, the aggregates and one histogram per metric"""
    paths = [os.path.join(directory, f"{prefix}report.csv")]
    write_csv(report.records, paths[0])
    paths.append(os.path.join(directory, f"{prefix}summary.csv"))
    write_csv(report.aggregates, paths[-1])
    for name, table in report.histograms.items():
        paths.append(os.path.join(directory, f"{prefix}hist_{name}.csv"))
        write_csv(table, paths[-1])
    logger.info("metric report for %d records in %s", len(report.records), directory)
    return paths
