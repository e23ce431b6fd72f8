"""Reconstruction fidelity metrics and constrained encoder operating-point search."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .encoder import EncoderConfig, encode_ramsdm, event_density, reconstruct
from .exceptions import ParameterError, UndefinedMetricError

SNR_CAP_DB = 300.0
SWEEP_HEADER = ["k_slow", "k_fast", "snr_db", "nmse", "corr", "rho_combined", "rho_slow", "rho_fast", "feasible"]


@dataclass(frozen=True)
class FidelityThresholds:
    tau_snr: float = 8.0
    tau_nmse: float = 0.16
    tau_corr: float = 0.90

    def __post_init__(self):
        if not math.isfinite(self.tau_snr):
            raise ParameterError("tau_snr must be finite")
        if not 0 < self.tau_nmse <= 1:
            raise ParameterError("tau_nmse must lie in (0, 1]")
        if not -1 < self.tau_corr <= 1:
            raise ParameterError("tau_corr must lie in (-1, 1]")


def default_k_values() -> tuple[float, ...]:
    return tuple(round(0.6 + 0.2 * i, 10) for i in range(10))


@dataclass(frozen=True)
class SweepGrid:
    k_values: tuple[float, ...] = field(default_factory=default_k_values)

    def __post_init__(self):
        k = tuple(float(v) for v in self.k_values)
        object.__setattr__(self, "k_values", k)
        if not k:
            raise ParameterError("sweep grid is empty")
        if any(v <= 0 for v in k):
            raise ParameterError("grid values must be positive")
        if any(b <= a for a, b in zip(k, k[1:])):
            raise ParameterError("grid values must be strictly ascending")

    def pairs(self) -> list[tuple[float, float]]:
        return [(ks, kf) for ks in self.k_values for kf in self.k_values if kf < ks]


@dataclass(frozen=True)
class OperatingPoint:
    k_slow: float
    k_fast: float
    snr: float
    nmse: float
    corr: float
    rho: float
    rho_slow: float = float("nan")
    rho_fast: float = float("nan")
    feasible: bool = False


@dataclass(frozen=True)
class SweepResult:
    selected: OperatingPoint | None
    table: list[OperatingPoint]

    @property
    def status(self) -> str:
        return "ok" if self.selected is not None else "no_feasible_point"


# --------------------------------------------------------------------------
# metrics


def _pair(x, xh):
    x = np.asarray(x, dtype=np.float64)
    xh = np.asarray(xh, dtype=np.float64)
    if x.shape != xh.shape or x.ndim != 1 or x.size == 0:
        raise ParameterError("x and x_hat must be non-empty 1-D series of equal length")
    return x, xh


def _snr_from(sig_pow: float, err_pow: float) -> float:
    if sig_pow == 0:
        raise UndefinedMetricError("SNR undefined for an all-zero reference")
    if err_pow == 0:
        return SNR_CAP_DB
    return min(SNR_CAP_DB, 10.0 * math.log10(sig_pow / err_pow))


def _nmse_from(err_pow: float, x: np.ndarray) -> float:
    var_pow = float(np.sum((x - x.mean()) ** 2))
    if var_pow == 0:
        raise UndefinedMetricError("nMSE undefined for a constant reference")
    return err_pow / var_pow


def snr(x, x_hat) -> float:
    """``10 log10(sum x^2 / sum (x - x_hat)^2)`` in dB, capped at 300 dB."""
    x, xh = _pair(x, x_hat)
    return _snr_from(float(np.sum(x * x)), float(np.sum((x - xh) ** 2)))


def nmse(x, x_hat) -> float:
    """Error power over the reference's variance power (mean removed)."""
    x, xh = _pair(x, x_hat)
    return _nmse_from(float(np.sum((x - xh) ** 2)), x)


def pearson_corr(x, x_hat) -> float:
    x, xh = _pair(x, x_hat)
    a = x - x.mean()
    b = xh - xh.mean()
    na, nb = float(np.sqrt(np.sum(a * a))), float(np.sqrt(np.sum(b * b)))
    if na == 0 or nb == 0:
        raise UndefinedMetricError("correlation undefined for a constant series")
    return float(np.clip(np.sum(a * b) / (na * nb), -1.0, 1.0))


def fidelity(x, x_hat) -> tuple[float, float, float]:
    """(snr, nmse, corr) computed from one shared residual."""
    x, xh = _pair(x, x_hat)
    err_pow = float(np.sum((x - xh) ** 2))
    return _snr_from(float(np.sum(x * x)), err_pow), _nmse_from(err_pow, x), pearson_corr(x, xh)


def check_feasible(snr_db: float, nmse_val: float, corr: float, thr: FidelityThresholds) -> bool:
    return bool(snr_db >= thr.tau_snr and nmse_val <= thr.tau_nmse and corr >= thr.tau_corr)


# --------------------------------------------------------------------------
# sweep


def evaluate_pair(signals: Sequence[np.ndarray], k_slow, k_fast, base: EncoderConfig, thr, fs=100.0):
    cfg = replace(base, k_slow=k_slow, k_fast=k_fast)
    rows = []
    for x in signals:
        stream = encode_ramsdm(x, cfg, fs)
        d = event_density(stream)
        rows.append((*fidelity(x, reconstruct(stream)), d.combined, d.slow, d.fast))
    m = np.mean(np.array(rows), axis=0)
    s, n, c = float(m[0]), float(m[1]), float(m[2])
    return OperatingPoint(
        k_slow, k_fast, s, n, c, float(m[3]), float(m[4]), float(m[5]), check_feasible(s, n, c, thr)
    )


def select(table: Sequence[OperatingPoint]) -> OperatingPoint | None:
    """Minimum mean density among feasible rows; ties go to larger k_slow, then larger k_fast."""
    feas = [p for p in table if p.feasible]
    if not feas:
        return None
    return min(feas, key=lambda p: (p.rho, -p.k_slow, -p.k_fast))


def grid_search(
    signals: Sequence[np.ndarray],
    grid: SweepGrid | None = None,
    thr: FidelityThresholds | None = None,
    base: EncoderConfig | None = None,
    fs: float = 100.0,
) -> SweepResult:
    grid = grid or SweepGrid()
    thr = thr or FidelityThresholds()
    base = base or EncoderConfig()
    if not signals:
        raise ParameterError("need at least one signal")
    pairs = grid.pairs()
    if not pairs:
        raise ParameterError("grid has no pair with k_fast < k_slow")
    table = [evaluate_pair(signals, ks, kf, base, thr, fs) for ks, kf in pairs]
    table.sort(key=lambda p: (p.k_slow, p.k_fast))
    return SweepResult(select(table), table)


def write_sweep_csv(table: Sequence[OperatingPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for p in table:
            w.writerow(
                [repr(p.k_slow), repr(p.k_fast), repr(p.snr), repr(p.nmse), repr(p.corr),
                 repr(p.rho), repr(p.rho_slow), repr(p.rho_fast), int(p.feasible)]
            )


def read_sweep_csv(path) -> list[OperatingPoint]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != SWEEP_HEADER:
            raise ParameterError(f"{path}: unexpected sweep header {header}")
        out = []
        for row in r:
            v = [float(a) for a in row[:8]]
            out.append(OperatingPoint(*v, feasible=bool(int(row[8]))))
    return out
