"""Analytic FLOPs accounting, sparsity-adjusted effective ops, inSD, spike rate and latency.

Counting conventions: a multiply-accumulate is 2 FLOPs, every element through a
nonlinearity, batch norm or softmax costs 4 FLOPs, and plain elementwise adds or
scalings cost 1. Counts are per classified epoch: the epoch's own encoding
(each epoch is encoded once and shared by the windows that contain it) plus one
full context window through attention, state and head.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import network as net
from .exceptions import ParameterError, UndefinedMetricError
from .network import ModelConfig, ModelParams
from .s2e import EpochBatch, context_windows, window_validity

STAGES = ("eamr_branches", "fusion", "gate", "tokenizer", "ltam", "elif", "classifier")
DEFAULT_SPARSE = frozenset(("eamr_branches", "fusion", "gate", "tokenizer"))
NONLIN = 4

REPORT_HEADER = [
    "profile", "params", "flops_total", "flops_sparse", "flops_dense", "insd",
    "effective_ops", "spike_rate", "latency_ms_median", "latency_ms_p90",
]


@dataclass(frozen=True)
class OpsBreakdown:
    stages: dict[str, int]
    params: int
    sparse_set: frozenset = DEFAULT_SPARSE
    insd: float = float("nan")
    spike_rate: float | None = None

    def __post_init__(self):
        unknown = set(self.sparse_set) - set(self.stages)
        if unknown:
            raise ParameterError(f"sparse_set names unknown stages {sorted(unknown)}")

    @property
    def total_flops(self) -> int:
        return sum(self.stages.values())

    @property
    def sparse_flops(self) -> int:
        return sum(v for k, v in self.stages.items() if k in self.sparse_set)

    @property
    def dense_flops(self) -> int:
        return self.total_flops - self.sparse_flops

    @property
    def effective_ops(self) -> float:
        return effective_ops(self, self.insd)


# --------------------------------------------------------------------------
# primitive counts


def dwconv_flops(T: int, c_in: int, k: int) -> int:
    return 2 * T * c_in * k


def pwconv_flops(T: int, c_in: int, c_out: int) -> int:
    return 2 * T * c_in * c_out


def linear_flops(fan_in: int, fan_out: int) -> int:
    return 2 * fan_in * fan_out


def visible_counts(N: int, L: int, valid=None) -> np.ndarray:
    """Number of visible keys per attention row."""
    valid = np.ones(N, np.uint8) if valid is None else np.asarray(valid)
    return _vis_rows(valid[None], L)[0]


def _vis_rows(valid: np.ndarray, L: int) -> np.ndarray:
    return net._attention_masks(valid, L).sum(axis=2)


def attention_flops(C: int, d: int, vis: np.ndarray) -> int:
    N = vis.size
    nv = int(np.sum(vis))
    proj = 3 * N * linear_flops(C, d) + N * linear_flops(d, C)
    return proj + 2 * d * nv + 2 * d * nv + NONLIN * nv + N * C


def count_flops(cfg: ModelConfig) -> OpsBreakdown:
    """Per-stage FLOPs for one classified epoch; a pure function of the config."""
    T, C, d = cfg.T_b, cfg.fused_width, cfg.attn_dim
    branches = 0
    for k, w in cfg.branches:
        branches += dwconv_flops(T, 4, k) + pwconv_flops(T, 4, w) + 2 * NONLIN * T * w  # BN + GELU
    fusion = pwconv_flops(T, cfg.concat_width, C) + T * C  # bias add
    Cr = cfg.gate_hidden
    gate = T * C + linear_flops(C, Cr) + NONLIN * Cr + linear_flops(Cr, C) + NONLIN * C + T * C
    if cfg.pooling == "attention":
        tokenizer = pwconv_flops(T, C, C) + NONLIN * T * C + 2 * T * C + NONLIN * T + 2 * T * C
    else:
        tokenizer = 2 * T * C
    N = cfg.window_size
    ltam = attention_flops(C, d, visible_counts(N, cfg.window_radius))
    elif_ = 0 if cfg.no_elif else 2 * C * (cfg.window_radius + 1) + C
    head = linear_flops(C, cfg.n_classes)
    stages = dict(zip(STAGES, (branches, fusion, gate, tokenizer, ltam, elif_, head)))
    return OpsBreakdown({k: int(v) for k, v in stages.items()}, net.param_count(cfg))


def effective_ops(breakdown: OpsBreakdown, insd: float) -> float:
    """``sparse * insd + dense``."""
    if not 0.0 <= insd <= 1.0 or math.isnan(insd):
        raise ParameterError(f"insd must lie in [0, 1], got {insd}")
    return breakdown.sparse_flops * insd + breakdown.dense_flops


def effective_from_totals(flops_sparse: float, flops_dense: float, insd: float) -> float:
    if not 0.0 <= insd <= 1.0:
        raise ParameterError(f"insd must lie in [0, 1], got {insd}")
    return flops_sparse * insd + flops_dense


# --------------------------------------------------------------------------
# measured quantities


def measure_insd(batch: EpochBatch, dense_input: bool = False) -> float:
    """Mean nonzero fraction over the rasters of valid epochs; 1.0 for dense input."""
    valid = np.asarray(batch.mask).astype(bool)
    if len(batch) == 0 or not valid.any():
        raise UndefinedMetricError("inSD needs at least one valid epoch")
    if dense_input:
        return 1.0
    R = batch.rasters[valid]
    return float(np.mean(np.count_nonzero(R, axis=(1, 2)) / (2 * batch.T_b)))


def measure_spike_rate(params: ModelParams, cfg: ModelConfig, batches: Sequence[EpochBatch]) -> float | None:
    """Threshold detector on the raw state |h| of every valid scanned slot; None without the state module."""
    if cfg.no_elif:
        return None
    hs = []
    for batch in batches:
        n = len(batch)
        if n == 0:
            continue
        tokens = net.encode_epochs(batch.rasters, params, cfg, "eval", chunk=64)
        pos = context_windows(n, cfg.window_radius)
        valid = window_validity(batch.mask, pos)
        U = net.gather_windows(tokens, pos)
        center = cfg.window_radius
        Z, _ = net._ltam(U, net._attention_masks(valid, cfg.window_radius), params)
        _, _, states = net._elif_scan(Z, valid, center, cfg.leak, keep_states=True)
        for i, (h, cnt) in enumerate(states):
            live = cnt > 0
            if live.any():
                hs.append(h[live])
    if not hs:
        raise UndefinedMetricError("spike rate needs at least one valid epoch")
    return net.spike_stats(np.concatenate(hs), cfg.fire_threshold)


@dataclass(frozen=True)
class Latency:
    median_ms: float
    p90_ms: float
    samples_ms: tuple[float, ...] = field(repr=False, default=())


def bench_latency(params: ModelParams, cfg: ModelConfig, n_samples: int = 100, warmup: int = 3, seed: int = 0) -> Latency:
    """Wall-clock ms per classified window through ``network.forward`` in eval mode, one BLAS thread."""
    if n_samples < 10 or warmup < 1:
        raise ParameterError("need n_samples >= 10 and warmup >= 1")
    rng = np.random.default_rng(seed)
    N = cfg.window_size
    if cfg.dense_input:
        rasters = rng.standard_normal((N, 2, cfg.T_b))
    else:
        rasters = rng.choice(np.array([-1, 0, 0, 0, 0, 0, 0, 1], np.int8), size=(N, 2, cfg.T_b))
    win = net.Window(rasters, np.ones(N, np.uint8))
    times = []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            net.forward(win, params, cfg)
        for _ in range(n_samples):
            t0 = time.perf_counter()
            net.forward(win, params, cfg)
            times.append((time.perf_counter() - t0) * 1e3)
    a = np.asarray(times)
    return Latency(float(np.median(a)), float(np.percentile(a, 90)), tuple(times))


# --------------------------------------------------------------------------
# report


@dataclass(frozen=True)
class OpsReport:
    profile: str
    breakdown: OpsBreakdown
    insd: float
    effective_ops: float
    spike_rate: float | None
    latency: Latency | None

    def row(self) -> list[str]:
        b = self.breakdown
        lat = self.latency
        return [
            self.profile,
            str(b.params),
            str(b.total_flops),
            str(b.sparse_flops),
            str(b.dense_flops),
            repr(self.insd),
            repr(self.effective_ops),
            "NA" if self.spike_rate is None else repr(self.spike_rate),
            "NA" if lat is None else repr(lat.median_ms),
            "NA" if lat is None else repr(lat.p90_ms),
        ]


def ops_report(
    params: ModelParams,
    cfg: ModelConfig,
    batches: Sequence[EpochBatch],
    latency: Latency | None = None,
    sparse_set: frozenset | None = None,
) -> OpsReport:
    """Table-style efficiency summary; inSD is averaged over all valid epochs of ``batches``."""
    b = count_flops(cfg)
    if sparse_set is not None:
        b = OpsBreakdown(b.stages, b.params, frozenset(sparse_set))
    if cfg.dense_input:
        insd = 1.0
    else:
        num, den = 0, 0
        for batch in batches:
            v = np.asarray(batch.mask).astype(bool)
            num += int(np.count_nonzero(batch.rasters[v]))
            den += int(v.sum()) * 2 * batch.T_b
        if den == 0:
            raise UndefinedMetricError("inSD needs at least one valid epoch")
        insd = num / den
    spike = measure_spike_rate(params, cfg, batches)
    b = OpsBreakdown(b.stages, b.params, b.sparse_set, insd, spike)
    return OpsReport(cfg.profile, b, insd, effective_ops(b, insd), spike, latency)


def write_ops_report(reports: Sequence[OpsReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in reports:
            w.writerow(r.row())


def read_ops_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and list(rows[0]) != REPORT_HEADER:
        raise ParameterError(f"{path}: unexpected ops report header")
    return rows
