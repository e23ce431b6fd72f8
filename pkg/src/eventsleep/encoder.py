"""Residual two-scale adaptive delta modulation and its exact decoder.

The slow scale tracks the signal with a coarse adaptive step; the fast scale
tracks what the slow reference leaves unexplained. Step sizes are rounded to
binary32 before they enter the loop, so a decoder reading them back from an
event file replays the reference series bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .exceptions import FormatError, ParameterError

NEVT_MAGIC = b"NEVT"
NEVT_VERSION = 1
SLOW, FAST = 0, 1
SCALE_NAMES = ("slow", "fast")


@dataclass(frozen=True)
class EncoderConfig:
    k_slow: float = 1.6
    k_fast: float = 1.0
    sigma_window: int = 100
    sigma_floor: float | None = None  # None: 1e-3 x global std of the input
    r_init_policy: str = "first_sample"
    fast_sigma_source: str = "signal"  # "residual" thresholds the fast scale on sigma of e(t)

    def __post_init__(self):
        if not (self.k_slow > 0 and self.k_fast > 0):
            raise ParameterError("k_slow and k_fast must be positive")
        if not self.k_fast < self.k_slow:
            raise ParameterError(f"need k_fast < k_slow, got {self.k_fast} >= {self.k_slow}")
        if int(self.sigma_window) != self.sigma_window or self.sigma_window < 2:
            raise ParameterError("sigma_window must be an integer >= 2")
        if self.sigma_floor is not None and not self.sigma_floor > 0:
            raise ParameterError("sigma_floor must be positive")
        if self.r_init_policy not in ("first_sample", "zero"):
            raise ParameterError(f"unknown r_init_policy {self.r_init_policy!r}")
        if self.fast_sigma_source not in ("signal", "residual"):
            raise ParameterError(f"unknown fast_sigma_source {self.fast_sigma_source!r}")

    def resolve_floor(self, x: np.ndarray) -> float:
        if self.sigma_floor is not None:
            return float(self.sigma_floor)
        sd = float(np.std(x))
        if sd > 0:
            return 1e-3 * sd
        # flat input: any positive floor works, keep it relative to the level
        return 1e-3 * max(abs(float(x[0])) if x.size else 0.0, 1.0)


@dataclass(frozen=True)
class Event:
    sample_index: int
    polarity: int
    step_size: float
    scale: str


@dataclass(frozen=True, eq=False)
class EventArray:
    """Events of one scale in columnar form, ordered by sample index."""

    index: np.ndarray
    polarity: np.ndarray
    step: np.ndarray

    @classmethod
    def empty(cls) -> "EventArray":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int8), np.zeros(0, np.float64))

    def __len__(self):
        return int(self.index.size)

    def to_events(self, scale: str) -> list[Event]:
        return [
            Event(int(i), int(p), float(s), scale)
            for i, p, s in zip(self.index, self.polarity, self.step)
        ]

    def dense(self, length: int) -> np.ndarray:
        s = np.zeros(length, dtype=np.int8)
        s[self.index] = self.polarity
        return s


@dataclass(frozen=True, eq=False)
class MultiScaleEventStream:
    slow: EventArray
    fast: EventArray
    length: int
    fs: float
    r0_slow: float
    r_slow: np.ndarray | None = None
    r_fast: np.ndarray | None = None

    @property
    def slow_events(self) -> list[Event]:
        return self.slow.to_events("slow")

    @property
    def fast_events(self) -> list[Event]:
        return self.fast.to_events("fast")

    @property
    def n_events(self) -> int:
        return len(self.slow) + len(self.fast)

    def s_slow(self) -> np.ndarray:
        return self.slow.dense(self.length)

    def s_fast(self) -> np.ndarray:
        return self.fast.dense(self.length)

    def raster(self) -> np.ndarray:
        """Ternary 2 x T view, rows (slow, fast)."""
        return np.stack([self.s_slow(), self.s_fast()])

    def references(self) -> tuple[np.ndarray, np.ndarray]:
        if self.r_slow is not None and self.r_fast is not None:
            return self.r_slow, self.r_fast
        return decode(self, self.r0_slow)


def local_sigma(x, W: int = 100, floor: float = 1e-6) -> np.ndarray:
    """Population std over the causal window ``[max(0, t-W+1), t]``, clamped below by ``floor``."""
    if W < 2:
        raise ParameterError("W must be >= 2")
    if not floor > 0:
        raise ParameterError("floor must be positive")
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n == 0:
        return np.zeros(0)
    xc = x - x.mean()
    c1 = np.concatenate([[0.0], np.cumsum(xc)])
    c2 = np.concatenate([[0.0], np.cumsum(xc * xc)])
    t = np.arange(n)
    lo = np.maximum(0, t - W + 1)
    cnt = (t + 1 - lo).astype(np.float64)
    mean = (c1[t + 1] - c1[lo]) / cnt
    var = (c2[t + 1] - c2[lo]) / cnt - mean * mean
    sd = np.sqrt(np.maximum(var, 0.0))
    sd[0] = 0.0
    return np.maximum(sd, floor)


class DeltaResult(NamedTuple):
    events: EventArray
    r: np.ndarray


def delta_modulate(x, theta, r0: float) -> DeltaResult:
    """Closed-loop delta modulation with a per-sample threshold.

    At most one event fires per step; ``r`` has ``len(x) + 1`` entries.
    """
    x = np.asarray(x, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if x.shape != theta.shape or x.ndim != 1:
        raise ParameterError("x and theta must be 1-D and of equal length")
    if theta.size and not np.all(theta > 0):
        bad = int(np.flatnonzero(~(theta > 0))[0])
        raise ParameterError(f"theta must be positive, theta[{bad}] = {theta[bad]}")
    n = x.size
    r = [0.0] * (n + 1)
    ref = float(r0)
    r[0] = ref
    idx, pol, stp = [], [], []
    xs = x.tolist()
    ths = theta.tolist()
    for t in range(n):
        d = xs[t] - ref
        th = ths[t]
        if d >= th:
            ref = ref + th
            idx.append(t)
            pol.append(1)
            stp.append(th)
        elif d <= -th:
            ref = ref - th
            idx.append(t)
            pol.append(-1)
            stp.append(th)
        r[t + 1] = ref
    ev = EventArray(
        np.array(idx, dtype=np.int64), np.array(pol, dtype=np.int8), np.array(stp, dtype=np.float64)
    )
    return DeltaResult(ev, np.array(r))


def _as_f32(a) -> np.ndarray:
    """Round step sizes to binary32 (what NEVT stores), kept strictly positive and finite."""
    f = np.finfo(np.float32)
    return np.clip(np.asarray(a, dtype=np.float32), f.tiny, f.max).astype(np.float64)


def encode_ramsdm(x, cfg: EncoderConfig | None = None, fs: float = 100.0) -> MultiScaleEventStream:
    cfg = cfg or EncoderConfig()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ParameterError("x must be a non-empty 1-D series")
    if not np.all(np.isfinite(x)):
        raise ParameterError("x contains NaN or Inf")
    floor = cfg.resolve_floor(x)
    sigma = local_sigma(x, cfg.sigma_window, floor)
    r0 = float(np.float32(x[0])) if cfg.r_init_policy == "first_sample" else 0.0
    slow = delta_modulate(x, _as_f32(cfg.k_slow * sigma), r0)
    e = x - slow.r[:-1]
    if cfg.fast_sigma_source == "residual":
        sigma = local_sigma(e, cfg.sigma_window, floor)
    fast = delta_modulate(e, _as_f32(cfg.k_fast * sigma), 0.0)
    return MultiScaleEventStream(slow.events, fast.events, x.size, fs, r0, slow.r, fast.r)


def _replay(ev: EventArray, length: int, r0: float, scale: str) -> np.ndarray:
    if len(ev):
        if np.any(np.diff(ev.index) <= 0):
            raise FormatError(f"{scale} events are not strictly increasing in time")
        if ev.index[0] < 0 or ev.index[-1] >= length:
            raise FormatError(f"{scale} event index outside [0, {length})")
    inc = np.zeros(length + 1)
    inc[0] = r0
    inc[ev.index + 1] = ev.polarity.astype(np.float64) * ev.step
    # cumsum accumulates left to right, matching the encoder's running sum exactly
    return np.cumsum(inc)


def decode(stream: MultiScaleEventStream, r0_slow: float | None = None):
    """Replay both scales; returns ``(r_slow, r_fast)`` of length ``T + 1``."""
    r0 = stream.r0_slow if r0_slow is None else float(r0_slow)
    return (
        _replay(stream.slow, stream.length, r0, "slow"),
        _replay(stream.fast, stream.length, 0.0, "fast"),
    )


def reconstruct(stream: MultiScaleEventStream) -> np.ndarray:
    """Sum of the pre-update slow and fast references at every step."""
    r_slow, r_fast = stream.references()
    if r_slow.size != r_fast.size or r_slow.size != stream.length + 1:
        raise RuntimeError("reference series lengths disagree with stream length")
    return r_slow[:-1] + r_fast[:-1]


class Density(NamedTuple):
    combined: float
    slow: float
    fast: float


def event_density(stream: MultiScaleEventStream) -> Density:
    T = stream.length
    if T <= 0:
        raise ParameterError("stream length must be positive")
    ns, nf = len(stream.slow), len(stream.fast)
    return Density((ns + nf) / (2 * T), ns / T, nf / T)


# --------------------------------------------------------------------------
# NEVT container

_REC = np.dtype([("index", "<u8"), ("scale", "u1"), ("polarity", "i1"), ("step", "<f4")])


def encode_events(stream: MultiScaleEventStream) -> bytes:
    n = stream.n_events
    rec = np.zeros(n, dtype=_REC)
    idx = np.concatenate([stream.slow.index, stream.fast.index])
    scale = np.concatenate([np.zeros(len(stream.slow), np.uint8), np.ones(len(stream.fast), np.uint8)])
    order = np.lexsort((scale, idx))
    rec["index"] = idx[order]
    rec["scale"] = scale[order]
    rec["polarity"] = np.concatenate([stream.slow.polarity, stream.fast.polarity])[order]
    rec["step"] = np.concatenate([stream.slow.step, stream.fast.step])[order]
    head = NEVT_MAGIC + struct.pack(
        "<HdQfQ", NEVT_VERSION, float(stream.fs), int(stream.length), stream.r0_slow, n
    )
    return head + rec.tobytes()


def decode_events(buf: bytes) -> MultiScaleEventStream:
    hsize = 4 + struct.calcsize("<HdQfQ")
    if len(buf) < hsize:
        raise FormatError(f"truncated NEVT header: {len(buf)} bytes, need {hsize}")
    if buf[:4] != NEVT_MAGIC:
        raise FormatError("bad NEVT magic at offset 0")
    version, fs, length, r0, n = struct.unpack("<HdQfQ", buf[4:hsize])
    if version != NEVT_VERSION:
        raise FormatError(f"unsupported NEVT version {version} at offset 4")
    need = n * _REC.itemsize
    if len(buf) - hsize != need:
        raise FormatError(
            f"NEVT payload at offset {hsize} has {len(buf) - hsize} bytes, header implies {need}"
        )
    rec = np.frombuffer(buf, dtype=_REC, count=n, offset=hsize)
    if np.any(rec["scale"] > 1):
        raise FormatError("NEVT scale byte must be 0 or 1")
    if np.any(np.abs(rec["polarity"]) != 1):
        raise FormatError("NEVT polarity must be +1 or -1")
    if np.any(~(rec["step"] > 0)):
        raise FormatError("NEVT step sizes must be positive")
    parts = []
    for sc in (SLOW, FAST):
        sel = rec[rec["scale"] == sc]
        parts.append(
            EventArray(
                sel["index"].astype(np.int64),
                sel["polarity"].astype(np.int8),
                sel["step"].astype(np.float64),
            )
        )
    stream = MultiScaleEventStream(parts[0], parts[1], int(length), fs, float(r0))
    r_slow, r_fast = decode(stream)  # validates ordering and range
    return MultiScaleEventStream(parts[0], parts[1], int(length), fs, float(r0), r_slow, r_fast)


def save_events(stream: MultiScaleEventStream, path) -> None:
    Path(path).write_bytes(encode_events(stream))


def load_events(path) -> MultiScaleEventStream:
    return decode_events(Path(path).read_bytes())
