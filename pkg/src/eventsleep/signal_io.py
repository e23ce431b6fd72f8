"""Single-channel recordings: file I/O, preprocessing, epoching, synthesis."""

from __future__ import annotations

import csv
import enum
import math
import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import signal as sps

from .exceptions import FormatError, ParameterError

NSIG_MAGIC = b"NSIG"
NSIG_VERSION = 1
EPOCH_SECONDS = 30.0
TARGET_FS = 100.0


class Stage(enum.IntEnum):
    W = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4


STAGE_NAMES = tuple(s.name for s in Stage)


@dataclass(frozen=True, eq=False)
class Recording:
    """A uniformly sampled single-channel signal in microvolts."""

    samples: np.ndarray
    fs: float
    channel: str = "EEG"
    subject_id: str = ""
    session_id: str = ""
    start_offset: float | None = None

    def __post_init__(self):
        x = np.asarray(self.samples)
        if x.ndim != 1 or x.size == 0:
            raise ParameterError("samples must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(x)):
            raise ParameterError("samples contain NaN or Inf")
        if not (self.fs > 0 and math.isfinite(self.fs)):
            raise ParameterError(f"fs must be positive, got {self.fs}")
        object.__setattr__(self, "samples", x)

    @property
    def n_samples(self) -> int:
        return int(self.samples.size)

    @property
    def duration(self) -> float:
        return self.n_samples / self.fs

    def with_samples(self, samples, fs=None) -> "Recording":
        return replace(self, samples=np.asarray(samples), fs=self.fs if fs is None else fs)


@dataclass(frozen=True, eq=False)
class EpochLabels:
    labels: np.ndarray
    epoch_duration: float = EPOCH_SECONDS

    def __post_init__(self):
        y = np.asarray(self.labels, dtype=np.int64)
        if y.ndim != 1:
            raise ParameterError("labels must be 1-D")
        if y.size and (y.min() < 0 or y.max() > 4):
            raise FormatError("stage codes must lie in 0..4")
        object.__setattr__(self, "labels", y)


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic recording.

    ``components`` holds ``(center_hz, bandwidth_hz, amplitude)`` triples.
    """

    duration: float
    components: Sequence[tuple[float, float, float]] = ()
    noise_amplitude: float = 0.0
    seed: int = 0
    fs: float = TARGET_FS
    subject_id: str = "synthetic"


# --------------------------------------------------------------------------
# NSIG container


def save_signal(rec: Recording, path) -> None:
    """Write ``rec`` as NSIG. Samples are stored as binary32."""
    Path(path).write_bytes(encode_signal(rec))


def encode_signal(rec: Recording) -> bytes:
    channel = rec.channel.encode("utf-8")
    subject = rec.subject_id.encode("utf-8")
    if len(channel) > 0xFFFF or len(subject) > 0xFFFF:
        raise ParameterError("label too long for NSIG")
    head = (
        NSIG_MAGIC
        + struct.pack("<Hd", NSIG_VERSION, float(rec.fs))
        + struct.pack("<Q", rec.n_samples)
        + struct.pack("<H", len(channel))
        + channel
        + struct.pack("<H", len(subject))
        + subject
    )
    return head + np.asarray(rec.samples, dtype="<f4").tobytes()


def load_signal(path) -> Recording:
    return decode_signal(Path(path).read_bytes())


def decode_signal(buf: bytes) -> Recording:
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(buf):
            raise FormatError(f"truncated NSIG: {what} needs {n} bytes at offset {off}")
        chunk = buf[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != NSIG_MAGIC:
        raise FormatError("bad NSIG magic at offset 0")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != NSIG_VERSION:
        raise FormatError(f"unsupported NSIG version {version} at offset 4")
    (fs,) = struct.unpack("<d", take(8, "fs"))
    if not (fs > 0 and math.isfinite(fs)):
        raise FormatError(f"invalid fs {fs} at offset 6")
    (n,) = struct.unpack("<Q", take(8, "n_samples"))
    (lc,) = struct.unpack("<H", take(2, "channel length"))
    channel = take(lc, "channel label").decode("utf-8")
    (ls,) = struct.unpack("<H", take(2, "subject length"))
    subject = take(ls, "subject id").decode("utf-8")
    data_off = off
    need = 4 * n
    have = len(buf) - data_off
    if have < need:
        raise FormatError(
            f"truncated NSIG: header declares {n} samples, payload at offset "
            f"{data_off} holds {have // 4}"
        )
    if have > need:
        raise FormatError(f"trailing bytes after sample payload at offset {data_off + need}")
    x = np.frombuffer(buf, dtype="<f4", count=n, offset=data_off)
    bad = np.flatnonzero(~np.isfinite(x))
    if bad.size:
        raise FormatError(f"non-finite sample at byte offset {data_off + 4 * int(bad[0])}")
    if n == 0:
        raise FormatError(f"empty sample payload at offset {data_off}")
    return Recording(x.astype(np.float64), fs, channel=channel, subject_id=subject)


# --------------------------------------------------------------------------
# Labels CSV


def save_labels(labels: EpochLabels, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch_index", "stage"])
        for i, s in enumerate(labels.labels):
            w.writerow([i, int(s)])


def load_labels(path) -> EpochLabels:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["epoch_index", "stage"]:
        raise FormatError(f"{path}: expected header 'epoch_index,stage'")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            idx, stage = int(row[0]), int(row[1])
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}:{lineno}: malformed row {row!r}") from exc
        if idx != len(out):
            raise FormatError(f"{path}:{lineno}: epoch_index {idx} out of sequence")
        if not 0 <= stage <= 4:
            raise FormatError(f"{path}:{lineno}: stage {stage} outside 0..4")
        out.append(stage)
    return EpochLabels(np.array(out, dtype=np.int64))


# --------------------------------------------------------------------------
# Preprocessing


_ROUNDOFF = 1e3 * np.finfo(np.float64).eps


def bandpass(rec: Recording, lo: float = 0.5, hi: float = 35.0, order: int = 4) -> Recording:
    """Zero-phase Butterworth band-pass with 1 s reflective edge padding."""
    if not (0 < lo < hi < rec.fs / 2):
        raise ParameterError(f"need 0 < lo < hi < fs/2, got lo={lo}, hi={hi}, fs={rec.fs}")
    sos = design_bandpass(rec.fs, lo, hi, order)
    padlen = min(int(round(rec.fs)), rec.n_samples - 1)
    x = rec.samples.astype(np.float64)
    y = sps.sosfiltfilt(sos, x, padtype="even", padlen=padlen)
    # a signal with no in-band content leaves only round-off proportional to its level
    if y.size and np.max(np.abs(y)) <= _ROUNDOFF * np.max(np.abs(x)):
        y = np.zeros_like(y)
    return rec.with_samples(y)


def design_bandpass(fs: float, lo: float, hi: float, order: int = 4) -> np.ndarray:
    return sps.butter(order, [lo, hi], btype="bandpass", fs=fs, output="sos")


def _rational_ratio(target_fs: float, fs: float, max_den: int = 10_000) -> Fraction:
    exact = Fraction(target_fs) / Fraction(fs)
    approx = exact.limit_denominator(max_den)
    if approx.numerator > max_den or abs(float(approx - exact)) > 1e-12 * float(exact):
        raise ParameterError(f"resampling ratio {target_fs}/{fs} is not a small rational")
    return approx


def resample_filter(up: int, down: int, taps_per_phase: int = 64, beta: float = 8.6) -> np.ndarray:
    """Kaiser-windowed sinc prototype whose polyphase branches each have unit DC gain / up."""
    n = taps_per_phase * up + 1
    cutoff = 1.0 / max(up, down)
    h = sps.firwin(n, cutoff, window=("kaiser", beta))
    for p in range(up):
        h[p::up] /= h[p::up].sum() * up
    return h


def resample(rec: Recording, target_fs: float = TARGET_FS) -> Recording:
    if not target_fs > 0:
        raise ParameterError(f"target_fs must be positive, got {target_fs}")
    if rec.fs == target_fs:
        return rec.with_samples(rec.samples.copy())
    ratio = _rational_ratio(target_fs, rec.fs)
    up, down = ratio.numerator, ratio.denominator
    h = resample_filter(up, down)
    y = sps.resample_poly(rec.samples.astype(np.float64), up, down, window=h, padtype="line")
    n_out = int(round(rec.n_samples * target_fs / rec.fs))
    if y.size < n_out:
        y = np.concatenate([y, np.full(n_out - y.size, y[-1])])
    return rec.with_samples(y[:n_out], fs=float(target_fs))


def preprocess(rec: Recording, lo=0.5, hi=35.0, target_fs=TARGET_FS) -> Recording:
    """Band-pass at the native rate, then resample."""
    return resample(bandpass(rec, lo, hi), target_fs)


class Segmentation(NamedTuple):
    epochs: np.ndarray
    dropped: int


def segment_epochs(rec: Recording, T: float = EPOCH_SECONDS) -> Segmentation:
    spe = rec.fs * T
    if abs(spe - round(spe)) > 1e-9:
        raise ParameterError(f"fs*T = {spe} is not an integer sample count")
    spe = int(round(spe))
    n_ep = rec.n_samples // spe
    used = n_ep * spe
    epochs = rec.samples[:used].reshape(n_ep, spe)
    return Segmentation(epochs, rec.n_samples - used)


# --------------------------------------------------------------------------
# Synthesis


def synth_signal(spec: SynthSpec) -> Recording:
    """Narrow-band oscillations with random phase plus white Gaussian noise.

    Each component is a sum of five sinusoids whose frequencies are drawn
    inside ``center +/- bandwidth/2``; its total power matches a sine of the
    given amplitude.
    """
    nyq = spec.fs / 2
    for f, bw, _ in spec.components:
        if f + bw / 2 >= nyq or f - bw / 2 <= 0:
            raise ParameterError(f"component {f} Hz +/- {bw / 2} outside (0, {nyq})")
    n_ep = spec.duration / EPOCH_SECONDS
    if spec.duration <= 0 or abs(n_ep - round(n_ep)) > 1e-9:
        raise ParameterError(f"duration must be a positive multiple of 30 s, got {spec.duration}")
    n = int(round(spec.duration * spec.fs))
    rng = np.random.default_rng(spec.seed)
    t = np.arange(n) / spec.fs
    x = np.zeros(n)
    n_sub = 5
    for f, bw, amp in spec.components:
        freqs = f + (rng.random(n_sub) - 0.5) * bw
        phases = rng.uniform(0, 2 * np.pi, n_sub)
        x += (amp / np.sqrt(n_sub)) * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None]).sum(0)
    if spec.noise_amplitude:
        x += spec.noise_amplitude * rng.standard_normal(n)
    return Recording(x, spec.fs, channel="synthetic", subject_id=spec.subject_id)
