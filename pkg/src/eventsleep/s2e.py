"""Signal-to-event orchestration: epoch assignment, anchors, validity mask, rasters."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .encoder import EventArray, MultiScaleEventStream
from .exceptions import FormatError, ParameterError

DEFAULT_TAU = 0.1
# slack so that an anchor gap written as T + tau in decimal still counts as inside the tolerance
_TAU_SLACK = 1e-9


class EpochGroup(NamedTuple):
    """Events of one epoch; offsets are sample positions inside the epoch."""

    offset: np.ndarray
    polarity: np.ndarray
    scale: np.ndarray


@dataclass(frozen=True, eq=False)
class EpochBatch:
    rasters: np.ndarray  # (n_epochs, 2, T_b), int8 ternary or float for dense input
    anchors: np.ndarray  # seconds
    mask: np.ndarray  # uint8
    epoch_indices: np.ndarray
    T_b: int
    epoch_seconds: float = 30.0

    def __len__(self):
        return int(self.rasters.shape[0])

    def subset(self, keep: Sequence[int], tau: float = DEFAULT_TAU) -> "EpochBatch":
        """Keep the given positions; the mask is recomputed so removed epochs leave gaps."""
        keep = np.asarray(keep, dtype=np.int64)
        anchors = self.anchors[keep]
        return EpochBatch(
            self.rasters[keep],
            anchors,
            validity_mask(anchors, self.epoch_seconds, tau),
            self.epoch_indices[keep],
            self.T_b,
            self.epoch_seconds,
        )


def _samples_per_epoch(fs: float, T: float) -> int:
    spe = fs * T
    if abs(spe - round(spe)) > 1e-9:
        raise ParameterError(f"fs*T = {spe} is not an integer")
    return int(round(spe))


class Assignment(NamedTuple):
    groups: list[EpochGroup]
    anchors: np.ndarray
    dropped_events: int


def epoch_index(t_seconds, T: float = 30.0):
    return np.floor(np.asarray(t_seconds, dtype=np.float64) / T).astype(np.int64)


def anchor(e, T: float = 30.0):
    return (np.asarray(e, dtype=np.float64) + 0.5) * T


def assign_epochs(stream: MultiScaleEventStream, T: float = 30.0) -> Assignment:
    """Group events by ``floor(t_n / T)`` over the whole epochs the stream spans."""
    spe = _samples_per_epoch(stream.fs, T)
    n_ep = stream.length // spe
    idx = np.concatenate([stream.slow.index, stream.fast.index])
    pol = np.concatenate([stream.slow.polarity, stream.fast.polarity])
    sc = np.concatenate(
        [np.zeros(len(stream.slow), np.int8), np.ones(len(stream.fast), np.int8)]
    )
    # integer floor of n / spe equals floor(t_n / T) without float rounding at boundaries
    e = idx // spe
    groups = []
    order = np.argsort(e, kind="stable")
    e_sorted = e[order]
    bounds = np.searchsorted(e_sorted, np.arange(n_ep + 1))
    for k in range(n_ep):
        sel = order[bounds[k] : bounds[k + 1]]
        groups.append(EpochGroup(idx[sel] - k * spe, pol[sel], sc[sel]))
    dropped = int(idx.size - bounds[n_ep])
    return Assignment(groups, anchor(np.arange(n_ep), T), dropped)


def validity_mask(anchors, T: float = 30.0, tau: float = DEFAULT_TAU) -> np.ndarray:
    a = np.asarray(anchors, dtype=np.float64)
    m = np.ones(a.size, dtype=np.uint8)
    if a.size > 1:
        m[1:] = np.abs(np.diff(a) - T) <= tau + _TAU_SLACK
    return m


def rasterize(group: EpochGroup, T_b: int) -> np.ndarray:
    S = np.zeros((2, T_b), dtype=np.int8)
    if group.offset.size == 0:
        return S
    if group.offset.min() < 0 or group.offset.max() >= T_b:
        raise FormatError(f"event offset outside [0, {T_b})")
    flat = group.scale.astype(np.int64) * T_b + group.offset
    if np.unique(flat).size != flat.size:
        raise FormatError("two events share one (scale, offset) slot")
    S[group.scale, group.offset] = group.polarity
    return S


def extract_events(S: np.ndarray) -> EpochGroup:
    scale, offset = np.nonzero(S)
    order = np.lexsort((scale, offset))
    return EpochGroup(offset[order], S[scale, offset][order].astype(np.int8), scale[order].astype(np.int8))


def build_epoch_batch(stream: MultiScaleEventStream, T: float = 30.0, tau: float = DEFAULT_TAU) -> EpochBatch:
    asg = assign_epochs(stream, T)
    T_b = _samples_per_epoch(stream.fs, T)
    rasters = np.stack([rasterize(g, T_b) for g in asg.groups]) if asg.groups else np.zeros((0, 2, T_b), np.int8)
    return EpochBatch(
        rasters, asg.anchors, validity_mask(asg.anchors, T, tau), np.arange(len(asg.groups)), T_b, T
    )


def dense_epoch_batch(x, fs: float = 100.0, T: float = 30.0, tau: float = DEFAULT_TAU) -> EpochBatch:
    """Dense-input variant: both raster rows carry the per-epoch z-scored signal."""
    T_b = _samples_per_epoch(fs, T)
    x = np.asarray(x, dtype=np.float64)
    n_ep = x.size // T_b
    ep = x[: n_ep * T_b].reshape(n_ep, T_b)
    sd = ep.std(axis=1, keepdims=True)
    z = (ep - ep.mean(axis=1, keepdims=True)) / np.where(sd > 0, sd, 1.0)
    rasters = np.repeat(z[:, None, :], 2, axis=1)
    anchors = anchor(np.arange(n_ep), T)
    return EpochBatch(rasters, anchors, validity_mask(anchors, T, tau), np.arange(n_ep), T_b, T)


def context_windows(n_epochs: int, L: int) -> np.ndarray:
    """Positions of the ``2L + 1`` slots centred on each epoch; -1 marks a missing slot."""
    off = np.arange(-L, L + 1)
    pos = np.arange(n_epochs)[:, None] + off[None, :]
    pos[(pos < 0) | (pos >= n_epochs)] = -1
    return pos


def window_validity(mask: np.ndarray, positions: np.ndarray) -> np.ndarray:
    return np.where(positions >= 0, np.asarray(mask)[np.maximum(positions, 0)], 0).astype(np.uint8)


def raster_density(batch: EpochBatch) -> np.ndarray:
    """Fraction of nonzero raster entries per epoch."""
    if len(batch) == 0:
        return np.zeros(0)
    return np.count_nonzero(batch.rasters, axis=(1, 2)) / (2 * batch.T_b)


MANIFEST_HEADER = ["epoch_index", "anchor_s", "mask", "n_events_slow", "n_events_fast"]


def write_manifest(batch: EpochBatch, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for i in range(len(batch)):
            S = batch.rasters[i]
            w.writerow(
                [int(batch.epoch_indices[i]), repr(float(batch.anchors[i])), int(batch.mask[i]),
                 int(np.count_nonzero(S[0])), int(np.count_nonzero(S[1]))]
            )
