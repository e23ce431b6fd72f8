"""Synthetic labelled corpora for dataset-free testing.

Each stage is a distinct mixture of narrow-band oscillations; subjects get a
small frequency and gain jitter so the task needs cross-subject generalisation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, encode_ramsdm
from .s2e import EpochBatch, build_epoch_batch, dense_epoch_batch
from .signal_io import (
    EPOCH_SECONDS,
    EpochLabels,
    Recording,
    SynthSpec,
    bandpass,
    save_labels,
    save_signal,
    synth_signal,
)

# (center Hz, bandwidth Hz, amplitude) per stage W, N1, N2, N3, REM
STAGE_RECIPES: dict[int, tuple[tuple[float, float, float], ...]] = {
    0: ((10.0, 2.0, 1.0), (22.0, 4.0, 0.5)),
    1: ((6.0, 2.0, 1.0),),
    2: ((13.0, 1.5, 0.8), (3.0, 1.0, 0.6)),
    3: ((1.5, 1.0, 2.0),),
    4: ((4.0, 2.0, 0.7), (30.0, 4.0, 0.5)),
}


def stage_sequence(n_epochs: int, rng: np.random.Generator, stay: float = 1.0) -> np.ndarray:
    """Markov stage chain; ``stay`` is the probability of keeping the previous stage."""
    y = np.empty(n_epochs, dtype=np.int64)
    y[0] = rng.integers(5)
    for i in range(1, n_epochs):
        y[i] = y[i - 1] if rng.random() < stay else rng.integers(5)
    return y


def synth_subject(
    subject: int, n_epochs: int = 20, seed: int = 0, noise: float = 0.3, fs: float = 100.0, stay: float = 1.0
):
    """Returns a ``(Recording, EpochLabels)`` pair for one synthetic subject."""
    rng = np.random.default_rng([seed, subject])
    labels = stage_sequence(n_epochs, rng, stay)
    shift = rng.uniform(-0.5, 0.5)
    gain = rng.uniform(0.7, 1.4)
    parts = []
    for e, st in enumerate(labels):
        comps = [(f + shift * min(1.0, f / 4), bw, a * gain) for f, bw, a in STAGE_RECIPES[int(st)]]
        spec = SynthSpec(EPOCH_SECONDS, comps, noise * gain, seed=int(rng.integers(2**31)), fs=fs)
        parts.append(synth_signal(spec).samples)
    rec = Recording(np.concatenate(parts), fs, channel="synthetic", subject_id=f"S{subject:03d}")
    return rec, EpochLabels(labels)


@dataclass(frozen=True, eq=False)
class LabeledSequence:
    subject_id: str
    batch: EpochBatch
    labels: np.ndarray


def encode_recording(rec: Recording, enc: EncoderConfig | None = None, dense_input: bool = False) -> EpochBatch:
    x = bandpass(rec).samples
    if dense_input:
        return dense_epoch_batch(x, rec.fs)
    return build_epoch_batch(encode_ramsdm(x, enc or EncoderConfig(), rec.fs))


def synth_corpus(
    n_subjects: int = 200,
    n_epochs: int = 20,
    seed: int = 0,
    enc: EncoderConfig | None = None,
    dense_input: bool = False,
    stay: float = 1.0,
) -> list[LabeledSequence]:
    out = []
    for s in range(n_subjects):
        rec, lab = synth_subject(s, n_epochs, seed, stay=stay)
        out.append(LabeledSequence(rec.subject_id, encode_recording(rec, enc, dense_input), lab.labels))
    return out


def write_corpus(
    directory, n_subjects: int, n_epochs: int = 20, seed: int = 0, stay: float = 1.0
) -> list[tuple[Path, Path]]:
    """Writes ``<subject>.nsig`` + ``<subject>.labels.csv`` pairs and a manifest CSV."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    pairs = []
    for s in range(n_subjects):
        rec, lab = synth_subject(s, n_epochs, seed, stay=stay)
        sig = d / f"{rec.subject_id}.nsig"
        lbl = d / f"{rec.subject_id}.labels.csv"
        save_signal(rec, sig)
        save_labels(lab, lbl)
        pairs.append((sig, lbl))
    with open(d / "manifest.csv", "w") as fh:
        fh.write("subject_id,signal,labels\n")
        for sig, lbl in pairs:
            fh.write(f"{sig.stem},{sig.name},{lbl.name}\n")
    return pairs


# delta-dominated background with theta, alpha and sigma activity
EEG_LIKE_COMPONENTS = ((1.0, 1.0, 2.0), (5.0, 2.0, 0.8), (10.0, 2.0, 0.5), (13.0, 1.0, 0.3))


def eeg_like_signals(n: int = 8, duration: float = 60.0, seed: int = 0, noise: float = 0.05) -> list[np.ndarray]:
    """Band-passed unlabelled signals for operating-point sweeps."""
    out = []
    for i in range(n):
        rec = synth_signal(SynthSpec(duration, list(EEG_LIKE_COMPONENTS), noise, seed=seed * 1000 + i))
        out.append(bandpass(rec).samples)
    return out
