import numpy as np
import pytest
import scipy.signal as sps
from hypothesis import given, settings, strategies as st

from eventsleep.exceptions import FormatError, ParameterError
from eventsleep.signal_io import (
    EpochLabels,
    Recording,
    Stage,
    SynthSpec,
    bandpass,
    decode_signal,
    design_bandpass,
    encode_signal,
    load_labels,
    load_signal,
    preprocess,
    resample,
    save_labels,
    save_signal,
    segment_epochs,
    synth_signal,
)


def _rec(x, fs=100.0, **kw):
    return Recording(np.asarray(x, dtype=np.float64), fs, **kw)


# ---------------------------------------------------------------- NSIG


def test_nsig_round_trip(tmp_path):
    x = np.random.default_rng(0).standard_normal(3000).astype(np.float32).astype(np.float64)
    rec = _rec(x, channel="Fpz-Cz", subject_id="SC4001")
    path = tmp_path / "a.nsig"
    save_signal(rec, path)
    back = load_signal(path)
    assert back.n_samples == 3000 and back.fs == 100.0
    assert back.channel == "Fpz-Cz" and back.subject_id == "SC4001"
    assert np.array_equal(back.samples, x)
    save_signal(back, tmp_path / "b.nsig")
    assert (tmp_path / "b.nsig").read_bytes() == path.read_bytes()


def test_nsig_header_layout():
    buf = encode_signal(_rec([1.0, 2.0], channel="C", subject_id="S1"))
    assert buf[:4] == b"NSIG"
    assert buf[4:6] == (1).to_bytes(2, "little")
    assert np.frombuffer(buf[6:14], "<f8")[0] == 100.0
    assert int.from_bytes(buf[14:22], "little") == 2
    assert len(buf) == 4 + 2 + 8 + 8 + 2 + 1 + 2 + 2 + 8


def test_nsig_bad_magic():
    buf = bytearray(encode_signal(_rec(np.ones(3000))))
    buf[:4] = b"XSIG"
    with pytest.raises(FormatError, match="magic"):
        decode_signal(bytes(buf))


def test_nsig_truncated_payload():
    buf = encode_signal(_rec(np.ones(3000)))
    with pytest.raises(FormatError, match="3000 samples.*2999"):
        decode_signal(buf[:-4])


def test_nsig_truncated_header_names_offset():
    buf = encode_signal(_rec(np.ones(10)))
    with pytest.raises(FormatError, match="offset 6"):
        decode_signal(buf[:9])


def test_nsig_nonfinite_sample_names_offset():
    buf = bytearray(encode_signal(_rec(np.ones(4), channel="", subject_id="")))
    data_off = len(buf) - 16
    buf[data_off + 8 : data_off + 12] = np.array([np.nan], "<f4").tobytes()
    with pytest.raises(FormatError, match=f"offset {data_off + 8}"):
        decode_signal(bytes(buf))


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(-1e6, 1e6, allow_nan=False, width=32), min_size=1, max_size=200),
    st.text(max_size=10),
)
def test_nsig_round_trip_fuzz(xs, label):
    rec = _rec(xs, channel=label)
    buf = encode_signal(rec)
    back = decode_signal(buf)
    assert encode_signal(back) == buf


def test_recording_rejects_nan():
    with pytest.raises(ParameterError):
        _rec([0.0, np.nan])


# ---------------------------------------------------------------- labels


def test_labels_round_trip(tmp_path):
    lab = EpochLabels(np.array([0, 1, 2, 3, 4, 2]))
    save_labels(lab, tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "epoch_index,stage"
    assert np.array_equal(load_labels(tmp_path / "l.csv").labels, lab.labels)


def test_labels_reject_out_of_range(tmp_path):
    (tmp_path / "l.csv").write_text("epoch_index,stage\n0,5\n")
    with pytest.raises(FormatError):
        load_labels(tmp_path / "l.csv")


def test_stage_codes():
    assert [s.name for s in Stage] == ["W", "N1", "N2", "N3", "REM"]
    assert [int(s) for s in Stage] == [0, 1, 2, 3, 4]


# ---------------------------------------------------------------- bandpass


def test_bandpass_rejects_dc():
    y = bandpass(_rec(np.full(3000, 5.0))).samples
    assert np.max(np.abs(y[200:])) < 1e-6 * 5.0


def _steady_amplitude(f, fs=100.0, n=6000):
    t = np.arange(n) / fs
    y = bandpass(_rec(np.sin(2 * np.pi * f * t), fs)).samples
    mid = y[1000:-1000]
    return np.sqrt(2 * np.mean(mid**2))


def test_bandpass_passband_matches_design():
    sos = design_bandpass(100.0, 0.5, 35.0)
    _, h = sps.sosfreqz(sos, worN=[10.0], fs=100.0)
    expected = abs(h[0]) ** 2  # forward-backward squares the magnitude
    amp = _steady_amplitude(10.0)
    assert abs(20 * np.log10(amp)) < 1.0
    assert amp == pytest.approx(expected, rel=1e-3)


def test_bandpass_stopband():
    assert _steady_amplitude(45.0) < 0.1


def test_bandpass_length_and_ordering():
    x = np.random.default_rng(1).standard_normal(777)
    assert bandpass(_rec(x)).n_samples == 777
    with pytest.raises(ParameterError):
        bandpass(_rec(x), lo=10, hi=5)
    with pytest.raises(ParameterError):
        bandpass(_rec(x), lo=1, hi=60)


def test_bandpass_linear():
    r = np.random.default_rng(2)
    x, y = r.standard_normal(4000), r.standard_normal(4000)
    lhs = bandpass(_rec(2.5 * x - 0.7 * y)).samples
    rhs = 2.5 * bandpass(_rec(x)).samples - 0.7 * bandpass(_rec(y)).samples
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * np.max(np.abs(rhs))


# ---------------------------------------------------------------- resample


def test_resample_identity_bit_exact():
    x = np.random.default_rng(3).standard_normal(500)
    assert np.array_equal(resample(_rec(x)).samples, x)


def test_resample_dc():
    y = resample(_rec(np.full(256, 3.0), fs=128.0))
    assert y.n_samples == 200 and y.fs == 100.0
    assert np.max(np.abs(y.samples - 3.0)) < 1e-6


def test_resample_sine_downsample():
    t = np.arange(2000) / 200.0
    y = resample(_rec(np.sin(2 * np.pi * t), fs=200.0))
    tt = np.arange(y.n_samples) / 100.0
    err = (y.samples - np.sin(2 * np.pi * tt))[10:-10]
    assert np.sqrt(np.mean(err**2)) < 1e-3


def test_resample_round_trip():
    t = np.arange(3000) / 100.0
    x = np.sin(2 * np.pi * 5.0 * t)
    up = resample(_rec(x), 250.0)
    back = resample(up, 100.0)
    err = (back.samples - x)[50:-50]
    assert np.sqrt(np.mean(err**2)) < 1e-3


def test_resample_length_rule():
    y = resample(_rec(np.zeros(1001) + 1.0, fs=256.0))
    assert y.n_samples == round(1001 * 100 / 256)


def test_resample_rejects_irrational_ratio():
    with pytest.raises(ParameterError):
        resample(_rec(np.ones(100), fs=100.0), target_fs=100.0 * np.pi)


def test_preprocess_ends_at_100hz():
    rec = _rec(np.random.default_rng(4).standard_normal(2560), fs=256.0)
    assert preprocess(rec).fs == 100.0


# ---------------------------------------------------------------- segmentation


@pytest.mark.parametrize("n,k,dropped", [(9000, 3, 0), (9050, 3, 50), (2999, 0, 2999)])
def test_segment_epochs(n, k, dropped):
    x = np.arange(n, dtype=np.float64) + 1
    seg = segment_epochs(_rec(x))
    assert seg.epochs.shape == (k, 3000)
    assert seg.dropped == dropped
    assert np.array_equal(seg.epochs.reshape(-1), x[: k * 3000])


# ---------------------------------------------------------------- synthesis


def test_synth_pure_tone_peak():
    rec = synth_signal(SynthSpec(60.0, [(10.0, 0.5, 1.0)], 0.0, seed=0))
    spec = np.abs(np.fft.rfft(rec.samples))
    f = np.fft.rfftfreq(rec.n_samples, 1 / rec.fs)
    assert abs(f[np.argmax(spec)] - 10.0) <= 0.25


def test_synth_component_peaks_within_bandwidth():
    comps = [(3.0, 1.0, 1.0), (12.0, 2.0, 1.0), (25.0, 2.0, 1.0)]
    rec = synth_signal(SynthSpec(120.0, comps, 0.05, seed=5))
    spec = np.abs(np.fft.rfft(rec.samples))
    f = np.fft.rfftfreq(rec.n_samples, 1 / rec.fs)
    for c, bw, _ in comps:
        band = (f > c - 2 * bw) & (f < c + 2 * bw)
        peak = f[band][np.argmax(spec[band])]
        assert abs(peak - c) <= bw / 2


def test_synth_deterministic():
    s = SynthSpec(30.0, [(6.0, 1.0, 1.0)], 0.2, seed=9)
    assert np.array_equal(synth_signal(s).samples, synth_signal(s).samples)


def test_synth_noise_std():
    rec = synth_signal(SynthSpec(60.0, [], 2.0, seed=1))
    assert np.std(rec.samples) == pytest.approx(2.0, rel=0.05)


def test_synth_rejects_nyquist_and_duration():
    with pytest.raises(ParameterError):
        synth_signal(SynthSpec(30.0, [(50.0, 1.0, 1.0)]))
    with pytest.raises(ParameterError):
        synth_signal(SynthSpec(31.0, [(5.0, 1.0, 1.0)]))


@pytest.mark.parametrize("level", [1e-6, 3.0, 1e4])
def test_bandpass_constant_is_exactly_zero(level):
    y = bandpass(Recording(np.full(6000, level), 100.0)).samples
    assert not y.any()
