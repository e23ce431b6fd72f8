import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eventsleep.corpus import eeg_like_signals
from eventsleep.exceptions import ParameterError, UndefinedMetricError
from eventsleep.operating_point import (
    SNR_CAP_DB,
    FidelityThresholds,
    OperatingPoint,
    SweepGrid,
    check_feasible,
    fidelity,
    grid_search,
    nmse,
    pearson_corr,
    read_sweep_csv,
    select,
    snr,
    write_sweep_csv,
)


def _corr_oracle(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def test_metric_hand_values():
    x, xh = [1, 2, 3, 4], [1, 2, 3, 5]
    assert snr(x, xh) == pytest.approx(10 * math.log10(30), abs=1e-12)
    assert snr(x, xh) == pytest.approx(14.771, abs=1e-3)
    assert nmse(x, xh) == pytest.approx(0.2, abs=1e-12)
    assert pearson_corr(x, xh) == pytest.approx(_corr_oracle(x, xh), abs=1e-12)
    assert pearson_corr(x, xh) == pytest.approx(0.98270, abs=1e-4)


def test_metric_degenerate_cases():
    x = np.array([1.0, -2.0, 3.0])
    assert snr(x, x) == SNR_CAP_DB
    assert snr(x, np.zeros(3)) == 0.0
    assert nmse(x, x) == 0.0
    assert nmse(x, np.full(3, x.mean())) == pytest.approx(1.0)
    assert pearson_corr(x, x) == pytest.approx(1.0)
    assert pearson_corr(x, -x) == pytest.approx(-1.0)
    with pytest.raises(UndefinedMetricError):
        nmse(np.ones(3), np.zeros(3))
    with pytest.raises(UndefinedMetricError):
        snr(np.zeros(3), np.ones(3))
    with pytest.raises(UndefinedMetricError):
        pearson_corr(x, np.ones(3))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=30), st.integers(0, 10_000))
def test_fidelity_shares_residual(xs, seed):
    x = np.asarray(xs)
    if np.ptp(x) < 1e-3:
        return
    xh = x + np.random.default_rng(seed).normal(0, 0.5, x.size)
    if np.ptp(xh) == 0:
        return
    s, n, c = fidelity(x, xh)
    assert s == pytest.approx(snr(x, xh)) and n == pytest.approx(nmse(x, xh))
    assert c == pytest.approx(pearson_corr(x, xh))
    assert -1 <= c <= 1


def test_feasibility_boundaries():
    thr = FidelityThresholds()
    assert not check_feasible(7.9, 0.1, 0.95, thr)
    assert check_feasible(8.0, 0.16, 0.90, thr)
    assert check_feasible(300.0, 0.0, 1.0, thr)
    assert not check_feasible(9.0, 0.17, 0.95, thr)
    assert not check_feasible(9.0, 0.1, 0.89, thr)


def test_threshold_validation():
    with pytest.raises(ParameterError):
        FidelityThresholds(tau_nmse=0.0)
    with pytest.raises(ParameterError):
        FidelityThresholds(tau_corr=-1.0)
    with pytest.raises(ParameterError):
        FidelityThresholds(tau_snr=float("inf"))


def test_grid_defaults_and_pairs():
    g = SweepGrid()
    assert g.k_values == pytest.approx([0.6 + 0.2 * i for i in range(10)])
    pairs = g.pairs()
    assert len(pairs) == 45 and all(kf < ks for ks, kf in pairs)
    with pytest.raises(ParameterError):
        SweepGrid(())
    with pytest.raises(ParameterError):
        SweepGrid((1.0, 0.5))


def _pt(ks, kf, rho, feasible):
    return OperatingPoint(ks, kf, 10.0, 0.1, 0.95, rho, feasible=feasible)


def test_select_tie_breaks():
    table = [_pt(1.2, 0.6, 0.1, True), _pt(1.6, 0.6, 0.1, True), _pt(1.6, 1.0, 0.1, True), _pt(2.0, 1.0, 0.05, False)]
    sel = select(table)
    assert (sel.k_slow, sel.k_fast) == (1.6, 1.0)
    assert select([_pt(1.0, 0.6, 0.1, False)]) is None


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=20))
def test_select_is_minimal(rows):
    table = [_pt(1.0 + i, 0.5, r, f) for i, (r, f) in enumerate(rows)]
    sel = select(table)
    feas = [p for p in table if p.feasible]
    if not feas:
        assert sel is None
    else:
        assert sel.feasible and all(p.rho >= sel.rho for p in feas)


def test_grid_search_singleton_and_impossible():
    sigs = eeg_like_signals(2, 30.0)
    one = grid_search(sigs, SweepGrid((1.0, 1.6)), FidelityThresholds(0.0, 1.0, 0.0))
    assert len(one.table) == 1 and one.selected is one.table[0]
    none = grid_search(sigs, SweepGrid((0.6, 1.0, 1.6)), FidelityThresholds(tau_corr=1.0))
    assert none.selected is None and none.status == "no_feasible_point" and len(none.table) == 3


def test_grid_search_empty_inputs():
    with pytest.raises(ParameterError):
        grid_search([], SweepGrid((1.0, 2.0)))
    with pytest.raises(ParameterError):
        grid_search(eeg_like_signals(1, 30.0), SweepGrid((1.0,)))


def test_table_sorted_and_means():
    sigs = eeg_like_signals(2, 30.0, seed=3)
    res = grid_search(sigs, SweepGrid((0.8, 1.2, 1.6)))
    keys = [(p.k_slow, p.k_fast) for p in res.table]
    assert keys == sorted(keys)
    from eventsleep.encoder import EncoderConfig, encode_ramsdm, event_density

    p = res.table[0]
    rhos = [event_density(encode_ramsdm(x, EncoderConfig(p.k_slow, p.k_fast))).combined for x in sigs]
    assert p.rho == pytest.approx(np.mean(rhos), rel=1e-12)


def test_sweep_csv_round_trip(tmp_path):
    res = grid_search(eeg_like_signals(1, 30.0), SweepGrid((0.8, 1.2, 1.6)))
    write_sweep_csv(res.table, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == (
        "k_slow,k_fast,snr_db,nmse,corr,rho_combined,rho_slow,rho_fast,feasible"
    )
    back = read_sweep_csv(tmp_path / "s.csv")
    assert back == res.table
