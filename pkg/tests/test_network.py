import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import perturbed_params, random_rasters
from eventsleep import network as net
from eventsleep.exceptions import FormatError, ParameterError, UndefinedMetricError
from eventsleep.network import (
    ElifState,
    ModelConfig,
    ModelParams,
    Window,
    build_attention_mask,
    classify,
    decode_checkpoint,
    eamr_branches,
    eamr_forward,
    elif_step,
    encode_checkpoint,
    forward,
    forward_tokens,
    init_params,
    load_checkpoint,
    ltam_forward,
    param_count,
    param_shapes,
    polarity_expand,
    pooling_weights,
    save_checkpoint,
    spike_stats,
    tokenize_epoch,
)
from eventsleep.s2e import EpochBatch, validity_mask, anchor
from eventsleep.training import predict_sequence


# -- polarity ---------------------------------------------------------------


def test_polarity_examples():
    S = np.array([[1, 0, -1], [0, 0, 0]])
    E = polarity_expand(S)
    assert E[0].tolist() == [1, 0, 0] and E[1].tolist() == [0, 0, 1]
    assert not polarity_expand(np.zeros((2, 5))).any()
    with pytest.raises(FormatError):
        polarity_expand(np.array([[2, 0], [0, 0]]))
    with pytest.raises(FormatError):
        polarity_expand(np.zeros((3, 4)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_polarity_identity(seed):
    S = random_rasters(np.random.default_rng(seed), 3, 50)
    E = polarity_expand(S)
    assert set(np.unique(E)) <= {0, 1}
    assert np.array_equal(E[:, 0] - E[:, 1], S[:, 0]) and np.array_equal(E[:, 2] - E[:, 3], S[:, 1])


# -- EAMR -------------------------------------------------------------------


def test_gate_bounds_and_bypass(desk, rng):
    p = perturbed_params(desk, scale=0.5)
    E = polarity_expand(random_rasters(rng, 3, desk.T_b))
    out, cache, _ = eamr_forward(E, p, desk, return_cache=True)
    assert np.all((cache.g > 0) & (cache.g < 1))
    assert np.array_equal(out, cache.H * cache.g[:, :, None])
    bypass = eamr_forward(E, p, desk, use_gate=False)
    assert np.array_equal(bypass, cache.H)


def test_zero_input_gives_zero_output(desk):
    p = init_params(desk, 0, np.float64)
    assert not eamr_forward(np.zeros((4, desk.T_b)), p, desk).any()


def test_impulse_support_width_one(desk):
    p = init_params(desk, 0, np.float64)
    for i, (k, w) in enumerate(desk.branches):
        dw = np.zeros((4, k))
        dw[:, k // 2] = 1.0
        pw = np.zeros((w, 4))
        pw[np.arange(4), np.arange(4)] = 1.0
        p[f"eamr.b{i}.dw"], p[f"eamr.b{i}.pw"] = dw, pw
    E = np.zeros((4, 200))
    E[0, 50] = 1.0
    for y in eamr_branches(E, p, desk, use_bn=False):
        nz = np.argwhere(y != 0)
        assert nz.tolist() == [[0, 50]]
        assert y[0, 50] == pytest.approx(0.5 * (1 + math.erf(1 / math.sqrt(2))))


def test_single_branch_shapes():
    cfg = ModelConfig.from_profile("desk", single_branch=True)
    p = init_params(cfg, 0)
    assert len(cfg.branches) == 1 and p["eamr.b0.dw"].shape == (4, 15)
    assert eamr_forward(np.zeros((2, 4, 100)), p, cfg).shape == (2, cfg.fused_width, 100)


def test_train_mode_bn_stats(desk, rng):
    p = perturbed_params(desk)
    E = polarity_expand(random_rasters(rng, 4, 300))
    _, cache, stats = eamr_forward(E, p, desk, mode="train", return_cache=True)
    assert set(stats) == {"eamr.b0", "eamr.b1", "eamr.b2"}
    xhat = cache.branches[0].xhat
    assert np.allclose(xhat.mean(axis=(0, 2)), 0, atol=1e-10)


# -- tokenizer ----------------------------------------------------------------


def test_tokenizer_constant_and_singleton(desk, rng):
    p = perturbed_params(desk)
    col = rng.normal(size=desk.fused_width)
    u = tokenize_epoch(np.repeat(col[:, None], 40, axis=1), p)
    assert np.allclose(u, col, atol=1e-12)
    assert np.allclose(tokenize_epoch(col[:, None], p), col, atol=1e-15)


def test_tokenizer_two_column_example():
    w = pooling_weights([0.0, math.log(3)])
    assert w == pytest.approx([0.25, 0.75], abs=1e-12)
    p = ModelParams({"tok.w": np.array([[1.0]]), "tok.v": np.array([math.log(3) / math.tanh(1.0)])})
    u = tokenize_epoch(np.array([[0.0, 1.0]]), p)
    assert u[0] == pytest.approx(0.75, abs=1e-12)


def test_mean_pooling():
    p = ModelParams({})
    H = np.arange(6.0).reshape(2, 3)
    assert tokenize_epoch(H, p, pooling="mean").tolist() == [1.0, 4.0]


# -- attention ----------------------------------------------------------------


def _vis(M):
    return np.isfinite(M).astype(int)


def test_mask_examples():
    assert np.array_equal(_vis(build_attention_mask(3, 0, [1, 1, 1])), np.eye(3, dtype=int))
    M = _vis(build_attention_mask(3, 2, [1, 1, 0]))
    assert M[:, 2].tolist() == [0, 0, 0]
    assert M[:, :2].all()
    lone = _vis(build_attention_mask(3, 0, [1, 1, 0]))
    assert lone[2].tolist() == [0, 0, 1]  # nothing else visible, so the row keeps itself
    band = _vis(build_attention_mask(5, 1, np.ones(5)))
    assert np.array_equal(band, (np.abs(np.subtract.outer(range(5), range(5))) <= 1).astype(int))
    with pytest.raises(ParameterError):
        build_attention_mask(3, 1, [1, 1])


def _scalar_params():
    one = np.array([[1.0]])
    return ModelParams({"ltam.wq": one, "ltam.wk": one, "ltam.wv": one, "ltam.wo": one})


def test_attention_scalar_hand_example():
    U = np.array([[1.0], [2.0]])
    Z, alpha = ltam_forward(U, build_attention_mask(2, 1, [1, 1]), _scalar_params())
    e1, e2 = math.exp(1), math.exp(2)
    assert alpha[0] == pytest.approx([e1 / (e1 + e2), e2 / (e1 + e2)], abs=1e-12)
    assert alpha[0] == pytest.approx([0.2689, 0.7311], abs=1e-4)
    assert Z[0, 0] == pytest.approx(1 + 0.2689 * 1 + 0.7311 * 2, abs=1e-3)


def test_attention_singleton_and_uniform(desk, rng):
    p = perturbed_params(desk)
    U = rng.normal(size=(5, desk.fused_width))
    M = build_attention_mask(5, 4, [0, 0, 1, 0, 0])
    Z, alpha = ltam_forward(U, M, p)
    V = U @ p["ltam.wv"].T
    assert alpha[0].tolist() == [0, 0, 1, 0, 0]
    ctx = alpha[0] @ V
    assert np.array_equal(ctx, V[2])
    assert np.allclose(Z[0], U[0] + V[2] @ p["ltam.wo"].T, rtol=0, atol=1e-12)
    same = np.repeat(U[:1], 5, axis=0)
    _, a2 = ltam_forward(same, build_attention_mask(5, 4, [1, 1, 0, 1, 1]), p)
    assert np.allclose(a2[0], [0.25, 0.25, 0, 0.25, 0.25], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.integers(0, 5))
def test_attention_rows_are_distributions(seed, N, L):
    r = np.random.default_rng(seed)
    cfg = ModelConfig.from_profile("desk")
    p = perturbed_params(cfg, seed % 7 + 1, scale=1.0)
    m = r.integers(0, 2, N)
    M = build_attention_mask(N, L, m)
    _, alpha = ltam_forward(r.normal(size=(N, cfg.fused_width)) * 3, M, p)
    assert np.all(alpha >= 0)
    assert np.allclose(alpha.sum(axis=1), 1, atol=1e-6)
    assert np.all(alpha[~np.isfinite(M)] == 0)


def test_fully_masked_row_rejected(desk):
    M = np.full((2, 2), -np.inf)
    M[1, 1] = 0
    with pytest.raises(ParameterError):
        ltam_forward(np.zeros((2, desk.fused_width)), M, init_params(desk))


# -- ELIF ---------------------------------------------------------------------


def test_elif_hand_trace():
    s = ElifState.zeros(1)
    hs, hb = [], []
    for _ in range(3):
        s, b = elif_step(s, np.array([1.0]), 1, 0.5)
        hs.append(s.h[0])
        hb.append(b[0])
    assert hs == [1.0, 1.5, 1.75]
    assert hb == pytest.approx([1.0, 0.75, 0.58333333333333], abs=1e-12)


def test_elif_reset_in_trace():
    z = np.array([1.0])
    s = ElifState.zeros(1)
    s, _ = elif_step(s, np.array([5.0]), 1, 0.5)
    s, _ = elif_step(s, np.array([-3.0]), 1, 0.5)
    s, b = elif_step(s, z, 0, 0.5)
    assert (s.h[0], s.n, b[0]) == (1.0, 1, 1.0)
    fresh, fb = elif_step(ElifState.zeros(1), z, 0, 0.5)
    assert np.array_equal(fresh.h, s.h) and np.array_equal(fb, b)


@pytest.mark.parametrize("lam", [0.1, 0.5, 0.9, 0.99])
def test_elif_closed_form(lam):
    z = np.array([0.7, -1.3])
    s = ElifState.zeros(2)
    for i in range(51):
        s, _ = elif_step(s, z, 1, lam)
        ref = z * (1 - lam ** (i + 1)) / (1 - lam)
        assert np.all(np.abs(s.h - ref) <= 1e-9 * np.abs(ref))


def test_elif_zero_input_and_bad_leak():
    s = ElifState.zeros(3)
    for v in (1, 0, 1):
        s, b = elif_step(s, np.zeros(3), v, 0.3)
        assert not b.any()
    with pytest.raises(ParameterError):
        elif_step(s, np.zeros(3), 1, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 14))
def test_scan_reset_independence(seed, gap):
    r = np.random.default_rng(seed)
    Z = r.normal(size=(1, 16, 3))
    valid = np.ones((1, 16), np.uint8)
    valid[0, gap] = 0
    center = 15
    h1, n1, st1 = net._elif_scan(Z, valid, center, 0.9, keep_states=True)
    Z2 = Z.copy()
    Z2[0, :gap] = r.normal(size=(gap, 3)) * 10
    h2, n2, st2 = net._elif_scan(Z2, valid, center, 0.9, keep_states=True)
    assert np.array_equal(h1, h2) and np.array_equal(n1, n2)
    for i in range(gap, center + 1):
        assert np.array_equal(st1[i][0], st2[i][0])


def test_scan_matches_window_scan(rng):
    Z = rng.normal(size=(9, 4))
    valid = np.array([1, 1, 0, 1, 1, 1, 0, 1, 1], np.uint8)
    h, n, _ = net._elif_scan(Z[None], valid[None], 8, 0.8)
    h_all, hbar_all = net._scan_all(Z, valid, 8, 0.8, False)
    assert np.allclose(h[0], h_all[8], atol=1e-14)
    assert np.allclose(h[0] / n[0], hbar_all[8], atol=1e-14)


# -- head -----------------------------------------------------------------------


def test_classify_examples():
    p = ModelParams({"cls.weight": np.zeros((5, 3)), "cls.bias": np.zeros(5)})
    _, pr = classify(np.ones(3), p)
    assert pr == pytest.approx([0.2] * 5)
    p["cls.bias"] = np.array([10.0, 0, 0, 0, 0])
    lg, pr = classify(np.ones(3), p)
    assert np.argmax(lg) == 0 and pr[0] > 0.99
    pr = net.softmax(np.arange(1.0, 6.0))
    ref = math.exp(5) / sum(math.exp(i) for i in range(1, 6))
    assert pr[4] == pytest.approx(ref, abs=1e-15) and pr[4] == pytest.approx(0.6364, abs=1e-4)


def test_spike_stats_examples():
    assert spike_stats(np.zeros((3, 4))) == 0.0
    assert spike_stats(np.full((3, 4), -2.0)) == 1.0
    assert spike_stats([[2, 0], [0, 2]], 1.0) == 0.5
    with pytest.raises(UndefinedMetricError):
        spike_stats(np.zeros((0, 4)))


# -- composed forward -------------------------------------------------------


def _window(rng, cfg, valid=None):
    N = cfg.window_size
    return random_rasters(rng, N, cfg.T_b, 0.05), np.ones(N, np.uint8) if valid is None else valid


def test_forward_only_center_valid(desk, rng):
    p = perturbed_params(desk)
    R, _ = _window(rng, desk)
    c = desk.window_size // 2
    valid = np.zeros(desk.window_size, np.uint8)
    valid[c] = 1
    a = forward(Window(R, valid), p, desk)
    R2 = random_rasters(rng, desk.window_size, desk.T_b, 0.3)
    R2[c] = R[c]
    b = forward(Window(R2, valid), p, desk)
    assert np.array_equal(a.center_logits, b.center_logits)


def test_forward_identical_epochs(desk, rng):
    p = perturbed_params(desk)
    one = random_rasters(rng, 1, desk.T_b, 0.05)
    R = np.repeat(one, desk.window_size, axis=0)
    res = forward(Window(R, np.ones(desk.window_size)), p, desk)
    u = res.tokens
    ref = u + (u @ p["ltam.wv"].T) @ p["ltam.wo"].T
    assert np.allclose(res.Z, ref, rtol=1e-12, atol=1e-12)


def test_forward_deterministic_and_shapes(desk, rng):
    p = init_params(desk, 3)
    R, v = _window(rng, desk)
    a, b = forward(Window(R, v), p, desk), forward(Window(R, v), p, desk)
    assert np.array_equal(a.center_logits, b.center_logits) and np.array_equal(a.alpha, b.alpha)
    assert a.logits.shape == (desk.window_size, 5) and 0 <= a.prediction < 5
    with pytest.raises(ParameterError):
        forward(Window(R[:3], v[:3]), p, desk)


def _seq_batch(R, mask):
    n = len(R)
    return EpochBatch(R, anchor(np.arange(n)), np.asarray(mask, np.uint8), np.arange(n), R.shape[-1])


def test_locality_far_and_invalid_epochs(desk, rng):
    p = perturbed_params(desk)
    n, tgt = 40, 10
    R = random_rasters(rng, n, desk.T_b, 0.05)
    mask = np.ones(n, np.uint8)
    mask[[5, 20]] = 0
    base = predict_sequence(p, desk, _seq_batch(R, mask))
    R2 = R.copy()
    far = [i for i in range(n) if abs(i - tgt) > desk.window_radius] + [5, 20]
    R2[far] = random_rasters(rng, len(far), desk.T_b, 0.3)
    pert = predict_sequence(p, desk, _seq_batch(R2, mask))
    assert np.array_equal(base[tgt], pert[tgt])
    assert not np.array_equal(base[30], pert[30])


def test_forward_matches_sequence_inference(desk, rng):
    p = perturbed_params(desk)
    n = desk.window_size
    R = random_rasters(rng, n, desk.T_b, 0.05)
    mask = np.ones(n, np.uint8)
    mask[7] = 0
    seq = predict_sequence(p, desk, _seq_batch(R, mask))
    win = forward(Window(R, mask), p, desk)
    assert np.allclose(seq[n // 2], win.center_probs, atol=1e-12)


def test_no_elif_uses_center_token():
    cfg = ModelConfig.from_profile("desk", no_elif=True, window_radius=2)
    p = perturbed_params(cfg)
    U = np.random.default_rng(0).normal(size=(5, cfg.fused_width))
    res = forward_tokens(U, np.ones(5, np.uint8), p, cfg)
    assert np.array_equal(res.hbar, res.Z)


# -- parameters & checkpoints ------------------------------------------------


def test_param_count_analytic(desk):
    total = sum(int(np.prod(s)) for n, s in param_shapes(desk).items() if not net.is_buffer(n))
    assert param_count(desk) == total
    assert param_count(ModelConfig.from_profile("paper_scale")) / 1e6 == pytest.approx(0.932, rel=0.15)


def test_init_deterministic(desk):
    a, b, c = init_params(desk, 5), init_params(desk, 5), init_params(desk, 6)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_checkpoint_round_trip(desk, tmp_path):
    p = init_params(desk, 2)
    save_checkpoint(p, desk, tmp_path / "m.nckp")
    q, cfg = load_checkpoint(tmp_path / "m.nckp", expect=desk)
    assert cfg == desk and set(q) == set(p)
    assert all(np.array_equal(p[k], q[k]) and q[k].dtype == np.float32 for k in p)
    assert encode_checkpoint(q, cfg) == (tmp_path / "m.nckp").read_bytes()


def test_checkpoint_errors(desk):
    buf = encode_checkpoint(init_params(desk), desk)
    with pytest.raises(FormatError):
        decode_checkpoint(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        decode_checkpoint(buf[:-3])
    with pytest.raises(FormatError):
        decode_checkpoint(buf, expect=ModelConfig.from_profile("desk", window_radius=3))
    bad = init_params(desk)
    bad["cls.bias"] = np.zeros(4, np.float32)
    with pytest.raises(FormatError):
        encode_checkpoint(bad, desk)


def test_config_validation():
    with pytest.raises(ParameterError):
        ModelConfig(kernel_sizes=(7, 14, 31))
    with pytest.raises(ParameterError):
        ModelConfig(leak=1.0)
    with pytest.raises(ParameterError):
        ModelConfig.from_profile("huge")
