"""Event-driven sleep staging network in plain numpy.

Pipeline per context window of ``2L + 1`` epochs::

    raster (2, T_b) -> polarity expansion (4, T_b)
      -> three depthwise-separable conv branches + BN + GELU
      -> fusion projection -> channel gate -> attention pooling -> token u
    tokens (N, C) -> masked local attention (+ residual) -> z
      -> leaky epoch state with reset -> normalised state -> linear head

Epoch encodings are computed over a *pool* of unique epochs and windows index
into the pool, so epochs shared by overlapping windows are encoded once.
``backward`` mirrors ``forward_pool`` exactly and is checked against finite
differences in the test-suite.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.special import erf

from .exceptions import FormatError, ParameterError, UndefinedMetricError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
N_CLASSES = 5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

PROFILES = {
    "desk": dict(branch_width=8, fused_width=24, attn_dim=24),
    "paper_scale": dict(branch_width=128, fused_width=384, attn_dim=384),
}


@dataclass(frozen=True)
class ModelConfig:
    kernel_sizes: tuple[int, int, int] = (7, 15, 31)
    branch_width: int = 8
    fused_width: int = 24
    gate_reduction: int = 4
    attn_dim: int = 24
    window_radius: int = 15
    leak: float = 0.9
    fire_threshold: float = 1.0
    n_classes: int = N_CLASSES
    T_b: int = 3000
    profile: str = "desk"
    pooling: str = "attention"
    dense_input: bool = False
    single_branch: bool = False
    no_elif: bool = False

    def __post_init__(self):
        ks = tuple(int(k) for k in self.kernel_sizes)
        object.__setattr__(self, "kernel_sizes", ks)
        if len(ks) != 3 or any(k < 1 or k % 2 == 0 for k in ks):
            raise ParameterError(f"kernel sizes must be three odd positive ints, got {ks}")
        for name in ("branch_width", "fused_width", "gate_reduction", "attn_dim", "T_b"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.window_radius < 0:
            raise ParameterError("window_radius must be >= 0")
        if not 0 < self.leak < 1:
            raise ParameterError("leak must lie in (0, 1)")
        if self.n_classes != N_CLASSES:
            raise ParameterError("n_classes is fixed at 5")
        if self.pooling not in ("attention", "mean"):
            raise ParameterError(f"unknown pooling {self.pooling!r}")

    @classmethod
    def from_profile(cls, name: str = "desk", **overrides) -> "ModelConfig":
        if name not in PROFILES:
            raise ParameterError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
        return cls(profile=name, **{**PROFILES[name], **overrides})

    @property
    def branches(self) -> list[tuple[int, int]]:
        """(kernel size, width) per active branch."""
        if self.single_branch:
            return [(self.kernel_sizes[1], 3 * self.branch_width)]
        return [(k, self.branch_width) for k in self.kernel_sizes]

    @property
    def concat_width(self) -> int:
        return 3 * self.branch_width

    @property
    def gate_hidden(self) -> int:
        return max(1, self.fused_width // self.gate_reduction)

    @property
    def window_size(self) -> int:
        return 2 * self.window_radius + 1


BUFFER_SUFFIXES = (".bn_mean", ".bn_var")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    C, d, Cr = cfg.fused_width, cfg.attn_dim, cfg.gate_hidden
    shapes: dict[str, tuple[int, ...]] = {}
    for i, (k, w) in enumerate(cfg.branches):
        p = f"eamr.b{i}"
        shapes[f"{p}.dw"] = (4, k)
        shapes[f"{p}.pw"] = (w, 4)
        shapes[f"{p}.bn_gamma"] = (w,)
        shapes[f"{p}.bn_beta"] = (w,)
        shapes[f"{p}.bn_mean"] = (w,)
        shapes[f"{p}.bn_var"] = (w,)
    shapes["eamr.fuse.weight"] = (C, cfg.concat_width)
    shapes["eamr.fuse.bias"] = (C,)
    shapes["eamr.gate.w1"] = (Cr, C)
    shapes["eamr.gate.b1"] = (Cr,)
    shapes["eamr.gate.w2"] = (C, Cr)
    shapes["eamr.gate.b2"] = (C,)
    if cfg.pooling == "attention":
        shapes["tok.w"] = (C, C)
        shapes["tok.v"] = (C,)
    shapes["ltam.wq"] = (d, C)
    shapes["ltam.wk"] = (d, C)
    shapes["ltam.wv"] = (d, C)
    shapes["ltam.wo"] = (C, d)
    shapes["cls.weight"] = (cfg.n_classes, C)
    shapes["cls.bias"] = (cfg.n_classes,)
    return shapes


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


def param_count(cfg: ModelConfig) -> int:
    """Number of learnable scalars (BN running statistics excluded)."""
    return sum(int(np.prod(s)) for n, s in param_shapes(cfg).items() if not is_buffer(n))


class ModelParams(dict):
    """Name -> array store. BN running statistics live alongside as buffers."""

    def learnable(self) -> list[str]:
        return [n for n in self if not is_buffer(n)]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: v.astype(dtype) for k, v in self.items()})

    @property
    def dtype(self):
        return next(iter(self.values())).dtype


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Fan-in scaled uniform weights, zero biases, identity BN."""
    rng = np.random.default_rng(seed)
    out = ModelParams()
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf in ("bn_gamma", "bn_var"):
            a = np.ones(shape)
        elif leaf in ("bn_beta", "bn_mean") or leaf.startswith("b") and len(shape) == 1:
            a = np.zeros(shape)
        elif leaf == "v":
            a = rng.uniform(-1, 1, shape) / math.sqrt(shape[0])
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / math.sqrt(fan_in)
            a = rng.uniform(-bound, bound, shape)
        out[name] = a.astype(dtype)
    return out


def check_params(params: ModelParams, cfg: ModelConfig) -> None:
    shapes = param_shapes(cfg)
    if set(shapes) != set(params):
        missing = sorted(set(shapes) - set(params))
        extra = sorted(set(params) - set(shapes))
        raise FormatError(f"parameter names do not match config: missing={missing} extra={extra}")
    for n, s in shapes.items():
        if params[n].shape != s:
            raise FormatError(f"{n}: shape {params[n].shape} does not match config {s}")


# --------------------------------------------------------------------------
# elementwise helpers


def _cdf(x):
    c = erf(x * (1.0 / _SQRT2))
    c += 1.0
    c *= 0.5
    return c


def gelu(x, cdf=None):
    return x * (_cdf(x) if cdf is None else cdf)


def gelu_grad(x, cdf=None):
    """Derivative of the exact GELU; pass the cached normal CDF to skip one erf."""
    g = x * x
    g *= -0.5
    np.exp(g, out=g)
    g *= _INV_SQRT2PI
    g *= x
    g += _cdf(x) if cdf is None else cdf
    return g


def _bsum_outer(a, b):
    """sum_p a[p] @ b[p].T for (P, O, T) and (P, C, T) -> (O, C)."""
    return np.matmul(a, np.swapaxes(b, 1, 2)).sum(axis=0)


def _bsum_dot(a, b):
    """Per-channel sum over (P, T) of a * b -> (C,)."""
    return np.matmul(a[:, :, None, :], b[:, :, :, None])[:, :, 0, 0].sum(axis=0)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


# --------------------------------------------------------------------------
# EAMR


def polarity_expand(S, strict: bool = True) -> np.ndarray:
    """(..., 2, T) -> (..., 4, T) as [slow+, slow-, fast+, fast-]."""
    S = np.asarray(S)
    if S.shape[-2] != 2:
        raise FormatError(f"expected 2 rows (slow, fast), got shape {S.shape}")
    if strict and not np.isin(S, (-1, 0, 1)).all():
        raise FormatError("event raster contains values outside {-1, 0, +1}")
    pos = np.maximum(S, 0)
    neg = np.maximum(-S, 0)
    return np.stack([pos[..., 0, :], neg[..., 0, :], pos[..., 1, :], neg[..., 1, :]], axis=-2)


def _dwconv(Ep: np.ndarray, w: np.ndarray, T: int) -> np.ndarray:
    # Ep is zero-padded by (k-1)/2 each side; cross-correlation, same length
    k = w.shape[1]
    y = w[None, :, 0, None] * Ep[..., 0:T]
    for j in range(1, k):
        y += w[None, :, j, None] * Ep[..., j : j + T]
    return y


def _pad(E: np.ndarray, k: int) -> np.ndarray:
    p = (k - 1) // 2
    return np.pad(E, ((0, 0), (0, 0), (p, p)))


class _BranchCache(NamedTuple):
    Ep: np.ndarray
    dw_out: np.ndarray
    xhat: np.ndarray
    invstd: np.ndarray
    pre: np.ndarray
    cdf: np.ndarray


def _branch_forward(E, params, prefix, k, mode, use_bn=True):
    T = E.shape[-1]
    Ep = _pad(E, k)
    dw_out = _dwconv(Ep, params[f"{prefix}.dw"], T)
    pw_out = np.matmul(params[f"{prefix}.pw"], dw_out)
    stats = None
    if not use_bn:
        xhat, invstd, pre = pw_out, None, pw_out
    else:
        if mode == "train":
            mu = pw_out.mean(axis=(0, 2))
            var = pw_out.var(axis=(0, 2))
            n = pw_out.shape[0] * T
            stats = (mu, var * n / max(n - 1, 1))
        else:
            mu = params[f"{prefix}.bn_mean"]
            var = params[f"{prefix}.bn_var"]
        invstd = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (pw_out - mu[None, :, None]) * invstd[None, :, None]
        pre = params[f"{prefix}.bn_gamma"][None, :, None] * xhat + params[f"{prefix}.bn_beta"][None, :, None]
    cdf = _cdf(pre)
    return pre * cdf, _BranchCache(Ep, dw_out, xhat, invstd, pre, cdf), stats


class EamrCache(NamedTuple):
    branches: list
    Hc: np.ndarray
    H: np.ndarray
    mH: np.ndarray
    a1: np.ndarray
    r1: np.ndarray
    g: np.ndarray
    Ht: np.ndarray


def eamr_branches(E, params, cfg: ModelConfig, mode="eval", use_bn=True) -> list[np.ndarray]:
    """Per-branch activations for a (P, 4, T) or (4, T) input."""
    E = np.asarray(E, dtype=params.dtype)
    single = E.ndim == 2
    E3 = E[None] if single else E
    outs = []
    for i, (k, _) in enumerate(cfg.branches):
        y, _, _ = _branch_forward(E3, params, f"eamr.b{i}", k, mode, use_bn)
        outs.append(y[0] if single else y)
    return outs


def eamr_forward(E, params, cfg: ModelConfig, mode="eval", use_bn=True, use_gate=True, return_cache=False):
    """Multi-scale branches, fusion and channel gate: (P, 4, T) -> (P, C, T).

    Returns ``(H_tilde, cache, bn_stats)`` when ``return_cache`` is set;
    ``bn_stats`` maps branch prefixes to batch (mean, unbiased var) in train mode.
    """
    E = np.asarray(E, dtype=params.dtype)
    single = E.ndim == 2
    if single:
        E = E[None]
    if E.shape[1] != 4:
        raise RuntimeError(f"EAMR expects 4 input channels, got {E.shape}")
    outs, caches, stats = [], [], {}
    for i, (k, _) in enumerate(cfg.branches):
        y, c, st = _branch_forward(E, params, f"eamr.b{i}", k, mode, use_bn)
        outs.append(y)
        caches.append(c)
        if st is not None:
            stats[f"eamr.b{i}"] = st
    Hc = outs[0] if len(outs) == 1 else np.concatenate(outs, axis=1)
    H = np.matmul(params["eamr.fuse.weight"], Hc) + params["eamr.fuse.bias"][None, :, None]
    mH = H.mean(axis=2)
    a1 = mH @ params["eamr.gate.w1"].T + params["eamr.gate.b1"]
    r1 = np.maximum(a1, 0)
    g = sigmoid(r1 @ params["eamr.gate.w2"].T + params["eamr.gate.b2"])
    if not use_gate:
        g = np.ones_like(g)
    Ht = H * g[:, :, None]
    out = Ht[0] if single else Ht
    if return_cache:
        return out, EamrCache(caches, Hc, H, mH, a1, r1, g, Ht), stats
    return out


class TokenCache(NamedTuple):
    S: np.ndarray | None
    wts: np.ndarray


def tokenize_epoch(Ht, params, pooling="attention", return_cache=False):
    """Attention pooling over time: (P, C, T) -> (P, C); also accepts (C, T)."""
    Ht = np.asarray(Ht)
    single = Ht.ndim == 2
    if single:
        Ht = Ht[None]
    P, C, T = Ht.shape
    if pooling == "mean":
        S = None
        wts = np.full((P, T), 1.0 / T, dtype=Ht.dtype)
    else:
        S = np.tanh(np.matmul(params["tok.w"], Ht))
        scores = np.einsum("c,pct->pt", params["tok.v"], S)
        wts = softmax(scores, axis=1)
    u = np.einsum("pct,pt->pc", Ht, wts)
    u = u[0] if single else u
    if return_cache:
        return u, TokenCache(S, wts)
    return u


def pooling_weights(scores) -> np.ndarray:
    return softmax(np.asarray(scores, dtype=np.float64))


def encode_epochs(rasters, params, cfg: ModelConfig, mode="eval", return_cache=False, chunk=None):
    """Rasters (P, 2, T) -> tokens (P, C)."""
    E = polarity_expand(rasters, strict=not cfg.dense_input).astype(params.dtype, copy=False)
    if return_cache:
        Ht, ec, stats = eamr_forward(E, params, cfg, mode, return_cache=True)
        u, tc = tokenize_epoch(Ht, params, cfg.pooling, return_cache=True)
        return u, (E, ec, tc), stats
    if mode != "eval" or chunk is None:
        return tokenize_epoch(eamr_forward(E, params, cfg, mode), params, cfg.pooling)
    parts = [
        tokenize_epoch(eamr_forward(E[i : i + chunk], params, cfg, mode), params, cfg.pooling)
        for i in range(0, E.shape[0], chunk)
    ]
    return np.concatenate(parts) if parts else np.zeros((0, cfg.fused_width), params.dtype)


# --------------------------------------------------------------------------
# LTAM


def build_attention_mask(N: int, L: int, m) -> np.ndarray:
    """Additive mask: 0 where ``|i-j| <= L`` and ``m[j] == 1``, else ``-inf``.

    A row with nothing visible keeps its own diagonal entry.
    """
    m = np.asarray(m).astype(bool)
    if m.shape != (N,):
        raise ParameterError(f"mask length {m.shape} != N={N}")
    i = np.arange(N)
    vis = (np.abs(i[:, None] - i[None, :]) <= L) & m[None, :]
    empty = ~vis.any(axis=1)
    vis[empty, empty.nonzero()[0]] = True
    return np.where(vis, 0.0, -np.inf)


def _attention_masks(valid: np.ndarray, L: int) -> np.ndarray:
    B, N = valid.shape
    i = np.arange(N)
    band = np.abs(i[:, None] - i[None, :]) <= L
    vis = band[None] & valid[:, None, :].astype(bool)
    empty = ~vis.any(axis=2)
    b, r = np.nonzero(empty)
    vis[b, r, r] = True
    return vis


class LtamCache(NamedTuple):
    U: np.ndarray
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    alpha: np.ndarray
    ctx: np.ndarray


def _ltam(U, vis, params, return_cache=False):
    wq, wk, wv, wo = (params[f"ltam.{n}"] for n in ("wq", "wk", "wv", "wo"))
    d = wq.shape[0]
    Q = U @ wq.T
    K = U @ wk.T
    V = U @ wv.T
    logits = np.matmul(Q, np.swapaxes(K, -1, -2)) / math.sqrt(d)
    logits = np.where(vis, logits, -np.inf)
    alpha = softmax(logits, axis=-1)
    ctx = np.matmul(alpha, V)
    Z = U + ctx @ wo.T
    if return_cache:
        return Z, LtamCache(U, Q, K, V, alpha, ctx)
    return Z, alpha


def ltam_forward(tokens, M, params):
    """Masked single-head attention with a residual: (N, C) -> (Z, alpha)."""
    vis = np.isfinite(np.asarray(M))
    if not vis.any(axis=-1).all():
        raise ParameterError("attention mask has a fully masked row")
    Z, alpha = _ltam(np.asarray(tokens), vis, params)
    return Z, alpha


# --------------------------------------------------------------------------
# ELIF


@dataclass
class ElifState:
    h: np.ndarray
    n: int = 0

    @classmethod
    def zeros(cls, C: int, dtype=np.float64) -> "ElifState":
        return cls(np.zeros(C, dtype=dtype), 0)


def elif_step(state: ElifState, z, valid: int, leak: float):
    """One leaky update. An invalid epoch resets the state, then integrates ``z``."""
    if not 0 < leak < 1:
        raise ParameterError("leak must lie in (0, 1)")
    z = np.asarray(z)
    if valid:
        h = leak * state.h + z
        n = state.n + 1
    else:
        h = z.copy()
        n = 1
    new = ElifState(h, n)
    return new, h / max(n, 1)


def spike_stats(h_seq, fire_threshold: float = 1.0) -> float:
    """Fraction of (epoch, channel) entries with ``|h| >= fire_threshold``."""
    h = np.asarray(h_seq)
    if h.size == 0:
        raise UndefinedMetricError("spike rate needs at least one valid epoch")
    return float(np.mean(np.abs(h) >= fire_threshold))


def _elif_scan(Z, valid, center, leak, keep_states=False):
    """Vectorised state scan over slots 0..center.

    Invalid non-centre slots are discarded: the state is zeroed and nothing
    from that slot is integrated. The centre always integrates its own ``z``
    (reset first if it is itself invalid).
    """
    B, N, C = Z.shape
    h = np.zeros((B, C), dtype=Z.dtype)
    n = np.zeros(B, dtype=np.int64)
    states = []
    for i in range(center + 1):
        v = valid[:, i].astype(bool)
        if i == center:
            h = np.where(v[:, None], leak * h + Z[:, i], Z[:, i])
            n = np.where(v, n + 1, 1)
        else:
            h = np.where(v[:, None], leak * h + Z[:, i], 0.0)
            n = np.where(v, n + 1, 0)
        if keep_states:
            states.append((h.copy(), n.copy()))
    return h, n, states


# --------------------------------------------------------------------------
# head


def classify(hbar, params):
    logits = np.asarray(hbar) @ params["cls.weight"].T + params["cls.bias"]
    return logits, softmax(logits, axis=-1)


# --------------------------------------------------------------------------
# composed forward passes


class ContextResult(NamedTuple):
    logits: np.ndarray  # (B, 5) centre logits
    hbar: np.ndarray  # (B, C)
    Z: np.ndarray  # (B, N, C)
    alpha: np.ndarray  # (B, N, N)


def context_forward(U, valid, params, cfg: ModelConfig, center=None, return_cache=False):
    """Tokens (B, N, C) with slot validity (B, N) -> centre logits."""
    B, N, C = U.shape
    center = N // 2 if center is None else center
    vis = _attention_masks(valid, cfg.window_radius)
    Z, lc = _ltam(U, vis, params, return_cache=True)
    if cfg.no_elif:
        h = Z[:, center]
        n = np.ones(B, dtype=np.int64)
    else:
        h, n, _ = _elif_scan(Z, valid, center, cfg.leak)
    hbar = h / np.maximum(n, 1)[:, None]
    logits, _ = classify(hbar, params)
    res = ContextResult(logits, hbar, Z, lc.alpha)
    if return_cache:
        return res, (lc, vis, n, center)
    return res


def gather_windows(tokens, positions):
    """Pool tokens (P, C) + positions (B, N) (-1 = missing) -> (B, N, C) with zero rows."""
    U = tokens[np.maximum(positions, 0)]
    U[positions < 0] = 0
    return U


class PoolCache(NamedTuple):
    enc: tuple
    ctx: tuple
    U: np.ndarray
    positions: np.ndarray
    valid: np.ndarray
    hbar: np.ndarray


def forward_pool(params, cfg: ModelConfig, rasters, positions, valid, mode="train"):
    """Training-time forward over a pool of epochs and windows into it.

    Returns ``(logits (B, 5), cache, bn_stats)``.
    """
    tokens, enc, stats = encode_epochs(rasters, params, cfg, mode, return_cache=True)
    valid = np.asarray(valid) * (np.asarray(positions) >= 0)
    U = gather_windows(tokens, positions)
    res, ctx = context_forward(U, valid, params, cfg, return_cache=True)
    return res.logits, PoolCache(enc, ctx, U, positions, valid, res.hbar), stats


def backward(params, cfg: ModelConfig, cache: PoolCache, dlogits) -> dict[str, np.ndarray]:
    """Reverse pass of ``forward_pool`` (train-mode BN) for upstream ``dlogits`` (B, 5)."""
    grads = {n: np.zeros_like(params[n]) for n in params.learnable()}
    E, ec, tc = cache.enc
    lc, vis, n, center = cache.ctx
    U, positions, valid = cache.U, cache.positions, cache.valid
    B, N, C = U.shape

    # head
    grads["cls.weight"] = dlogits.T @ cache.hbar
    grads["cls.bias"] = dlogits.sum(axis=0)
    dhbar = dlogits @ params["cls.weight"]

    # state scan
    dZ = np.zeros_like(lc.U)
    dh = dhbar / np.maximum(n, 1)[:, None]
    if cfg.no_elif:
        dZ[:, center] = dh
    else:
        leak = cfg.leak
        for i in range(center, -1, -1):
            v = valid[:, i].astype(bool)
            if i == center:
                dZ[:, i] = dh
                dh = np.where(v[:, None], leak * dh, 0.0)
            else:
                dZ[:, i] = np.where(v[:, None], dh, 0.0)
                dh = np.where(v[:, None], leak * dh, 0.0)

    # attention
    wq, wk, wv, wo = (params[f"ltam.{k}"] for k in ("wq", "wk", "wv", "wo"))
    d = wq.shape[0]
    dU = dZ.copy()
    grads["ltam.wo"] = np.einsum("bnc,bnd->cd", dZ, lc.ctx)
    dctx = dZ @ wo
    dalpha = np.matmul(dctx, np.swapaxes(lc.V, -1, -2))
    dV = np.matmul(np.swapaxes(lc.alpha, -1, -2), dctx)
    dlog = lc.alpha * (dalpha - np.sum(lc.alpha * dalpha, axis=-1, keepdims=True))
    dlog /= math.sqrt(d)
    dQ = np.matmul(dlog, lc.K)
    dK = np.matmul(np.swapaxes(dlog, -1, -2), lc.Q)
    grads["ltam.wq"] = np.einsum("bnd,bnc->dc", dQ, U)
    grads["ltam.wk"] = np.einsum("bnd,bnc->dc", dK, U)
    grads["ltam.wv"] = np.einsum("bnd,bnc->dc", dV, U)
    dU += dQ @ wq + dK @ wk + dV @ wv

    # scatter window-token grads back onto the pool
    P = E.shape[0]
    du = np.zeros((P, C), dtype=dU.dtype)
    ok = positions >= 0
    np.add.at(du, positions[ok], dU[ok])

    # tokenizer
    Ht = ec.Ht
    wts = tc.wts
    dHt = du[:, :, None] * wts[:, None, :]
    if cfg.pooling == "attention":
        dw = np.einsum("pc,pct->pt", du, Ht)
        dsc = wts * (dw - np.sum(wts * dw, axis=1, keepdims=True))
        grads["tok.v"] = np.einsum("pt,pct->c", dsc, tc.S)
        dpre = params["tok.v"][None, :, None] * dsc[:, None, :] * (1.0 - tc.S * tc.S)
        grads["tok.w"] = _bsum_outer(dpre, Ht)
        dHt += np.matmul(params["tok.w"].T, dpre)

    # gate
    g = ec.g
    dH = dHt * g[:, :, None]
    dg = np.einsum("pct,pct->pc", dHt, ec.H)
    da2 = dg * g * (1.0 - g)
    grads["eamr.gate.w2"] = da2.T @ ec.r1
    grads["eamr.gate.b2"] = da2.sum(axis=0)
    da1 = (da2 @ params["eamr.gate.w2"]) * (ec.a1 > 0)
    grads["eamr.gate.w1"] = da1.T @ ec.mH
    grads["eamr.gate.b1"] = da1.sum(axis=0)
    dH += (da1 @ params["eamr.gate.w1"])[:, :, None] / ec.H.shape[2]

    # fusion
    grads["eamr.fuse.weight"] = _bsum_outer(dH, ec.Hc)
    grads["eamr.fuse.bias"] = dH.sum(axis=(0, 2))
    dHc = np.matmul(params["eamr.fuse.weight"].T, dH)

    # branches
    off = 0
    T = E.shape[2]
    for i, (k, w) in enumerate(cfg.branches):
        p = f"eamr.b{i}"
        bc = ec.branches[i]
        dy = dHc[:, off : off + w] * gelu_grad(bc.pre, bc.cdf)
        off += w
        grads[f"{p}.bn_gamma"] = _bsum_dot(dy, bc.xhat)
        grads[f"{p}.bn_beta"] = dy.sum(axis=(0, 2))
        dxhat = dy * params[f"{p}.bn_gamma"][None, :, None]
        m = dy.shape[0] * T
        s1 = dxhat.sum(axis=(0, 2))
        s2 = _bsum_dot(dxhat, bc.xhat)
        dpw_out = (bc.invstd[None, :, None] / m) * (
            m * dxhat - s1[None, :, None] - bc.xhat * s2[None, :, None]
        )
        grads[f"{p}.pw"] = _bsum_outer(dpw_out, bc.dw_out)
        ddw = np.matmul(params[f"{p}.pw"].T, dpw_out)
        gdw = np.empty((4, k), dtype=ddw.dtype)
        for j in range(k):
            gdw[:, j] = _bsum_dot(ddw, bc.Ep[..., j : j + T])
        grads[f"{p}.dw"] = gdw
    return grads


def apply_bn_stats(params: ModelParams, stats: dict, momentum: float = BN_MOMENTUM) -> None:
    """Fold train-mode batch statistics into the running estimates (in place)."""
    for prefix, (mu, var) in stats.items():
        rm, rv = params[f"{prefix}.bn_mean"], params[f"{prefix}.bn_var"]
        rm *= 1 - momentum
        rm += momentum * mu.astype(rm.dtype)
        rv *= 1 - momentum
        rv += momentum * var.astype(rv.dtype)


# --------------------------------------------------------------------------
# inference on one window


@dataclass(frozen=True, eq=False)
class Window:
    """``2L + 1`` epoch slots centred on the target; missing slots carry ``present == False``."""

    rasters: np.ndarray  # (N, 2, T_b)
    valid: np.ndarray  # (N,) 0/1
    present: np.ndarray | None = None

    def __post_init__(self):
        present = np.ones(len(self.valid), bool) if self.present is None else np.asarray(self.present, bool)
        object.__setattr__(self, "present", present)
        object.__setattr__(self, "valid", np.asarray(self.valid).astype(np.uint8) * present)


class ForwardResult(NamedTuple):
    logits: np.ndarray  # (N, 5) per slot, from each slot's normalised state
    center_logits: np.ndarray
    center_probs: np.ndarray
    prediction: int
    tokens: np.ndarray
    Z: np.ndarray
    alpha: np.ndarray
    h: np.ndarray  # (N, C) raw state per slot
    hbar: np.ndarray  # (N, C)


def _scan_all(Z, valid, center, leak, no_elif):
    N, C = Z.shape
    h_all = np.zeros_like(Z)
    hbar_all = np.zeros_like(Z)
    if no_elif:
        return Z.copy(), Z.copy()
    state = ElifState.zeros(C, Z.dtype)
    for i in range(N):
        if valid[i] or i == center:
            state, hb = elif_step(state, Z[i], int(valid[i]), leak)
        else:
            state = ElifState.zeros(C, Z.dtype)
            hb = state.h.copy()
        h_all[i], hbar_all[i] = state.h, hb
    return h_all, hbar_all


def forward(window: Window, params, cfg: ModelConfig, mode="eval") -> ForwardResult:
    N = window.rasters.shape[0]
    if N != cfg.window_size:
        raise ParameterError(f"window has {N} slots, config expects {cfg.window_size}")
    center = N // 2
    idx = np.flatnonzero(window.present)
    tokens = np.zeros((N, cfg.fused_width), dtype=params.dtype)
    if idx.size:
        tokens[idx] = encode_epochs(window.rasters[idx], params, cfg, mode)
    return forward_tokens(tokens, window.valid, params, cfg, center)


def forward_tokens(tokens, valid, params, cfg: ModelConfig, center=None) -> ForwardResult:
    N = tokens.shape[0]
    center = N // 2 if center is None else center
    M = build_attention_mask(N, cfg.window_radius, valid)
    Z, alpha = ltam_forward(tokens, M, params)
    h, hbar = _scan_all(Z, valid, center, cfg.leak, cfg.no_elif)
    logits, probs = classify(hbar, params)
    return ForwardResult(
        logits, logits[center], probs[center], int(np.argmax(logits[center])), tokens, Z, alpha, h, hbar
    )


# --------------------------------------------------------------------------
# NCKP checkpoints

NCKP_MAGIC = b"NCKP"
NCKP_VERSION = 1
_CFG_FMT = "<3I5I2d2I"


def _flags(cfg: ModelConfig) -> int:
    return (
        int(cfg.dense_input)
        | int(cfg.single_branch) << 1
        | int(cfg.no_elif) << 2
        | int(cfg.pooling == "mean") << 3
    )


def encode_checkpoint(params: ModelParams, cfg: ModelConfig) -> bytes:
    check_params(params, cfg)
    prof = cfg.profile.encode("utf-8")
    out = [
        NCKP_MAGIC,
        struct.pack("<H", NCKP_VERSION),
        struct.pack(
            _CFG_FMT,
            *cfg.kernel_sizes,
            cfg.branch_width,
            cfg.fused_width,
            cfg.gate_reduction,
            cfg.attn_dim,
            cfg.window_radius,
            cfg.leak,
            cfg.fire_threshold,
            cfg.n_classes,
            cfg.T_b,
        ),
        struct.pack("<B", _flags(cfg)),
        struct.pack("<H", len(prof)),
        prof,
    ]
    for name in param_shapes(cfg):
        a = np.asarray(params[name], dtype="<f4")
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


def decode_checkpoint(buf: bytes, expect: ModelConfig | None = None):
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(buf):
            raise FormatError(f"truncated checkpoint reading {what} at offset {off}")
        b = buf[off : off + n]
        off += n
        return b

    if take(4, "magic") != NCKP_MAGIC:
        raise FormatError("bad NCKP magic at offset 0")
    (ver,) = struct.unpack("<H", take(2, "version"))
    if ver != NCKP_VERSION:
        raise FormatError(f"unsupported NCKP version {ver}")
    v = struct.unpack(_CFG_FMT, take(struct.calcsize(_CFG_FMT), "config"))
    (flags,) = struct.unpack("<B", take(1, "flags"))
    (lp,) = struct.unpack("<H", take(2, "profile length"))
    profile = take(lp, "profile").decode("utf-8")
    cfg = ModelConfig(
        kernel_sizes=v[0:3], branch_width=v[3], fused_width=v[4], gate_reduction=v[5],
        attn_dim=v[6], window_radius=v[7], leak=v[8], fire_threshold=v[9],
        n_classes=v[10], T_b=v[11], profile=profile,
        pooling="mean" if flags & 8 else "attention",
        dense_input=bool(flags & 1), single_branch=bool(flags & 2), no_elif=bool(flags & 4),
    )
    params = ModelParams()
    while off < len(buf):
        (ln,) = struct.unpack("<H", take(2, "name length"))
        name = take(ln, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        count = int(np.prod(dims)) if rank else 1
        a = np.frombuffer(take(4 * count, f"values of {name}"), dtype="<f4").reshape(dims)
        params[name] = a.astype(np.float32)
    check_params(params, cfg)
    if expect is not None:
        for f in fields(ModelConfig):
            if f.name == "profile":
                continue
            if getattr(expect, f.name) != getattr(cfg, f.name):
                raise FormatError(
                    f"checkpoint config mismatch on {f.name}: "
                    f"{getattr(cfg, f.name)!r} != {getattr(expect, f.name)!r}"
                )
    return params, cfg


def save_checkpoint(params: ModelParams, cfg: ModelConfig, path) -> None:
    Path(path).write_bytes(encode_checkpoint(params, cfg))


def load_checkpoint(path, expect: ModelConfig | None = None):
    return decode_checkpoint(Path(path).read_bytes(), expect)
