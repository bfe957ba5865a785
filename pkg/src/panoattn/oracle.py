"""Brute-force references used to cross-check the vectorized code paths.

Nothing here reuses the attention module's math: the loop implementation
recomputes the bias from :func:`geometry.chord_distance` and evaluates every
product, norm and blend one scalar at a time.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import tensor as T
from .geometry import SphericalPoint, chord_distance
from .tensor import Tensor

# --------------------------------------------------------------------------
# scalar loop attention


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _loop_layer_norm(vec, gamma, beta, eps=1e-5):
    n = len(vec)
    mu = 0.0
    for a in vec:
        mu += a
    mu /= n
    var = 0.0
    for a in vec:
        var += (a - mu) * (a - mu)
    var /= n
    denom = math.sqrt(var + eps)
    out = []
    for c in range(n):
        xhat = (vec[c] - mu) / denom if denom > 0 else 0.0
        out.append(xhat * gamma[c] + beta[c])
    return out


def _loop_affine(vec, w, b):
    d_in, d_out = w.shape
    out = []
    for o in range(d_out):
        acc = b[o]
        for i in range(d_in):
            acc += vec[i] * w[i, o]
        out.append(acc)
    return out


def _sign(x):
    return (x > 0) - (x < 0)


def loop_erpe(h: int, w: int, horizontal: bool, rho: float, window: int) -> list[list[float]]:
    """Bias matrix of one window via chord distances between sphere points."""
    thetas = [(u + 0.5) * 2 * math.pi / w for u in range(w)]
    phis = [(v + 0.5) * math.pi / h for v in range(h)]
    if horizontal:
        phi_i = phis[window]
        n = w
        out = [[0.0] * n for _ in range(n)]
        for m in range(n):
            for k in range(n):
                d = chord_distance(SphericalPoint(rho, thetas[m], phi_i), SphericalPoint(rho, thetas[k], phi_i))
                out[m][k] = _sign(thetas[m] - thetas[k]) * d
        return out
    n = h
    out = [[0.0] * n for _ in range(n)]
    for m in range(n):
        for k in range(n):
            d = chord_distance(SphericalPoint(rho, 0.0, phis[m]), SphericalPoint(rho, 0.0, phis[k]))
            out[m][k] = _sign(phis[m] - phis[k]) * d
    return out


def naive_eg_msa(z, axis, grid, params, cfg) -> np.ndarray:
    """Scalar-loop evaluation of the geometry-biased stripe attention."""
    axis = getattr(axis, "value", str(axis)).lower()[0]
    horizontal = axis == "h"
    z = _arr(z)
    H, W, C = z.shape
    if C != cfg.heads * cfg.head_dim:
        from .attention import ConfigError

        raise ConfigError(f"channel extent {C} != heads*head_dim = {cfg.heads}*{cfg.head_dim}")
    J, d = cfg.heads, cfg.head_dim
    g, b = _arr(params.ln_gamma), _arr(params.ln_beta)
    wq, bq, wk, bk = _arr(params.wq), _arr(params.bq), _arr(params.wk), _arr(params.bk)
    wv, bv, wo, bo = _arr(params.wv), _arr(params.bv), _arr(params.wo), _arr(params.bo)

    n_windows = H if horizontal else W
    N = W if horizontal else H
    scale = 2.0 * cfg.rho_b * cfg.rho_b
    if horizontal:
        scale *= math.sin(cfg.phi_b) * math.sin(cfg.phi_b)

    inputs, attn_out, mean_abs = [], [], []
    for i in range(n_windows):
        xs = [list(z[i, p]) if horizontal else list(z[p, i]) for p in range(N)]
        f = [_loop_layer_norm(x, g, b) for x in xs]
        q = [_loop_affine(v, wq, bq) for v in f]
        k = [_loop_affine(v, wk, bk) for v in f]
        v_ = [_loop_affine(v, wv, bv) for v in f]
        erpe = loop_erpe(H, W, horizontal, cfg.rho, i) if cfg.use_erpe else [[0.0] * N for _ in range(N)]
        abs_total = 0.0
        heads_out = [[0.0] * C for _ in range(N)]
        for j in range(J):
            lo = j * d
            for m in range(N):
                row = []
                for n in range(N):
                    s = erpe[m][n]
                    for c in range(lo, lo + d):
                        s += q[m][c] * k[n][c]
                    row.append(s)
                    abs_total += abs(s)
                l1 = 0.0
                for s in row:
                    l1 += abs(s)
                l1 += cfg.eps_norm
                weights = [scale * (1.0 - math.cos(s / l1 * math.pi / 2)) for s in row]
                for c in range(lo, lo + d):
                    acc = 0.0
                    for n in range(N):
                        acc += weights[n] * v_[n][c]
                    heads_out[m][c] = acc
        inputs.append(xs)
        attn_out.append([_loop_affine(h_, wo, bo) for h_ in heads_out])
        mean_abs.append(abs_total / (J * N * N))

    top = max(mean_abs)
    if top == 0.0:
        importance = [1.0] * n_windows
    else:
        importance = [max(m / top, cfg.clamp_min) for m in mean_abs]

    out = np.zeros_like(z)
    for i in range(n_windows):
        m = importance[i] if cfg.use_eaar else 1.0
        for p in range(N):
            for c in range(C):
                val = m * attn_out[i][p][c] + (1.0 - m) * inputs[i][p][c]
                if horizontal:
                    out[i, p, c] = val
                else:
                    out[p, i, c] = val
    return out


# --------------------------------------------------------------------------
# finite differences


def fd_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradcheck_tensors(loss_fn: Callable[[], Tensor], tensors: list[Tensor], h: float = 1e-5,
                      floor: float = 1e-8, skip_kinks: bool = True) -> list[dict]:
    """Compare tape gradients of ``loss_fn()`` with finite differences.

    Returns one record per tensor with the max relative error (over entries
    with |analytic| >= floor) and the max absolute error elsewhere. With
    ``skip_kinks`` the branches taken by abs/clamp/max are fingerprinted: when
    the +h or the -h evaluation lands on a different branch than the
    unperturbed point, the entry falls back to the second-order one-sided
    stencil on the clean side (counted under ``one_sided``). Entries with no
    clean side are left out and counted under ``kinks``.
    """
    with T.Tape() as tape, T.BranchLog() as log:
        loss = loss_fn()
    T.backward(tape, loss, wrt=tensors)
    base = log.digest() if skip_kinks else None
    analytic = [t.grad.copy() for t in tensors]
    report = []
    for t, ga in zip(tensors, analytic):
        gn, straddled, one_sided = _fd_inplace(loss_fn, t, h, base)
        use = ~straddled
        big = (np.abs(ga) >= floor) & use
        small = (~big) & use
        rel = np.abs(ga - gn) / np.maximum(np.abs(ga), 1e-300)
        report.append({
            "name": t.name,
            "size": t.size,
            "max_rel": float(rel[big].max()) if big.any() else 0.0,
            "max_abs_small": float(np.abs(ga - gn)[small].max()) if small.any() else 0.0,
            "kinks": int(straddled.sum()),
            "one_sided": int(one_sided.sum()),
        })
    return report


def _eval(loss_fn, track: bool):
    if not track:
        return loss_fn().item(), None
    with T.BranchLog() as log:
        value = loss_fn().item()
    return value, log.digest()


def _fd_inplace(loss_fn, t: Tensor, h: float, base=None):
    flat = t.data.reshape(-1)
    grad = np.zeros(flat.size)
    straddled = np.zeros(flat.size, dtype=bool)
    one_sided = np.zeros(flat.size, dtype=bool)
    track = base is not None

    def at(i, orig, step):
        flat[i] = orig + step
        value, digest = _eval(loss_fn, track)
        flat[i] = orig
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite function value at coordinate {i} of {t.name}")
        return value, digest

    for i in range(flat.size):
        orig = flat[i]
        fp, dp = at(i, orig, h)
        fm, dm = at(i, orig, -h)
        grad[i] = (fp - fm) / (2.0 * h)
        if not track or (dp == base and dm == base):
            continue
        # one kink inside the stencil: difference on the side that stays on the base branch
        for sign, f1, d1 in ((1.0, fp, dp), (-1.0, fm, dm)):
            if d1 != base:
                continue
            f2, d2 = at(i, orig, 2.0 * sign * h)
            if d2 == base:
                f0 = _eval(loss_fn, False)[0]
                grad[i] = sign * (4.0 * f1 - f2 - 3.0 * f0) / (2.0 * h)
                one_sided[i] = True
                break
        else:
            straddled[i] = True
    return grad.reshape(t.shape), straddled.reshape(t.shape), one_sided.reshape(t.shape)


# --------------------------------------------------------------------------
# softmax baseline


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = T.sub(x, x.data.max(axis=axis, keepdims=True))
    e = T.exp(shifted)
    return T.div(e, T.sum(e, axis=axis, keepdims=True))


def softmax_weights(q: Tensor, k: Tensor) -> Tensor:
    d = q.shape[-1]
    return softmax(T.mul(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(d)))


def softmax_baseline_msa(z: Tensor, axis, params, heads: int) -> Tensor:
    """Plain softmax stripe-window attention: no bias, no DAS, no rearrangement."""
    horizontal = getattr(axis, "value", str(axis)).lower()[0] == "h"
    H, W, C = z.shape
    if C % heads:
        from .attention import ConfigError

        raise ConfigError(f"channel extent {C} not divisible by {heads} heads")
    d = C // heads
    with T.mac_label("attention"):
        x = z if horizontal else T.transpose(z, (1, 0, 2))
        nw, n, _ = x.shape
        f = T.layer_norm(x, params.ln_gamma, params.ln_beta)

        def split_heads(t):
            return T.transpose(T.reshape(t, (nw, n, heads, d)), (0, 2, 1, 3))

        q = split_heads(T.linear(f, params.wq, params.bq))
        k = split_heads(T.linear(f, params.wk, params.bk))
        v = split_heads(T.linear(f, params.wv, params.bv))
        a = T.matmul(softmax_weights(q, k), v)
        a = T.reshape(T.transpose(a, (0, 2, 1, 3)), (nw, n, C))
        out = T.linear(a, params.wo, params.bo)
    return out if horizontal else T.transpose(out, (1, 0, 2))
