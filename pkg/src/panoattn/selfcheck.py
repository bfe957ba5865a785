"""Fast built-in property checks, grouped into suites.

Each check returns ``(ok, detail)``; the runner collects them into a table and
keeps the first failure with the values that broke it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention as A
from . import tensor as T
from .geometry import SphericalPoint, build_grid, cart_to_sph, chord_distance, sph_to_cart
from .metrics import compute, evaluate
from .oracle import gradcheck_tensors, naive_eg_msa
from .tensor import Tensor

SUITES = ("geometry", "tensor", "erpe", "das", "eaar", "oracle", "metrics", "flops")


@dataclass
class CheckResult:
    suite: str
    name: str
    ok: bool
    detail: str


def _close(got, want, tol) -> tuple[bool, str]:
    err = float(np.max(np.abs(np.asarray(got, dtype=np.float64) - np.asarray(want, dtype=np.float64))))
    return err <= tol, f"max abs err {err:.3e} (tol {tol:g})"


# -- geometry ---------------------------------------------------------------


def _geo_round_trip():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        p = SphericalPoint(rng.uniform(0.1, 5), rng.uniform(0, 2 * math.pi), rng.uniform(0.05, math.pi - 0.05))
        q = cart_to_sph(*sph_to_cart(p))
        worst = max(worst, abs(q.rho - p.rho), abs(q.theta - p.theta), abs(q.phi - p.phi))
    return worst < 1e-12, f"worst round-trip err {worst:.3e}"


def _geo_chord():
    a = SphericalPoint(1.0, 0.0, math.pi / 2)
    b = SphericalPoint(1.0, math.pi, math.pi / 2)
    return _close(chord_distance(a, b), 2.0, 1e-12)


def _geo_grid():
    g = build_grid(2, 4)
    return _close(np.concatenate([g.theta, g.phi]),
                  [math.pi / 4, 3 * math.pi / 4, 5 * math.pi / 4, 7 * math.pi / 4, math.pi / 4, 3 * math.pi / 4], 1e-15)


# -- tensor -----------------------------------------------------------------


def _tensor_gradcheck():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True, name="x")
    w = Tensor(rng.normal(size=(4, 2)), requires_grad=True, name="w")

    def loss():
        return T.sum(T.gelu(T.layer_norm(T.matmul(x, w), Tensor(np.ones(2)), Tensor(np.zeros(2)))))

    rep = gradcheck_tensors(loss, [x, w])
    worst = max(r["max_rel"] for r in rep)
    return worst < 1e-5, f"max rel err {worst:.3e}"


def _tensor_matmul_macs():
    with T.MacCounter() as mc:
        T.matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((2, 4, 5))))
    return mc.macs == 2 * 3 * 4 * 5, f"counted {mc.macs}, expected {2 * 3 * 4 * 5}"


# -- erpe -------------------------------------------------------------------


def _erpe(h, w, axis, rho=0.1):
    return A.build_erpe(build_grid(h, w), axis, A.AttentionConfig(1, 1, rho=rho)).matrices


def _erpe_antisymmetry():
    worst = 0.0
    for axis in A.Axis:
        e = _erpe(6, 12, axis)
        worst = max(worst, float(np.max(np.abs(e + np.swapaxes(e, -1, -2)))))
        worst = max(worst, float(np.max(np.abs(np.diagonal(e, axis1=-2, axis2=-1)))))
    return worst == 0.0, f"max |E + E^T| or |diag| = {worst:.3e}"


def _erpe_separable():
    g = build_grid(6, 12)
    e = _erpe(6, 12, A.Axis.HORIZONTAL)
    ratio = e[:, 0, 3] / np.sin(g.phi)
    return _close(ratio, np.full(6, ratio[0]), 1e-12)


def _erpe_seam():
    e = np.abs(_erpe(4, 360, A.Axis.HORIZONTAL)[1])
    return _close(e[0, 359], e[0, 1], 1e-12)


def _erpe_oracle():
    from .oracle import loop_erpe

    e = _erpe(4, 8, A.Axis.HORIZONTAL)
    return _close(e[2], loop_erpe(4, 8, True, 0.1, 2), 1e-14)


# -- das --------------------------------------------------------------------


def _das_range():
    rng = np.random.default_rng(2)
    s = rng.normal(scale=10.0, size=(2000, 16)) * rng.choice([1e-6, 1.0, 1e6], size=(2000, 1))
    cfg = A.AttentionConfig(1, 1)
    out = A.das(Tensor(s), "h", cfg).data
    ok = bool(out.min() >= 0.0 and out.max() <= 1.0)
    return ok, f"range [{out.min():.3e}, {out.max():.3e}]"


def _das_symmetry():
    rng = np.random.default_rng(3)
    s = rng.normal(size=(100, 8))
    cfg = A.AttentionConfig(1, 1)
    return _close(A.das(Tensor(s), "v", cfg).data, A.das(Tensor(-s), "v", cfg).data, 1e-12)


def _das_example():
    cfg = A.AttentionConfig(1, 1)
    return _close(A.das(Tensor(np.array([[1.0, 0.0]])), "h", cfg).data, [[1.0, 0.0]], 1e-7)  # eps in the L1 denominator


# -- eaar -------------------------------------------------------------------


def _eaar_range():
    rng = np.random.default_rng(4)
    cfg = A.AttentionConfig(1, 1)
    m = A.window_importance(Tensor(rng.normal(size=(7, 5, 5))), cfg).data
    ok = bool(m.min() >= 0.5 and m.max() == 1.0)
    return ok, f"min {m.min():.3f}, max {m.max():.3f}"


def _eaar_scale():
    rng = np.random.default_rng(5)
    cfg = A.AttentionConfig(1, 1)
    s = rng.normal(size=(6, 4, 4))
    return _close(A.window_importance(Tensor(s), cfg).data, A.window_importance(Tensor(3.5 * s), cfg).data, 1e-15)


def _eaar_blend():
    rng = np.random.default_rng(6)
    a, z = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    m = np.array([[1.0], [0.5], [0.75]])
    return _close(A.eaar_blend(Tensor(a), Tensor(z), m).data, m * a + (1 - m) * z, 1e-15)


# -- oracle -----------------------------------------------------------------


def _oracle_equivalence():
    worst = 0.0
    rng = np.random.default_rng(7)
    for h, w, heads, axis in [(4, 6, 2, "h"), (5, 3, 1, "v"), (2, 8, 4, "h"), (6, 4, 2, "v")]:
        cfg = A.AttentionConfig(heads, 2)
        params = A.AttnParams.init(cfg.channels, rng)
        z = Tensor(rng.normal(size=(h, w, cfg.channels)))
        grid = build_grid(h, w)
        fast = A.eg_msa(z, axis, grid, params, cfg).data
        worst = max(worst, float(np.max(np.abs(fast - naive_eg_msa(z, axis, grid, params, cfg)))))
    return worst < 1e-10, f"max abs diff {worst:.3e}"


# -- metrics ----------------------------------------------------------------


def _metrics_affine():
    g = np.random.default_rng(8).uniform(1, 10, size=(8, 16))
    _, m = evaluate(2.5 * g + 0.7, g)
    return m.abs_rel < 1e-9, f"abs_rel {m.abs_rel:.3e}"


def _metrics_delta():
    g = np.random.default_rng(9).uniform(1, 5, size=(4, 4))
    m = compute(1.3 * g, g)
    return (m.delta1, m.delta2) == (0.0, 1.0), f"delta1 {m.delta1}, delta2 {m.delta2}"


# -- flops ------------------------------------------------------------------


def _flops_audit():
    rng = np.random.default_rng(10)
    bad = []
    for h, w, heads in [(4, 8, 2), (6, 6, 1), (3, 10, 2)]:
        cfg = A.AttentionConfig(heads, 2)
        params = A.AttnParams.init(cfg.channels, rng)
        z = Tensor(rng.normal(size=(h, w, cfg.channels)))
        for axis in A.Axis:
            with T.MacCounter() as mc:
                A.eg_msa(z, axis, build_grid(h, w), params, cfg)
            want = A.flop_formula(h, w, cfg.channels, axis)
            if mc.by_label.get("attention", 0) != want:
                bad.append(f"{h}x{w} {axis.value}: {mc.by_label.get('attention', 0)} != {want}")
    return not bad, "; ".join(bad) or "all shapes match"


CHECKS: dict[str, list[tuple[str, Callable[[], tuple[bool, str]]]]] = {
    "geometry": [("round trip", _geo_round_trip), ("antipodal chord", _geo_chord), ("pixel centers", _geo_grid)],
    "tensor": [("gradcheck", _tensor_gradcheck), ("matmul macs", _tensor_matmul_macs)],
    "erpe": [("antisymmetry", _erpe_antisymmetry), ("sin separability", _erpe_separable),
             ("cyclic seam", _erpe_seam), ("loop oracle", _erpe_oracle)],
    "das": [("range [0,1]", _das_range), ("even symmetry", _das_symmetry), ("one-hot row", _das_example)],
    "eaar": [("range and max", _eaar_range), ("scale invariance", _eaar_scale), ("blend", _eaar_blend)],
    "oracle": [("vectorized vs loop", _oracle_equivalence)],
    "metrics": [("affine alignment", _metrics_affine), ("delta thresholds", _metrics_delta)],
    "flops": [("attention macs", _flops_audit)],
}


def run(suites=None) -> list[CheckResult]:
    names = SUITES if not suites else list(suites)
    unknown = [s for s in names if s not in CHECKS]
    if unknown:
        raise ValueError(f"unknown suite(s) {unknown}; choose from {', '.join(SUITES)}")
    results = []
    for suite in names:
        for name, fn in CHECKS[suite]:
            try:
                ok, detail = fn()
            except Exception as exc:  # a crashing check is a failing check
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            results.append(CheckResult(suite, name, bool(ok), detail))
    return results


def format_table(results: list[CheckResult]) -> str:
    w = max([len(f"{r.suite}/{r.name}") for r in results] + [5])
    lines = [f"{'check':<{w}}  result  detail"]
    for r in results:
        lines.append(f"{r.suite + '/' + r.name:<{w}}  {'PASS' if r.ok else 'FAIL':<6}  {r.detail}")
    return "\n".join(lines)
