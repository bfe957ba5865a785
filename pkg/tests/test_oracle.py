import ast
import inspect
import math

import numpy as np
import pytest

from panoattn import oracle
from panoattn import tensor as T
from panoattn.attention import AttentionConfig, AttnParams, Axis, eg_msa
from panoattn.geometry import build_grid
from panoattn.oracle import fd_gradient, naive_eg_msa, softmax_baseline_msa, softmax_weights
from panoattn.tensor import Tensor


def random_case(seed):
    rng = np.random.default_rng(seed)
    h, w = (int(v) for v in rng.integers(2, 9, size=2))
    heads = int(rng.choice([1, 2, 4]))
    d = int(rng.integers(1, 4))
    cfg = AttentionConfig(heads=heads, head_dim=d, rho=float(rng.uniform(0.05, 0.5)))
    p = AttnParams.init(cfg.channels, rng)
    for _, t in p.named():
        t.data += rng.normal(scale=0.3, size=t.shape)
    z = Tensor(rng.normal(size=(h, w, cfg.channels)))
    return z, build_grid(h, w), p, cfg


@pytest.mark.parametrize("seed", range(20))
def test_vectorized_matches_loop_oracle(seed):
    z, grid, p, cfg = random_case(seed)
    for ax in Axis:
        diff = np.max(np.abs(eg_msa(z, ax, grid, p, cfg).data - naive_eg_msa(z, ax, grid, p, cfg)))
        assert diff < 1e-10


def test_zero_weights_closed_form_both_paths(rng):
    cfg = AttentionConfig(heads=2, head_dim=2)
    p = AttnParams.init(4, rng)
    for name, t in p.named():
        if name != "ln_gamma":
            t.data[...] = 0.0
    grid = build_grid(5, 6)
    z = Tensor(rng.normal(size=(5, 6, 4)))
    s = np.sin(grid.phi)
    expected = (1 - np.maximum(s / s.max(), 0.5))[:, None, None] * z.data
    np.testing.assert_allclose(naive_eg_msa(z, "h", grid, p, cfg), expected, atol=1e-14)
    np.testing.assert_allclose(eg_msa(z, "h", grid, p, cfg).data, expected, atol=1e-14)


def test_degenerate_single_pixel(rng):
    cfg = AttentionConfig(heads=1, head_dim=3)
    p = AttnParams.init(3, rng)
    for name, t in p.named():
        if name != "ln_gamma":
            t.data[...] = 0.0
    out = naive_eg_msa(Tensor(rng.normal(size=(1, 1, 3))), "v", build_grid(1, 1), p, cfg)
    assert np.all(out == 0.0)


def test_oracle_shares_no_attention_code():
    tree = ast.parse(inspect.getsource(oracle))
    imported = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom) and node.module == "attention":
            imported.update(a.name for a in node.names)
    assert imported <= {"ConfigError"}


def test_fd_gradient_examples():
    g = fd_gradient(lambda x: float(np.sum(x * x)), [1.0, 2.0], h=1e-5)
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)
    assert abs(fd_gradient(lambda x: math.sin(x[0]), [0.0])[0] - 1.0) < 1e-10
    with pytest.raises(FloatingPointError):
        fd_gradient(lambda x: float("nan"), [1.0])


@pytest.mark.parametrize("f, df, x0", [
    (np.exp, np.exp, 0.3),
    (np.sin, np.cos, 1.1),
    (lambda x: x**3 - 2 * x, lambda x: 3 * x**2 - 2, 0.7),
])
def test_fd_gradient_is_second_order(f, df, x0):
    errs = [abs(fd_gradient(lambda v: float(f(v[0])), [x0], h=h)[0] - df(x0)) for h in (1e-2, 5e-3)]
    assert 3.0 < errs[0] / errs[1] < 5.0


def test_eg_msa_parameter_gradients_match_fd():
    z, grid, p, cfg = random_case(7)
    z.requires_grad = True
    weights = np.random.default_rng(0).normal(size=z.shape)
    report = oracle.gradcheck_tensors(
        lambda: T.sum(T.mul(eg_msa(z, "h", grid, p, cfg), weights)), [z] + [t for _, t in p.named()])
    for r in report:
        assert r["max_rel"] < 1e-4, r
        assert r["max_abs_small"] < 1e-7, r


def test_softmax_uniform_and_normalised(rng):
    q = Tensor(np.ones((2, 5, 3)))
    w = softmax_weights(q, q).data
    np.testing.assert_allclose(w, 1 / 5, atol=1e-15)
    w = softmax_weights(Tensor(rng.normal(size=(3, 6, 4))), Tensor(rng.normal(size=(3, 6, 4)))).data
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_baseline_shapes_match(rng):
    cfg = AttentionConfig(heads=2, head_dim=3)
    p = AttnParams.init(6, rng)
    z = Tensor(rng.normal(size=(4, 5, 6)))
    grid = build_grid(4, 5)
    for ax in Axis:
        assert softmax_baseline_msa(z, ax, p, heads=2).shape == eg_msa(z, ax, grid, p, cfg).shape


def test_gradcheck_steps_around_kinks():
    # |x| at x = 3e-6 with h = 1e-5: the -h side crosses the kink, the +h side is clean
    x = Tensor(np.array([3e-6, 0.5, -0.7]), requires_grad=True, name="x")
    rep = oracle.gradcheck_tensors(lambda: T.sum(T.abs(x)), [x], h=1e-5)[0]
    assert rep["one_sided"] == 1 and rep["kinks"] == 0 and rep["max_rel"] < 1e-9
    raw = oracle.gradcheck_tensors(lambda: T.sum(T.abs(x)), [x], h=1e-5, skip_kinks=False)[0]
    assert raw["kinks"] == raw["one_sided"] == 0 and raw["max_rel"] > 0.5


def test_gradcheck_one_sided_is_second_order():
    x = Tensor(np.array([2e-6]), requires_grad=True, name="x")
    rep = oracle.gradcheck_tensors(lambda: T.sum(T.add(T.abs(x), T.exp(T.mul(x, 50.0)))), [x], h=1e-5)[0]
    assert rep["one_sided"] == 1 and rep["max_rel"] < 1e-6


def test_gradcheck_excludes_entries_with_kinks_on_both_sides():
    # kinks at 0 and 1e-5 bracket x = 5e-6 within one step either way
    x = Tensor(np.array([5e-6, 0.3]), requires_grad=True, name="x")
    rep = oracle.gradcheck_tensors(lambda: T.sum(T.add(T.abs(x), T.abs(T.sub(x, 1e-5)))), [x], h=1e-5)[0]
    assert rep["kinks"] == 1 and rep["one_sided"] == 0 and rep["max_rel"] < 1e-9


def test_gradcheck_smooth_function_has_no_kinks(rng):
    x = Tensor(rng.normal(size=(3, 3)), requires_grad=True, name="x")
    rep = oracle.gradcheck_tensors(lambda: T.sum(T.gelu(T.matmul(x, x))), [x])[0]
    assert rep["kinks"] == rep["one_sided"] == 0 and rep["max_rel"] < 1e-6
