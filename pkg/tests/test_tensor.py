import zlib

import numpy as np
import pytest

from panoattn import tensor as T
from panoattn.oracle import fd_gradient
from panoattn.tensor import MacCounter, Tape, Tensor


def loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def test_matmul_examples(rng):
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor([[3, 4], [5, 6]])).data, [[3, 4], [5, 6]])
    assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 2))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, loop_matmul(a, b), atol=1e-12)


def test_matmul_batched_and_errors(rng):
    a, b = rng.normal(size=(4, 3, 5)), rng.normal(size=(4, 5, 2))
    out = T.matmul(Tensor(a), Tensor(b)).data
    for i in range(4):
        np.testing.assert_allclose(out[i], loop_matmul(a[i], b[i]), atol=1e-12)
    with pytest.raises(ValueError):
        T.matmul(Tensor(a), Tensor(rng.normal(size=(4, 4, 2))))
    with pytest.raises(ValueError):
        T.matmul(Tensor(a), Tensor(rng.normal(size=(3, 5, 2))))


def test_linear_examples(rng):
    x = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(T.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
    assert T.linear(Tensor([1.0, 1.0]), Tensor([[2.0], [3.0]]), Tensor([0.5])).data.tolist() == [5.5]
    w, b = rng.normal(size=(3, 2)), rng.normal(size=2)
    expected = loop_matmul(x, w) + b
    np.testing.assert_allclose(T.linear(Tensor(x), Tensor(w), Tensor(b)).data, expected, atol=1e-12)
    with pytest.raises(ValueError):
        T.linear(Tensor(x), Tensor(rng.normal(size=(2, 2))))


def test_mac_counts(rng):
    with MacCounter() as c:
        T.matmul(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 5))))
    assert c.macs == 3 * 4 * 5
    with MacCounter() as c:
        T.matmul(Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(2, 4, 5))))
    assert c.macs == 2 * 3 * 4 * 5
    with MacCounter() as c, T.mac_label("proj"):
        T.linear(Tensor(rng.normal(size=(6, 7, 3))), Tensor(rng.normal(size=(3, 8))))
    assert c.macs == 42 * 3 * 8 and c.by_label == {"proj": 42 * 3 * 8}


def test_layer_norm_examples(rng):
    np.testing.assert_array_equal(T.layer_norm(Tensor(np.full((2, 5), 3.0))).data, np.zeros((2, 5)))
    np.testing.assert_allclose(T.layer_norm(Tensor([1.0, 3.0]), eps=0.0).data, [-1.0, 1.0], atol=1e-15)
    x = rng.normal(3.0, 2.0, size=(6, 9))
    out = T.layer_norm(Tensor(x)).data
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    np.testing.assert_allclose(out, (x - mu) / np.sqrt(var + 1e-5), atol=1e-9)
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.std(axis=1), 1.0, atol=1e-5)


def test_backward_examples():
    x = Tensor([1.0, -2.0, 0.5], requires_grad=True)
    with Tape() as tape:
        loss = T.sum(x)
    T.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, np.ones(3))
    x = Tensor([1.0, -2.0], requires_grad=True)
    with Tape() as tape:
        loss = T.sum(T.mul(x, x))
    T.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [2.0, -4.0])


def test_backward_rejects_nonscalar_and_zero_fills_unreached():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        out = T.mul(x, 2.0)
    with pytest.raises(ValueError):
        T.backward(tape, out)
    with Tape() as tape:
        loss = T.sum(T.mul(x, 2.0))
    T.backward(tape, loss, wrt=[x, y])
    np.testing.assert_array_equal(y.grad, [0.0])


def test_tape_order_is_topological():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = T.cos(T.mul(x, 2.0))
        T.sum(T.add(y, x))
    seen = set()
    for node in tape.nodes:
        for t in node.inputs:
            assert not t.requires_grad or t is x or id(t) in seen
        seen.add(id(node.output))


def test_sign_carries_no_gradient():
    x = Tensor([-1.5, 0.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = T.sum(T.mul(T.sign(x), x))
    T.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [-1.0, 0.0, 1.0])


def test_max_routes_gradient_to_first_argmax():
    x = Tensor([[1.0, 5.0, 5.0], [2.0, 0.0, -1.0]], requires_grad=True)
    with Tape() as tape:
        loss = T.sum(T.max(x, axis=1))
    T.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [[0, 1, 0], [1, 0, 0]])


def test_clamp_min_gradient_mask():
    x = Tensor([0.2, 0.5, 0.9], requires_grad=True)
    with Tape() as tape:
        loss = T.sum(T.clamp_min(x, 0.5))
    T.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def _primitive_cases():
    return {
        "add": lambda x, c: T.add(x, c),
        "sub": lambda x, c: T.sub(c, x),
        "mul": lambda x, c: T.mul(x, c),
        "div": lambda x, c: T.div(c, T.add(T.mul(x, x), 1.0)),
        "abs": lambda x, c: T.abs(x),
        "cos": lambda x, c: T.cos(x),
        "versine": lambda x, c: T.versine(x, 1.3, 0.7),
        "sin": lambda x, c: T.sin(x),
        "sqrt": lambda x, c: T.sqrt(T.add(T.mul(x, x), 0.5)),
        "exp": lambda x, c: T.exp(x),
        "softplus": lambda x, c: T.softplus(x),
        "gelu": lambda x, c: T.gelu(x),
        "mean": lambda x, c: T.mean(T.mul(x, c), axis=(0, 2)),
        "sum_keep": lambda x, c: T.sum(T.mul(x, c), axis=1, keepdims=True),
        "max": lambda x, c: T.max(x, axis=(1, 2)),
        "clamp_min": lambda x, c: T.clamp_min(x, 0.1),
        "transpose": lambda x, c: T.mul(T.transpose(x, (2, 0, 1)), np.transpose(c, (2, 0, 1))),
        "reshape": lambda x, c: T.mul(T.reshape(x, (-1,)), c.reshape(-1)),
        "concat_split": lambda x, c: T.mul(T.concat(T.split(x, [1, 3], axis=-1)[::-1], axis=-1), c),
        "layer_norm": lambda x, c: T.layer_norm(x, T.Tensor(c[0, 0]), T.Tensor(c[1, 1])),
        "l1_normalize": lambda x, c: T.l1_normalize(x),
        "matmul": lambda x, c: T.matmul(x, T.Tensor(np.swapaxes(c, -1, -2))),
        "linear": lambda x, c: T.linear(x, T.Tensor(c[0].T), T.Tensor(c[1, 0, :3])),
        "gather": lambda x, c: T.gather(x, np.array([[0, 2], [2, 1]]), axis=1),
    }


@pytest.mark.parametrize("name", sorted(_primitive_cases()))
def test_primitive_gradients_match_finite_differences(name):
    op = _primitive_cases()[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for trial in range(10):
        x0 = rng.normal(size=(2, 3, 4))
        # keep kinked ops away from their kinks
        if name in ("abs", "l1_normalize"):
            x0 = np.sign(x0) * (np.abs(x0) + 0.1)
        if name == "clamp_min":
            x0 = np.where(np.abs(x0 - 0.1) < 0.05, x0 + 0.2, x0)
        c = rng.normal(size=(2, 3, 4))
        w = rng.normal(size=np.shape(op(Tensor(x0), c).data))
        x = Tensor(x0.copy(), requires_grad=True)
        with Tape() as tape:
            loss = T.sum(T.mul(op(x, c), w))
        T.backward(tape, loss, wrt=[x])
        numeric = fd_gradient(lambda v: float(np.sum(op(Tensor(v), c).data * w)), x0, h=1e-5)
        scale = np.maximum(np.abs(x.grad), 1e-3)
        worst = max(worst, float(np.max(np.abs(x.grad - numeric) / scale)))
    assert worst < 1e-6, f"{name}: max relative error {worst:.3g}"


def test_determinism(rng):
    a = rng.normal(size=(5, 6))
    b = rng.normal(size=(6, 3))

    def run():
        x = Tensor(a, requires_grad=True)
        with Tape() as tape:
            loss = T.sum(T.gelu(T.matmul(x, Tensor(b))))
        T.backward(tape, loss)
        return loss.data.tobytes(), x.grad.tobytes()

    assert run() == run()


def test_validating_tape_flags_nonfinite():
    x = Tensor([1.0, 0.0], requires_grad=True)
    with np.errstate(divide="ignore"):
        with pytest.raises(T.NonFiniteError):
            with Tape(validate=True):
                T.div(1.0, x)
        with Tape() as tape:
            T.log(T.mul(x, 1.0))
    assert tape.first_nonfinite() == (1, "log")
