import io
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emforge import numerics as nx
from emforge.numerics import GradTape, NonFiniteError, Tensor

from op_cases import OPS, fd_error
from oracles import central_diff, max_rel_err, naive_matmul


def T(x, dtype=np.float64):
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    a = T([[1, 2], [3, 4]])
    assert np.array_equal(nx.matmul(a, T(np.eye(2))).data, [[1, 2], [3, 4]])


def test_matmul_column():
    out = nx.matmul(T([[1, 2], [3, 4]]), T([[5], [6]]))
    assert np.array_equal(out.data, [[17], [39]])


def test_matmul_zero():
    rng = np.random.default_rng(0)
    out = nx.matmul(T(np.zeros((2, 2))), T(rng.normal(size=(2, 3))))
    assert not out.data.any()


def test_matmul_bitwise_equals_triple_loop():
    rng = np.random.default_rng(1)
    for _ in range(20):
        m, k, n = rng.integers(1, 9, size=3)
        a = rng.uniform(-2, 2, (m, k))
        b = rng.uniform(-2, 2, (k, n))
        got = nx.matmul(T(a), T(b)).data
        assert np.array_equal(got, naive_matmul(a, b))


def test_matmul_errors():
    with pytest.raises(ValueError, match="inner extents"):
        nx.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))
    with pytest.raises(TypeError, match="dtype"):
        nx.matmul(T(np.ones((2, 2))), T(np.ones((2, 2)), np.float32))


# ---------------------------------------------------------------------------
# softmax / layer norm
# ---------------------------------------------------------------------------

def test_softmax_examples():
    assert np.allclose(nx.softmax(T([0.0, 0.0])).data, [0.5, 0.5], atol=0, rtol=1e-15)
    assert np.allclose(nx.softmax(T([0.0, math.log(3)])).data, [0.25, 0.75], rtol=1e-15)


def test_softmax_shift_invariance():
    x = np.random.default_rng(2).uniform(-5, 5, (3, 7))
    np.testing.assert_allclose(nx.softmax(T(x)).data, nx.softmax(T(x + 12.5)).data, rtol=1e-13)


@given(st.integers(1, 40), st.integers(0, 2**32 - 1), st.sampled_from([np.float32, np.float64]))
@settings(max_examples=60, deadline=None)
def test_softmax_sums_to_one(n, seed, dtype):
    x = np.random.default_rng(seed).uniform(-80, 80, (4, n)).astype(dtype)
    out = nx.softmax(T(x, dtype)).data
    tol = 1e-6 if dtype == np.float32 else 1e-12
    assert (out > 0).all() or n > 1
    assert np.all(np.abs(out.sum(axis=-1) - 1) <= tol)


def test_softmax_empty_axis():
    with pytest.raises(ValueError, match="empty"):
        nx.softmax(T(np.zeros((2, 0))))


def test_layer_norm_examples():
    one, zero = T(np.ones(2)), T(np.zeros(2))
    assert not nx.layer_norm(T([[3.0, 3.0]]), one, zero).data.any()
    np.testing.assert_allclose(nx.layer_norm(T([1.0, -1.0]), one, zero, eps=1e-12).data, [1, -1], rtol=1e-10)
    np.testing.assert_allclose(nx.layer_norm(T([1.0, -1.0]), T([2.0, 2.0]), T([1.0, 1.0]), eps=1e-12).data,
                               [3, -1], rtol=1e-10)


def test_layer_norm_shape_mismatch():
    with pytest.raises(ValueError, match="gamma/beta"):
        nx.layer_norm(T(np.ones((2, 3))), T(np.ones(2)), T(np.zeros(3)))


# ---------------------------------------------------------------------------
# grad contract
# ---------------------------------------------------------------------------

def test_grad_square():
    x = T(3.0)
    with GradTape() as tape:
        tape.watch(x)
        loss = x * x
    assert nx.grad(loss, tape, {"x": x})["x"] == 6.0


def test_grad_of_constant_is_zero():
    x = T([1.0, 2.0])
    with GradTape() as tape:
        tape.watch(x)
        loss = nx.sum(T([4.0, 5.0]))
    assert np.array_equal(nx.grad(loss, tape, {"x": x})["x"], [0.0, 0.0])


def test_untouched_parameter_gets_zero():
    x, y = T([1.0, 2.0]), T([3.0])
    with GradTape() as tape:
        tape.watch({"x": x, "y": y})
        loss = nx.sum(x * x)
    g = nx.grad(loss, tape, {"x": x, "y": y})
    assert np.array_equal(g["y"], [0.0])
    assert np.array_equal(g["x"], [2.0, 4.0])


def test_grad_rejects_second_call():
    x = T(2.0)
    with GradTape() as tape:
        tape.watch(x)
        loss = x * x
    nx.grad(loss, tape, {"x": x})
    with pytest.raises(RuntimeError, match="already"):
        nx.grad(loss, tape, {"x": x})


def test_grad_errors():
    x, z = T([1.0, 2.0]), T(1.0)
    with GradTape() as tape:
        tape.watch(x)
        y = x * x
    with pytest.raises(ValueError, match="scalar"):
        nx.grad(y, tape, {"x": x})
    with GradTape() as tape:
        tape.watch(x)
        loss = nx.sum(x)
    with pytest.raises(ValueError, match="not tracked"):
        nx.grad(loss, tape, {"z": z})


def test_non_finite_is_surfaced():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, float("nan")])
    with pytest.raises(ValueError, match="non-positive"):
        nx.log(T([0.0]))
    x = T([800.0])
    with np.errstate(over="ignore"), GradTape() as tape:
        tape.watch(x)
        loss = nx.sum(nx.exp(x))
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        nx.grad(loss, tape, {"x": x})


def test_backward_replays_in_reverse_order():
    seen = []
    x = T([1.0])
    with GradTape() as tape:
        tape.watch(x)
        a = nx.record(x.data * 2, (x,), lambda g: (seen.append("a") or g * 2,))
        b = nx.record(a.data * 3, (a,), lambda g: (seen.append("b") or g * 3,))
        loss = nx.sum(b)
    assert nx.grad(loss, tape, {"x": x})["x"] == [6.0]
    assert seen == ["b", "a"]


def test_same_program_bitwise_identical():
    def run():
        rng = np.random.default_rng(7)
        w = T(rng.normal(size=(5, 4)))
        x = T(rng.normal(size=(3, 5)))
        with GradTape() as tape:
            tape.watch(w)
            h = nx.gelu(nx.matmul(x, w))
            loss = nx.mean(nx.logsumexp(h, axis=-1))
        return loss.data.tobytes(), nx.grad(loss, tape, {"w": w})["w"].tobytes()

    assert run() == run()


# ---------------------------------------------------------------------------
# finite-difference properties
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("op", OPS)
@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_op_gradient_matches_finite_differences(op, seed):
    assert fd_error(op, np.random.default_rng(seed)) <= 1e-4


def test_three_layer_network_matches_finite_differences():
    rng = np.random.default_rng(11)
    params = {
        "w1": rng.normal(0, 0.5, (6, 8)), "b1": rng.normal(0, 0.1, 8),
        "w2": rng.normal(0, 0.5, (8, 8)), "b2": rng.normal(0, 0.1, 8),
        "w3": rng.normal(0, 0.5, (8, 3)), "b3": rng.normal(0, 0.1, 3),
    }
    x = T(rng.uniform(-2, 2, (5, 6)))
    labels = np.eye(3)[rng.integers(3, size=5)]

    def forward(p):
        h = nx.tanh(nx.matmul(x, p["w1"]) + p["b1"])
        h = nx.gelu(nx.matmul(h, p["w2"]) + p["b2"])
        logits = nx.matmul(h, p["w3"]) + p["b3"]
        picked = nx.sum(nx.mul(logits, T(labels)), axis=-1)
        return nx.mean(nx.logsumexp(logits, axis=-1) - picked)

    tensors = {k: T(v) for k, v in params.items()}
    with GradTape() as tape:
        tape.watch(tensors)
        loss = forward(tensors)
    grads = nx.grad(loss, tape, tensors)
    for name, value in params.items():
        def f(v, name=name):
            return forward({**tensors, name: T(v)}).item()

        assert max_rel_err(grads[name], central_diff(f, value)) <= 1e-4, name


# ---------------------------------------------------------------------------
# EMT1
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("dtype,code", [(np.float32, 0), (np.float64, 1)])
def test_emt1_round_trip_bit_exact(dtype, code):
    arr = np.random.default_rng(3).normal(size=(2, 3, 4)).astype(dtype)
    arr[0, 0, 0] = -0.0
    buf = io.BytesIO()
    nx.write_tensor(buf, arr)
    raw = buf.getvalue()
    assert raw[:4] == b"EMT1"
    assert raw[4] == code and raw[5] == 3
    assert struct.unpack("<3Q", raw[6:30]) == (2, 3, 4)
    assert len(raw) == 30 + arr.nbytes
    back = nx.read_tensor(io.BytesIO(raw))
    assert back.dtype == dtype
    assert back.tobytes() == arr.tobytes()


def test_emt1_rejects_garbage():
    with pytest.raises(ValueError):
        nx.read_tensor(io.BytesIO(b"NOPE\x00\x00"))
    buf = io.BytesIO()
    nx.write_tensor(buf, np.ones(4))
    with pytest.raises(ValueError, match="truncated"):
        nx.read_tensor(io.BytesIO(buf.getvalue()[:-1]))


def test_tape_stats_track_peak():
    nx.tape_stats.reset()
    x = T(np.ones((10, 10)))
    with GradTape() as tape:
        tape.watch(x)
        loss = nx.sum(x * 2.0)
    assert nx.tape_stats.live_elements == 101
    nx.grad(loss, tape, {"x": x})
    assert nx.tape_stats.live_elements == 0
    assert nx.tape_stats.peak_elements == 101
