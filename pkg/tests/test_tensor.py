import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tripletnet import tensor as T
from tripletnet.tensor import Parameter, ShapeError, Tape, TapeError, Tensor, backward, grad_check

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def mat(rows, cols):
    return arrays(np.float64, (rows, cols), elements=finite)


def conv_oracle(x, k, stride):
    # direct sliding-window sum, no vectorization
    B, C, H, W = x.shape
    F, _, kh, kw = k.shape
    Ho, Wo = (H - kh) // stride + 1, (W - kw) // stride + 1
    out = np.zeros((B, F, Ho, Wo))
    for b in range(B):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                acc += x[b, c, i * stride + u, j * stride + v] * k[f, c, u, v]
                    out[b, f, i, j] = acc
    return out


# ---------------------------------------------------------------- matmul

def test_matmul_hand_example():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_identity_and_zero(rng):
    A = rng.normal(size=(3, 3))
    np.testing.assert_array_equal(T.matmul(np.eye(3), A).data, A)
    np.testing.assert_array_equal(T.matmul(A, np.zeros((3, 3))).data, np.zeros((3, 3)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 2)))


@given(mat(3, 4), mat(4, 2), mat(2, 5))
def test_matmul_associative(a, b, c):
    left = T.matmul(T.matmul(a, b), c).data
    right = T.matmul(a, T.matmul(b, c)).data
    scale = np.abs(a).max() * np.abs(b).max() * np.abs(c).max() * 8 + 1e-300
    assert np.max(np.abs(left - right)) <= 1e-9 * max(scale, 1.0)


# ---------------------------------------------------------------- conv2d

def test_conv_identity_kernel(rng):
    x = rng.normal(size=(2, 1, 5, 4))
    np.testing.assert_array_equal(T.conv2d(x, np.ones((1, 1, 1, 1))).data, x)


def test_conv_zero_kernel(rng):
    x = rng.normal(size=(2, 3, 5, 5))
    assert not T.conv2d(x, np.zeros((4, 3, 3, 3)), 2).data.any()


def test_conv_3x3_by_2x2_direct_sum():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    k = np.array([[[[1.0, -1.0], [2.0, 0.5]]]])
    # by hand: window [[0,1],[3,4]] -> 0 - 1 + 6 + 2 = 7, and so on
    np.testing.assert_allclose(T.conv2d(x, k).data[0, 0], [[7.0, 9.5], [14.5, 17.0]])


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_conv_matches_bruteforce(rng, stride):
    x = rng.normal(size=(2, 3, 7, 6))
    k = rng.normal(size=(4, 3, 3, 2))
    np.testing.assert_allclose(T.conv2d(x, k, stride).data, conv_oracle(x, k, stride), atol=1e-12)


def test_conv_kernel_larger_than_input():
    with pytest.raises(ShapeError):
        T.conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)))


# ---------------------------------------------------------------- relu

def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert not T.relu(Tensor(-np.arange(1.0, 5.0))).data.any()


def test_relu_gradient_away_from_kink():
    p = Parameter([-2.0, -0.3, 0.4, 3.0])
    with Tape() as tape:
        out = T.sum(T.relu(p))
    backward(tape, out)
    np.testing.assert_array_equal(p.grad, [0, 0, 1, 1])
    assert grad_check(lambda ps: T.sum(T.relu(ps[0])), [p]) < 1e-10


def test_relu_subgradient_at_zero_is_zero():
    p = Parameter([0.0])
    with Tape() as tape:
        out = T.sum(T.relu(p))
    backward(tape, out)
    assert p.grad[0] == 0.0


# ---------------------------------------------------------------- cross-entropy

def test_ce_uniform_logits():
    out = T.softmax_cross_entropy(np.zeros((3, 21)), [0, 5, 20])
    assert out.item() == pytest.approx(math.log(21), abs=1e-12)
    assert out.item() == pytest.approx(3.0445, abs=1e-4)


def test_ce_saturated():
    logits = np.zeros((2, 4))
    logits[0, 1] = logits[1, 3] = 1000.0
    assert T.softmax_cross_entropy(logits, [1, 3]).item() == pytest.approx(0.0, abs=1e-12)


def test_ce_matches_high_precision_value():
    # 40-digit evaluation of the mean negative log-softmax for these logits
    logits = [[0.3, -1.2, 2.5], [1.7, 0.4, -0.9]]
    val = T.softmax_cross_entropy(logits, [2, 0]).item()
    assert val == pytest.approx(0.2124159896266004867607799, abs=1e-14)


def test_ce_label_out_of_range():
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(np.zeros((2, 3)), [-1, 0])


@given(mat(3, 5), st.lists(st.integers(0, 4), min_size=3, max_size=3), st.floats(-100, 100))
def test_ce_shift_invariance(logits, labels, c):
    a = T.softmax_cross_entropy(logits, labels).item()
    b = T.softmax_cross_entropy(logits + c, labels).item()
    assert abs(a - b) <= 1e-9


# ---------------------------------------------------------------- cosine distance

@pytest.mark.parametrize("u,v,expected", [
    ((1.0, 0.0), (1.0, 0.0), 0.0),
    ((1.0, 0.0), (0.0, 1.0), 1.0),
    ((1.0, 0.0), (-1.0, 0.0), 2.0),
])
def test_cosine_examples(u, v, expected):
    assert T.cosine_distance(Tensor(u), Tensor(v)).item() == pytest.approx(expected, abs=1e-15)


def test_cosine_zero_vector_is_finite():
    p = Parameter(np.zeros(4))
    with Tape() as tape:
        out = T.cosine_distance(p, Tensor([1.0, 2.0, 3.0, 4.0]))
    backward(tape, out)
    assert out.item() == pytest.approx(1.0)
    assert np.isfinite(p.grad).all()


@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite))
def test_cosine_range(u, v):
    assume(np.linalg.norm(u) > 0 and np.linalg.norm(v) > 0)
    d = T.cosine_distance(u, v).item()
    assert 0.0 <= d <= 2.0


@given(arrays(np.float64, 8, elements=finite), st.floats(1e-6, 1e3))
def test_cosine_self_distance(u, scale):
    assume(np.linalg.norm(u) > 0)
    u = u / np.linalg.norm(u) * scale
    assert T.cosine_distance(u, u).item() <= 1e-12


def test_pairwise_cosine_matches_scalar(rng):
    x = rng.normal(size=(5, 3))
    D = T.pairwise_cosine_distance(x)
    for i in range(5):
        for j in range(5):
            assert D[i, j] == pytest.approx(T.cosine_distance(x[i], x[j]).item(), abs=1e-12)


# ---------------------------------------------------------------- tape / backward

def test_square_gradient():
    x = Parameter(3.0)
    with Tape() as tape:
        y = x * x
    backward(tape, y)
    assert x.grad == 6.0


def test_constant_function_zero_gradient():
    x = Parameter([1.0, 2.0])
    other = Parameter([5.0])
    with Tape() as tape:
        y = T.sum(Tensor([1.0, 2.0]) * 3.0) + T.sum(other)
    backward(tape, y)
    assert not x.grad.any()
    assert other.grad[0] == 1.0


def test_tape_single_use():
    x = Parameter(2.0)
    with Tape() as tape:
        y = x * x
    backward(tape, y)
    with pytest.raises(TapeError):
        backward(tape, y)
    with pytest.raises(TapeError):
        with tape:
            pass


def test_output_not_on_tape():
    x = Parameter(2.0)
    with Tape():
        y = x * x
    with Tape() as other:
        _ = x * 3.0
    with pytest.raises(TapeError):
        backward(other, y)


def test_nonscalar_output_rejected():
    x = Parameter([1.0, 2.0])
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(TapeError):
        backward(tape, y)


def test_reverse_replay_order():
    seen = []
    x = Parameter(1.5)
    with Tape() as tape:
        a = x * 2.0
        b = T.exp(a)
        c = T.sum(b)
    for k, (out, _, fn) in enumerate(tape.entries):
        def wrapped(g, fn=fn, k=k):
            seen.append(k)
            return fn(g)
        tape.entries[k] = (out, _, wrapped)
    backward(tape, c)
    assert seen == [2, 1, 0]


def test_gradients_accumulate_across_uses():
    x = Parameter(2.0)
    with Tape() as tape:
        y = x * x + x * 3.0
    backward(tape, y)
    assert x.grad == 7.0


def test_no_tape_records_nothing():
    x = Parameter([1.0])
    y = T.sum(x * 2.0)
    assert y.item() == 2.0 and not x.grad.any()


# ---------------------------------------------------------------- grad_check

def test_grad_check_linear_exact():
    p = Parameter(np.array([0.3, -1.2, 4.0]))
    w = Tensor([2.0, -1.0, 0.5])
    assert grad_check(lambda ps: T.sum(ps[0] * w), [p]) < 1e-10


def test_grad_check_cubic():
    p = Parameter(1.0)
    assert grad_check(lambda ps: ps[0] * ps[0] * ps[0], [p], eps=1e-5) < 1e-4


def test_grad_check_restores_point(rng):
    p = Parameter(rng.normal(size=(3, 2)))
    before = p.data.copy()
    grad_check(lambda ps: T.sum(T.exp(ps[0])), [p])
    np.testing.assert_array_equal(p.data, before)


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(lambda ps: ps[0], [Parameter(1.0)], eps=0.0)


def test_small_network_gradients(rng):
    W1 = Parameter(rng.normal(size=(5, 7)), "w1")
    b1 = Parameter(rng.normal(size=7) * 0.1, "b1")
    W2 = Parameter(rng.normal(size=(7, 3)), "w2")
    x = Tensor(rng.normal(size=(4, 5)))
    y = np.array([0, 2, 1, 2])

    def f(ps):
        h = T.relu(T.add(T.matmul(x, ps[0]), ps[1]))
        return T.softmax_cross_entropy(T.matmul(h, ps[2]), y)

    assert grad_check(f, [W1, b1, W2]) < 1e-4


# per-op finite-difference sweep on random inputs of magnitude <= 10

def _weights(shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


OPS = {
    "add": (lambda a, b: T.add(a, b), [(3, 4), (1, 4)]),
    "sub": (lambda a, b: T.sub(a, b), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: T.mul(a, b), [(3, 4), (4,)]),
    "neg": (lambda a: T.neg(a), [(2, 3)]),
    "matmul": (lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)]),
    "sum_axis": (lambda a: T.sum(a, axis=1), [(3, 4)]),
    "mean_axis": (lambda a: T.mean(a, axis=0), [(3, 4)]),
    "reshape": (lambda a: T.reshape(a, (4, 3)), [(3, 4)]),
    "take": (lambda a: T.take(a, np.array([2, 0, 2])), [(3, 4)]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [(3, 2), (3, 3)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
@given(seed=st.integers(0, 2**31 - 1))
def test_op_gradients(name, seed):
    fn, shapes = OPS[name]
    r = np.random.default_rng(seed)
    params = [Parameter(r.uniform(-10, 10, size=s)) for s in shapes]
    out_shape = fn(*params).shape
    w = _weights(out_shape, seed)
    assert grad_check(lambda ps: T.sum(fn(*ps) * w), params) < 1e-4


@given(arrays(np.float64, 6, elements=st.floats(-10, 10)))
def test_exp_gradient(x):
    # one Jacobian row at a time: summing e^10 terms would drown an e^-10 coordinate
    p = Parameter(x)
    for i in range(6):
        assert grad_check(lambda ps: T.take(T.exp(ps[0]), i), [p]) < 1e-4


@given(seed=st.integers(0, 2**31 - 1))
def test_relu_gradient_property(seed):
    x = np.random.default_rng(seed).uniform(-10, 10, size=(3, 4))
    assume(np.all(np.abs(x) > 1e-5))  # 10 * eps away from the kink
    assert grad_check(lambda ps: T.sum(T.relu(ps[0]) * _weights((3, 4))), [Parameter(x)]) < 1e-4


@given(seed=st.integers(0, 2**31 - 1))
def test_ce_gradient_property(seed):
    # Logit gaps near 20 leave softmax components around 1e-9, where rounding
    # in f swamps a 1e-6 step; the loss is smooth, so a wide step is exact enough.
    r = np.random.default_rng(seed)
    x, labels = r.uniform(-10, 10, size=(3, 5)), r.integers(0, 5, size=3)
    err = grad_check(lambda ps: T.softmax_cross_entropy(ps[0], labels), [Parameter(x)], eps=1e-2)
    assert err < 1e-4


@given(seed=st.integers(0, 2**31 - 1))
def test_cosine_gradient_property(seed):
    r = np.random.default_rng(seed)
    u, v = r.uniform(-10, 10, size=(2, 5)), r.uniform(-10, 10, size=(2, 5))
    cos = 1 - T.cosine_distance(u, v).data
    assume(np.all(np.abs(cos) < 0.999))  # clip boundaries are not differentiable
    pu, pv = Parameter(u), Parameter(v)
    assert grad_check(lambda ps: T.sum(T.cosine_distance(ps[0], ps[1]) * Tensor([1.0, -0.7])), [pu, pv]) < 1e-4


@given(seed=st.integers(0, 2**31 - 1), stride=st.integers(1, 2))
def test_conv_gradient_property(seed, stride):
    r = np.random.default_rng(seed)
    x = Parameter(r.uniform(-10, 10, size=(2, 2, 5, 5)))
    k = Parameter(r.uniform(-10, 10, size=(3, 2, 3, 3)))
    w = _weights(T.conv2d(x, k, stride).shape, seed)
    assert grad_check(lambda ps: T.sum(T.conv2d(ps[0], ps[1], stride) * w), [x, k]) < 1e-4


def test_concurrent_forward_is_pure(rng):
    from concurrent.futures import ThreadPoolExecutor
    a = Tensor(rng.normal(size=(20, 20)))
    expected = T.matmul(a, a).data
    with ThreadPoolExecutor(4) as pool:
        outs = list(pool.map(lambda _: T.matmul(a, a).data, range(16)))
    for o in outs:
        np.testing.assert_array_equal(o, expected)
