import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from needleforge import numerics as nx
from needleforge.numerics import ContractError, DimensionError, Tape, Tensor, grad_check, grad_check_many
from needleforge.numerics.tensor import make_op

RNG = np.random.default_rng(1234)


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def naive_conv1d(x, k, stride, padding):
    cin, L = x.shape
    cout, _, w = k.shape
    if padding == "same":
        Lout = -(-L // stride)
        total = max((Lout - 1) * stride + w - L, 0)
        pad = total // 2
    else:
        Lout = (L - w) // stride + 1
        pad = 0
    y = np.zeros((cout, Lout))
    for o in range(cout):
        for i in range(Lout):
            for c in range(cin):
                for j in range(w):
                    src = i * stride + j - pad
                    if 0 <= src < L:
                        y[o, i] += x[c, src] * k[o, c, j]
    return y


def naive_conv2d(x, k, stride, padding):
    cin, H, W = x.shape
    cout, _, kh, kw = k.shape
    if padding == "same":
        Ho, Wo = -(-H // stride), -(-W // stride)
        pt = max((Ho - 1) * stride + kh - H, 0) // 2
        pl = max((Wo - 1) * stride + kw - W, 0) // 2
    else:
        Ho, Wo = (H - kh) // stride + 1, (W - kw) // stride + 1
        pt = pl = 0
    y = np.zeros((cout, Ho, Wo))
    for o in range(cout):
        for i in range(Ho):
            for j in range(Wo):
                for c in range(cin):
                    for a in range(kh):
                        for b in range(kw):
                            r, s = i * stride + a - pt, j * stride + b - pl
                            if 0 <= r < H and 0 <= s < W:
                                y[o, i, j] += x[c, r, s] * k[o, c, a, b]
    return y


def weighted_sum(y: Tensor, seed: int = 0) -> Tensor:
    """Scalar loss with generic nonzero sensitivities to every output entry."""
    w = np.random.default_rng([seed, 7919]).normal(size=y.shape)
    return nx.tsum(y * Tensor(w))


# --- matmul -------------------------------------------------------------------------

def test_matmul_identity_and_projector():
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nx.matmul(Tensor(np.eye(2)), b).data, b.data)
    out = nx.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])


def test_matmul_matches_triple_loop():
    for _ in range(10):
        a, b = RNG.normal(size=(3, 4)), RNG.normal(size=(4, 2))
        assert np.max(np.abs(nx.matmul(Tensor(a), Tensor(b)).data - naive_matmul(a, b))) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# --- conv1d -------------------------------------------------------------------------

def test_conv1d_examples():
    x = Tensor([[1.0, 2.0, 3.0]])
    np.testing.assert_array_equal(nx.conv1d(x, Tensor([[[0.0, 1.0, 0.0]]])).data, [[1, 2, 3]])
    np.testing.assert_array_equal(nx.conv1d(x, Tensor([[[1.0, 0.0, -1.0]]])).data, [[-2, -2, 2]])
    assert nx.conv1d(Tensor(np.ones((1, 8))), Tensor(np.ones((1, 1, 3))), stride=2).shape == (1, 4)


@pytest.mark.parametrize("stride", [1, 2, 3])
@pytest.mark.parametrize("padding", ["same", "valid"])
@pytest.mark.parametrize("width", [1, 2, 3, 5])
def test_conv1d_matches_loop_oracle(stride, padding, width):
    x = RNG.normal(size=(3, 11))
    k = RNG.normal(size=(4, 3, width))
    got = nx.conv1d(Tensor(x), Tensor(k), stride, padding).data
    assert np.max(np.abs(got - naive_conv1d(x, k, stride, padding))) < 1e-12


def test_conv1d_batched_equals_per_sample():
    x = RNG.normal(size=(5, 2, 9))
    k = RNG.normal(size=(3, 2, 3))
    batched = nx.conv1d(Tensor(x), Tensor(k), 2).data
    for b in range(5):
        np.testing.assert_allclose(batched[b], naive_conv1d(x[b], k, 2, "same"), atol=1e-12)


@given(st.integers(1, 4), st.integers(1, 12))
@settings(max_examples=30, deadline=None)
def test_conv1d_identity_kernel_any_channel_count(channels, length):
    x = np.random.default_rng(channels * 100 + length).normal(size=(channels, length))
    k = np.zeros((channels, channels, 3))
    k[np.arange(channels), np.arange(channels), 1] = 1.0
    np.testing.assert_array_equal(nx.conv1d(Tensor(x), Tensor(k)).data, x)


def test_conv1d_errors():
    with pytest.raises(DimensionError):
        nx.conv1d(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 1, 3))), padding="valid")
    with pytest.raises(DimensionError):
        nx.conv1d(Tensor(np.ones((2, 4))), Tensor(np.ones((1, 3, 3))))
    with pytest.raises(ContractError):
        nx.conv1d(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 1, 3))), stride=0)


# --- conv2d -------------------------------------------------------------------------

def test_conv2d_examples():
    x = RNG.normal(size=(1, 2, 2))
    np.testing.assert_array_equal(nx.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data, x)
    x = RNG.normal(size=(1, 3, 3))
    out = nx.conv2d(Tensor(x), Tensor(np.full((1, 1, 3, 3), 1 / 9)), padding="valid")
    assert out.shape == (1, 1, 1)
    assert abs(out.data.item() - x.mean()) < 1e-12


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("padding", ["same", "valid"])
def test_conv2d_matches_loop_oracle(stride, padding):
    x = RNG.normal(size=(2, 5, 5))
    k = RNG.normal(size=(3, 2, 3, 3))
    got = nx.conv2d(Tensor(x), Tensor(k), stride, padding).data
    assert np.max(np.abs(got - naive_conv2d(x, k, stride, padding))) < 1e-12


# --- activations ------------------------------------------------------------------------

def test_activation_values():
    assert nx.activation("sigmoid", Tensor(0.0)).data == 0.5
    assert nx.activation("tanh", Tensor(0.0)).data == 0.0
    assert nx.activation("relu", Tensor(-3.0)).data == 0.0
    x = RNG.normal(size=100) * 10
    s = nx.sigmoid(Tensor(x)).data + nx.sigmoid(Tensor(-x)).data
    np.testing.assert_allclose(s, 1.0, atol=1e-15)
    np.testing.assert_allclose(nx.sigmoid(Tensor(x)).data, 1 / (1 + np.exp(-x)), atol=1e-15)


def test_activation_unknown_kind():
    with pytest.raises(ContractError):
        nx.activation("gelu", Tensor(1.0))


# --- backward ------------------------------------------------------------------------------

def test_backward_sum_and_square():
    x = Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
    with Tape() as tape:
        loss = nx.tsum(x)
    nx.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    x = Tensor(RNG.normal(size=5), requires_grad=True)
    with Tape() as tape:
        loss = nx.tsum(x * x)
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_accumulates_over_reuse():
    x = Tensor(RNG.normal(size=4), requires_grad=True)
    with Tape() as tape:
        loss = nx.tsum(x) + nx.tsum(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.full(4, 2.0))


def test_backward_non_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        tape.backward(y)


def test_tape_records_in_topological_order():
    x = Tensor(RNG.normal(size=3), requires_grad=True)
    with Tape() as tape:
        y = nx.tanh(x)
        z = y * y
        nx.tsum(z)
    produced = set()
    for node in tape.nodes:
        for inp in node.inputs:
            assert inp.requires_grad is False or id(inp) == id(x) or id(inp) in produced
        produced.update(id(o) for o in node.outputs)


# --- grad_check ---------------------------------------------------------------------------

def test_grad_check_sum_exact():
    assert grad_check(nx.tsum, RNG.normal(size=(3, 3))) < 1e-10


def test_grad_check_sigmoid():
    assert grad_check(lambda x: nx.tsum(nx.sigmoid(x)), RNG.normal(size=10)) < 1e-6


def test_grad_check_detects_wrong_backward():
    def doubled_square(x):
        return make_op("bad_square", x.data ** 2, (x,), lambda g: (4.0 * x.data * g,))

    err = grad_check(lambda x: nx.tsum(doubled_square(x)), RNG.uniform(0.5, 2.0, size=6))
    assert abs(err - 0.5) < 1e-6


def test_grad_check_contract_errors():
    with pytest.raises(ContractError):
        grad_check(lambda x: x * 2.0, np.ones(3))
    with pytest.raises(ContractError):
        grad_check(nx.tsum, np.ones(3), eps=0.0)


OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (nx.square(b) + 1.0),
    "matmul": lambda a, b: nx.matmul(a, b.transpose()),
    "broadcast_add": lambda a, b: a + nx.mean(b, axis=0),
    "concat": lambda a, b: nx.concat([a, b], axis=1),
    "stack": lambda a, b: nx.stack([a, b], axis=0),
    "power": lambda a, b: nx.power(nx.square(a) + 1.0, 1.5) + b,
}
UNARY = {
    "exp": nx.exp,
    "sigmoid": nx.sigmoid,
    "tanh": nx.tanh,
    "relu": nx.relu,
    "neg": lambda a: -a,
    "mean_axis": lambda a: nx.mean(a, axis=1),
    "reshape_transpose": lambda a: a.reshape(4, 3).transpose(),
    "getitem": lambda a: a[1:, ::2],
    "fancy_getitem": lambda a: a[np.array([0, 2, 2])],
    "unstack": lambda a: nx.unstack(a, 1)[2] * nx.unstack(a, 1)[0],
    "split": lambda a: nx.split(a, [1, 3], axis=1)[1],
    "unstack_single": lambda a: nx.unstack(a[:, :1], 1)[0],
    "split_single": lambda a: nx.split(a, [4], axis=1)[0],
    "pool": lambda a: nx.global_avg_pool(a, 0),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_binary_op_gradients(name):
    for seed in range(10):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=(3, 4)), r.normal(size=(3, 4))
        err = grad_check_many(lambda ts: weighted_sum(OPS[name](ts[0], ts[1]), seed), [a, b])
        assert err < 1e-4, (name, seed, err)


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name):
    for seed in range(10):
        x = np.random.default_rng(seed).normal(size=(3, 4))
        if name == "relu":
            x = np.where(np.abs(x) < 1e-2, 0.5, x)  # keep away from the kink
        err = grad_check(lambda t: weighted_sum(UNARY[name](t), seed), x)
        assert err < 1e-4, (name, seed, err)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradients(stride):
    for seed in range(10):
        r = np.random.default_rng(seed)
        x, k = r.normal(size=(2, 3, 9)), r.normal(size=(4, 3, 3))
        assert grad_check_many(lambda ts: weighted_sum(nx.conv1d(ts[0], ts[1], stride), seed), [x, k]) < 1e-4
        x2, k2 = r.normal(size=(2, 2, 5, 6)), r.normal(size=(3, 2, 3, 3))
        assert grad_check_many(lambda ts: weighted_sum(nx.conv2d(ts[0], ts[1], stride), seed), [x2, k2]) < 1e-4


def test_batch_norm_gradients_train_and_eval():
    for seed in range(10):
        r = np.random.default_rng(seed)
        x, g, b = r.normal(size=(4, 3, 5)), r.normal(size=(1, 3, 1)), r.normal(size=(1, 3, 1))
        running = (r.normal(size=(1, 3, 1)), r.uniform(0.5, 2.0, size=(1, 3, 1)))

        def f_train(ts):
            return weighted_sum(nx.batch_norm(ts[0], ts[1], ts[2], (0, 2), True)[0], seed)

        def f_eval(ts):
            return weighted_sum(nx.batch_norm(ts[0], ts[1], ts[2], (0, 2), False, running)[0], seed)

        assert grad_check_many(f_train, [x, g, b]) < 1e-4
        assert grad_check_many(f_eval, [x, g, b]) < 1e-4


def test_global_avg_pool_gradient_is_one_over_length():
    x = Tensor(RNG.normal(size=(3, 7)), requires_grad=True)
    with Tape() as tape:
        loss = nx.tsum(nx.global_avg_pool(x, 0))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, np.full((3, 7), 1 / 7))
    np.testing.assert_array_equal(nx.global_avg_pool(Tensor([[1.0, 3.0], [5.0, 7.0]])).data, [2, 6])


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20))
@settings(max_examples=50, deadline=None)
def test_forward_backward_finite(values):
    x = Tensor(np.array(values), requires_grad=True)
    with Tape() as tape:
        loss = nx.tsum(nx.tanh(x) * nx.sigmoid(x) + nx.relu(x))
    tape.backward(loss)
    assert np.all(np.isfinite(loss.data)) and np.all(np.isfinite(x.grad))
    assert x.grad.shape == x.shape
