import numpy as np
import pytest

from helpers import check_leaf_grads
from streamanchor import numerics as nx
from streamanchor.anchors import TaskKind
from streamanchor.data import LabeledSequence
from streamanchor.losses import LossSpec, sequence_loss


def leaf(x):
    return nx.Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def test_forward_examples():
    assert nx.forward_op("sigmoid", 0.0) == 0.5
    A = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(nx.forward_op("matmul", np.eye(3), A), A)
    assert nx.forward_op("conv1d", [1.0, 2.0, 3.0], [1.0], dilation=1).tolist() == [1, 2, 3]
    with pytest.raises(ValueError):
        nx.forward_op("nope", 1.0)


def test_backward_examples():
    x = leaf(3.0)
    with nx.Tape() as tape:
        y = x * x
    assert nx.backward(tape, y)[x] == 6.0
    x = leaf(2.0)
    with nx.Tape() as tape:
        y = nx.log(x)
    assert nx.backward(tape, y)[x] == 0.5
    assert x.grad == 0.5


def test_backward_needs_scalar():
    x = leaf([1.0, 2.0])
    with nx.Tape() as tape:
        y = x * 2
    with pytest.raises(nx.ShapeError):
        nx.backward(tape, y)


def test_no_tape_no_graph():
    x = leaf([1.0, 2.0])
    y = nx.sum(x * x)
    assert isinstance(y, nx.Tensor) and not y.requires_grad
    assert nx.sum(np.array([1.0, 2.0])) == 3.0


def test_shape_errors():
    with pytest.raises(nx.ShapeError):
        nx.add(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(nx.ShapeError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(nx.ShapeError):
        nx.conv1d(np.ones((5, 3)), np.ones((2, 4)))


def brute_conv(x, k, d):
    T, C = x.shape
    K = k.shape[0]
    out = np.zeros_like(x)
    for t in range(T):
        for j in range(K):
            s = t - (K - 1 - j) * d
            if s >= 0:
                out[t] += k[j] * x[s]
    return out


@pytest.mark.parametrize("d", [1, 2, 5])
def test_conv1d_matches_brute_force(d):
    rng = np.random.default_rng(d)
    x = rng.standard_normal((2, 23, 3))
    k = rng.standard_normal((4, 3))
    got = nx.conv1d(x, k, d)
    for b in range(2):
        assert np.allclose(got[b], brute_conv(x[b], k, d), atol=1e-13)


def test_single_layer_receptive_field():
    k, d = 5, 3
    x = np.zeros((40, 1))
    x[0] = 1.0
    out = nx.conv1d(x, np.ones((k, 1)), d)
    assert np.flatnonzero(out[:, 0]).max() + 1 == 1 + (k - 1) * d


UNARY = {
    "sigmoid": (nx.sigmoid, (-3, 3)),
    "tanh": (nx.tanh, (-2, 2)),
    "log": (nx.log, (0.2, 3)),
    "exp": (nx.exp, (-2, 2)),
    "pow": (lambda a: nx.pow(a, 2.5), (0.2, 2)),
    "relu": (nx.relu, (0.1, 2)),
    "clamp": (lambda a: nx.clamp(a, 1e-6, 1 - 1e-6), (0.05, 0.95)),
    "softmax": (lambda a: nx.softmax(a) * np.arange(1.0, 5.0), (-2, 2)),
    "reshape": (lambda a: nx.reshape(a, (2, 6)) * np.arange(12.0).reshape(2, 6), (-1, 1)),
    "slice": (lambda a: nx.take(a, (slice(None), slice(1, 3))) ** 2, (0.3, 1)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients_match_finite_differences(name):
    fn, (lo, hi) = UNARY[name]
    rng = np.random.default_rng(len(name))
    for _ in range(5):
        x = leaf(rng.uniform(lo, hi, (3, 4)))
        # signs flip some elements of relu's input away from the kink
        if name == "relu":
            x.data *= rng.choice([-1, 1], x.shape)
        assert check_leaf_grads(lambda: nx.sum(fn(x) * fn(x)), [x]) < 1e-5


BINARY = {
    "add": nx.add, "sub": nx.sub, "mul": nx.mul, "div": nx.div,
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("shape_b", [(3, 4), (4,), ()])
def test_binary_gradients_match_finite_differences(name, shape_b):
    rng = np.random.default_rng(7)
    a = leaf(rng.uniform(0.5, 2, (3, 4)))
    b = leaf(rng.uniform(0.5, 2, shape_b))
    f = BINARY[name]
    assert check_leaf_grads(lambda: nx.sum(nx.pow(f(a, b), 2)), [a, b]) < 1e-5


def test_matmul_conv_concat_stack_mean_gradients():
    rng = np.random.default_rng(11)
    a = leaf(rng.standard_normal((2, 5, 3)))
    w = leaf(rng.standard_normal((3, 4)))
    k = leaf(rng.standard_normal((3, 4)))
    bias = leaf(rng.standard_normal(4))

    def loss():
        h = nx.matmul(a, w) + bias
        c = nx.conv1d(h, k, 2)
        s = nx.stack([nx.mean(c, axis=1), nx.sum(h, axis=1)], axis=0)
        z = nx.concat([s, nx.tanh(s)], axis=-1)
        return nx.mean(z * z)

    assert check_leaf_grads(loss, [a, w, k, bias]) < 1e-5


def test_maximum_and_dropout_gradients():
    rng = np.random.default_rng(5)
    x = leaf(rng.uniform(-1, 1, 20))
    x.data[np.abs(x.data - 0.1) < 0.05] += 0.2

    def loss():
        m = nx.dropout(x, 0.3, np.random.default_rng(9), training=True)
        return nx.sum(nx.maximum(m, 0.1) ** 2)

    assert check_leaf_grads(loss, [x]) < 1e-5


def test_dropout_inverted_and_eval_identity():
    x = np.ones(10000)
    out = nx.dropout(nx.Tensor(x), 0.2, np.random.default_rng(0), training=True).data
    assert set(np.unique(out)) <= {0.0, 1.25}
    assert abs(out.mean() - 1.0) < 0.03
    t = nx.Tensor(x)
    assert nx.dropout(t, 0.2, None, training=False) is t
    with pytest.raises(ValueError):
        nx.dropout(t, 0.2, None, training=True)


def test_backward_is_linear():
    rng = np.random.default_rng(2)
    x = leaf(rng.uniform(0.2, 1.5, 7))
    f = lambda: nx.sum(nx.log(x) * x)
    g = lambda: nx.mean(nx.sigmoid(x * 3.0))
    with nx.Tape() as t1:
        l1 = f()
    g1 = nx.backward(t1, l1)[x]
    with nx.Tape() as t2:
        l2 = g()
    g2 = nx.backward(t2, l2)[x]
    with nx.Tape() as t3:
        l3 = f() + g()
    g3 = nx.backward(t3, l3)[x]
    assert np.max(np.abs(g3 - (g1 + g2))) < 1e-12


def test_gradients_bit_identical_across_runs():
    def run():
        rng = np.random.default_rng(4)
        x = leaf(rng.standard_normal((6, 3)))
        k = leaf(rng.standard_normal((2, 3)))
        with nx.Tape() as tape:
            loss = nx.mean(nx.sigmoid(nx.conv1d(x, k, 1)) ** 2)
        g = nx.backward(tape, loss)
        return g[x].tobytes() + g[k].tobytes()

    assert run() == run()


def test_safl_sequence_gradient_matches_finite_differences():
    spec = LossSpec("SAFL")
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        T = int(rng.integers(3, 30))
        y = np.zeros(T, dtype=np.int8)
        if rng.random() < 0.7:
            s = int(rng.integers(0, T))
            y[s:int(rng.integers(s, T)) + 1] = 1
        seq = LabeledSequence(np.zeros((T, 1)), y, 10.0, TaskKind.KWS, f"s{seed}")
        logits = leaf(rng.uniform(-3, 3, T))
        worst = max(worst, check_leaf_grads(
            lambda: sequence_loss(seq, nx.sigmoid(logits), spec), [logits]))
    assert worst < 1e-5
