import math

import numpy as np
import pytest

from smilesprop.nn import checkpoint, kernels, losses
from smilesprop.nn import functional as F
from smilesprop.nn.gradcheck import grad_check
from smilesprop.nn.optim import Adam, RMSprop
from smilesprop.nn.tensor import NonFiniteError, Tensor, no_grad, validation_mode

TOL = 1e-4
SEEDS = range(20)


def param(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


@pytest.fixture(params=["cython", "python"])
def backend(request):
    if request.param == "cython" and kernels.BACKEND != "cython":
        try:
            kernels.use_backend("cython")
        except ImportError:
            pytest.skip("compiled kernels not built")
    prev = kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(prev)


# autodiff engine

def test_fan_out_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = F.sum(F.add(F.mul(x, x), x))
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_shared_subexpression_reverse_order():
    x = Tensor(np.array(0.7), requires_grad=True)
    a = F.tanh(x)
    y = F.mul(F.mul(a, a), a)  # tanh^3
    y.backward()
    t = math.tanh(0.7)
    assert x.grad == pytest.approx(3 * t * t * (1 - t * t), rel=1e-12)


def test_validation_mode_flags_non_finite():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    with validation_mode(), pytest.raises(NonFiniteError):
        with np.errstate(divide="ignore"):
            F.log(x)
    with np.errstate(divide="ignore"):
        F.log(x)  # outside the block, no check


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = F.mul(x, 2.0)
    assert not y.requires_grad


# embedding

def test_embedding_lookup_and_pad_rows():
    table = Tensor(np.eye(4))
    out = F.embedding(np.array([[1, 2]]), table)
    np.testing.assert_array_equal(out.data[0], np.eye(4)[[1, 2]])
    pads = F.embedding(np.zeros((1, 270), int), Tensor(np.arange(8.0).reshape(4, 2)))
    assert (pads.data[0] == [0.0, 1.0]).all()


def test_embedding_gradient_counts_rows(rng):
    idx = rng.integers(0, 5, size=(3, 7))
    table = param(rng, 5, 2)
    F.sum(F.embedding(idx, table)).backward()
    counts = np.bincount(idx.ravel(), minlength=5)
    np.testing.assert_array_equal(table.grad, np.repeat(counts[:, None], 2, axis=1))
    assert grad_check(lambda: F.sum(F.square(F.embedding(idx, table))), [table]) < TOL


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        F.embedding(np.array([[5]]), Tensor(np.zeros((5, 2))))


# conv1d

def conv_oracle(x, w, b):
    B, L, cin = x.shape
    K, _, cout = w.shape
    pad = K // 2
    out = np.zeros((B, L, cout))
    for n in range(B):
        for t in range(L):
            for o in range(cout):
                acc = b[o]
                for k in range(K):
                    s = t + k - pad
                    if 0 <= s < L:
                        for c in range(cin):
                            acc += x[n, s, c] * w[k, c, o]
                out[n, t, o] = acc
    return out


def test_conv1d_identity_tap(rng):
    x = rng.standard_normal((2, 6, 3))
    w = np.zeros((3, 3, 3))
    w[1] = np.eye(3)
    np.testing.assert_array_equal(F.conv1d(Tensor(x), Tensor(w), Tensor(np.zeros(3))).data, x)


def test_conv1d_zero_input_gives_bias(rng):
    b = rng.standard_normal(4)
    out = F.conv1d(Tensor(np.zeros((2, 5, 3))), Tensor(rng.standard_normal((3, 3, 4))), Tensor(b))
    np.testing.assert_array_equal(out.data, np.broadcast_to(b, (2, 5, 4)))


def test_conv1d_matches_triple_loop(rng):
    x = rng.standard_normal((2, 5, 3))
    w = rng.standard_normal((3, 3, 4))
    b = rng.standard_normal(4)
    out = F.conv1d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, conv_oracle(x, w, b), atol=1e-6)


def test_conv1d_linear(rng):
    x, y = rng.standard_normal((2, 2, 9, 3))
    w = Tensor(rng.standard_normal((3, 3, 2)))
    lhs = F.conv1d(Tensor(2.5 * x - 1.5 * y), w).data
    rhs = 2.5 * F.conv1d(Tensor(x), w).data - 1.5 * F.conv1d(Tensor(y), w).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_conv1d_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        F.conv1d(Tensor(np.zeros((1, 4, 2))), Tensor(np.zeros((3, 3, 1))))


@pytest.mark.parametrize("seed", SEEDS)
def test_conv1d_gradcheck(seed):
    r = np.random.default_rng(seed)
    x, w, b = param(r, 2, 6, 3), param(r, 3, 3, 2), param(r, 2)
    assert grad_check(lambda: F.sum(F.square(F.conv1d(x, w, b))), [x, w, b]) < TOL


# recurrent layers

def gru_oracle(xs, wx, wh, b):
    """1-unit GRU, scalar unroll; column order z, r, n."""
    h, out = 0.0, []
    for x in xs:
        z = sig(x * wx[0] + h * wh[0] + b[0])
        r = sig(x * wx[1] + h * wh[1] + b[1])
        n = math.tanh(x * wx[2] + (r * h) * wh[2] + b[2])
        h = (1 - z) * h + z * n
        out.append(h)
    return out


def lstm_oracle(xs, wx, wh, b):
    """1-unit LSTM; column order i, f, g, o."""
    h = c = 0.0
    out = []
    for x in xs:
        pre = [x * wx[k] + h * wh[k] + b[k] for k in range(4)]
        i, f, g, o = sig(pre[0]), sig(pre[1]), math.tanh(pre[2]), sig(pre[3])
        c = f * c + i * g
        h = o * math.tanh(c)
        out.append(h)
    return out


@pytest.mark.parametrize("cell,oracle,gates", [("gru", gru_oracle, 3), ("lstm", lstm_oracle, 4)])
def test_recurrent_scalar_unroll(backend, rng, cell, oracle, gates):
    xs = rng.standard_normal(3)
    wx, wh, b = rng.standard_normal((3, gates))
    fn = getattr(F, cell)
    out = fn(Tensor(xs.reshape(1, 3, 1)), Tensor(wx[None]), Tensor(wh[None]), Tensor(b)).data.ravel()
    np.testing.assert_allclose(out, oracle(xs, wx, wh, b), atol=1e-10)
    rev = fn(Tensor(xs.reshape(1, 3, 1)), Tensor(wx[None]), Tensor(wh[None]), Tensor(b), reverse=True).data.ravel()
    np.testing.assert_allclose(rev, oracle(xs[::-1], wx, wh, b)[::-1], atol=1e-10)


@pytest.mark.parametrize("cell,gates", [("gru", 3), ("lstm", 4)])
def test_recurrent_zero_params(backend, rng, cell, gates):
    H = 5
    out = getattr(F, cell)(
        Tensor(rng.standard_normal((2, 7, 3))), Tensor(np.zeros((3, gates * H))), Tensor(np.zeros((H, gates * H))),
        Tensor(np.zeros(gates * H)),
    )
    assert np.all(out.data == 0)


@pytest.mark.parametrize("cell,gates", [("gru", 3), ("lstm", 4)])
@pytest.mark.parametrize("seed", range(5))
def test_recurrent_bounded(backend, cell, gates, seed):
    r = np.random.default_rng(seed)
    H = 6
    out = getattr(F, cell)(
        Tensor(r.standard_normal((3, 20, 4)) * 10), Tensor(r.standard_normal((4, gates * H)) * 5),
        Tensor(r.standard_normal((H, gates * H)) * 5), Tensor(r.standard_normal(gates * H) * 5),
    )
    assert np.all(np.abs(out.data) <= 1.0)


@pytest.mark.parametrize("cell,gates", [("gru", 3), ("lstm", 4)])
@pytest.mark.parametrize("reverse", [False, True])
@pytest.mark.parametrize("seed", SEEDS)
def test_recurrent_gradcheck(backend, cell, gates, reverse, seed):
    r = np.random.default_rng(seed)
    H, C = 3, 2
    x = param(r, 2, 4, C)
    wx, wh, b = param(r, C, gates * H), param(r, H, gates * H), param(r, gates * H)
    fn = getattr(F, cell)
    assert grad_check(lambda: F.sum(F.square(fn(x, wx, wh, b, reverse=reverse))), [x, wx, wh, b]) < TOL


@pytest.mark.parametrize("cell", ["gru", "lstm"])
def test_backends_agree(rng, cell):
    if kernels.BACKEND != "cython":
        pytest.skip("compiled kernels not built")
    gates = 3 if cell == "gru" else 4
    H = 8
    x = param(rng, 3, 30, 5)
    wx, wh, b = param(rng, 5, gates * H), param(rng, H, gates * H), param(rng, gates * H)
    grads = {}
    for name in ("cython", "python"):
        prev = kernels.use_backend(name)
        for p in (x, wx, wh, b):
            p.grad = None
        out = getattr(F, cell)(x, wx, wh, b, reverse=True)
        F.sum(F.square(out)).backward()
        grads[name] = [out.data.copy()] + [p.grad.copy() for p in (x, wx, wh, b)]
        kernels.use_backend(prev)
    for a, c in zip(grads["cython"], grads["python"]):
        np.testing.assert_allclose(a, c, rtol=1e-10, atol=1e-12)


def test_recurrent_shape_errors(rng):
    with pytest.raises(ValueError):
        F.gru(Tensor(np.zeros((1, 4, 3))), Tensor(np.zeros((2, 6))), Tensor(np.zeros((2, 6))), Tensor(np.zeros(6)))


# dense and activations

def test_dense_identity(rng):
    x = rng.standard_normal((4, 3))
    np.testing.assert_array_equal(F.dense(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)


def test_dense_shape_mismatch():
    with pytest.raises(ValueError):
        F.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 1))), Tensor(np.zeros(1)))


def test_activation_values():
    assert float(F.softplus(Tensor(np.array(0.0))).data) == pytest.approx(math.log(2), abs=1e-12)
    assert float(F.selu(Tensor(np.array(0.0))).data) == 0.0
    eps = 1e-9
    lo, hi = F.selu(Tensor(np.array([-eps, eps]))).data
    assert abs(hi - lo) < 1e-8
    with pytest.raises(ValueError):
        F.activation("swish")


@pytest.mark.parametrize("act", ["linear", "sigmoid", "relu", "selu", "softplus", "tanh"])
@pytest.mark.parametrize("seed", SEEDS)
def test_dense_gradcheck(act, seed):
    r = np.random.default_rng(seed)
    x, w, b = param(r, 4, 3), param(r, 3, 2), param(r, 2)
    assert grad_check(lambda: F.sum(F.square(F.dense(x, w, b, act))), [x, w, b]) < TOL


# batch norm

def test_batch_norm_training_statistics(rng):
    x = Tensor(rng.standard_normal((8, 5, 3)) * 3 + 2)
    rm, rv = np.zeros(3), np.ones(3)
    out = F.batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 1)), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 1)), 1, atol=1e-5)
    np.testing.assert_allclose(rm, 0.01 * x.data.mean(axis=(0, 1)))


def test_batch_norm_inference_constant():
    rm, rv = np.full(2, 3.0), np.ones(2)
    out = F.batch_norm(Tensor(np.full((4, 2), 3.0)), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False)
    assert np.all(out.data == 0)


def test_batch_norm_large_float32_activations_stay_finite(rng):
    x = Tensor((rng.standard_normal((6, 4, 1)) * 1e25).astype(np.float32))
    rm, rv = np.zeros(1), np.ones(1)
    out = F.batch_norm(x, Tensor(np.ones(1, np.float32)), Tensor(np.zeros(1, np.float32)), rm, rv, training=True)
    assert out.dtype == np.float32
    assert np.all(np.isfinite(out.data)) and np.all(np.isfinite(rv))
    np.testing.assert_allclose(out.data.std(), 1, rtol=1e-3)


def test_batch_norm_rejects_single_sample():
    with pytest.raises(ValueError):
        F.batch_norm(Tensor(np.ones((1, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), True)


@pytest.mark.parametrize("training", [True, False])
@pytest.mark.parametrize("seed", SEEDS)
def test_batch_norm_gradcheck(training, seed):
    r = np.random.default_rng(seed)
    x, g, b = param(r, 4, 5, 2), param(r, 2), param(r, 2)
    rm, rv = r.standard_normal(2), r.uniform(0.5, 2, 2)

    def fn():
        out = F.batch_norm(x, g, b, rm.copy(), rv.copy(), training)
        return F.sum(F.mul(out, np.linspace(-1, 1, out.data.size).reshape(out.shape)))

    assert grad_check(fn, [x, g, b]) < TOL


# losses

def test_bce_values(rng):
    t = rng.integers(0, 2, (10, 3)).astype(float)
    assert float(losses.bce(Tensor(t), t).data) <= 1e-6
    assert float(losses.bce(Tensor(np.full((4, 2), 0.5)), np.ones((4, 2))).data) == pytest.approx(math.log(2), abs=1e-12)


def test_bce_matches_formula(rng):
    for _ in range(20):
        p = rng.uniform(0.01, 0.99, (6, 3))
        t = rng.integers(0, 2, (6, 3)).astype(float)
        m = rng.integers(0, 2, (6, 3)).astype(float)
        m[0, 0] = 1
        direct = -(m * (t * np.log(p) + (1 - t) * np.log(1 - p))).sum() / m.sum()
        assert float(losses.bce(Tensor(p), t, m).data) == pytest.approx(direct, abs=1e-10)


def test_bce_all_masked():
    with pytest.raises(ValueError):
        losses.bce(Tensor(np.full(3, 0.5)), np.ones(3), np.zeros(3))


def test_mae_values(rng):
    assert float(losses.mae(Tensor(np.ones(3)), np.ones(3)).data) == 0
    assert float(losses.mae(Tensor(np.array([1.0, -1.0])), np.zeros(2)).data) == 1
    p, t = rng.standard_normal((2, 50))
    assert float(losses.mae(Tensor(p), t).data) == pytest.approx(np.mean(np.abs(p - t)), abs=1e-12)
    with pytest.raises(ValueError):
        losses.mae(Tensor(np.zeros(0)), np.zeros(0))


def test_mae_subgradient_zero_at_tie():
    p = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    losses.mae(p, np.array([2.0, 1.0])).backward()
    np.testing.assert_array_equal(p.grad, [0.0, 0.5])


@pytest.mark.parametrize("seed", SEEDS)
def test_loss_gradchecks(seed):
    r = np.random.default_rng(seed)
    p = Tensor(r.uniform(0.05, 0.95, (5, 2)), requires_grad=True)
    t = r.integers(0, 2, (5, 2)).astype(float)
    assert grad_check(lambda: losses.bce(p, t, np.ones_like(t)), [p]) < TOL
    q = param(r, 6, 1)
    y = r.standard_normal((6, 1))
    assert grad_check(lambda: losses.mae(q, y), [q]) < TOL
    assert grad_check(lambda: losses.mse(q, y), [q]) < TOL


# optimizers

def test_rmsprop_one_step():
    p = Tensor(np.array([0.0]), requires_grad=True)
    p.grad = np.array([1.0])
    opt = RMSprop([p])
    opt.step()
    assert opt.acc[0][0] == pytest.approx(0.1)
    assert p.data[0] == pytest.approx(-1e-3 / (math.sqrt(0.1) + 1e-8), rel=1e-12)


@pytest.mark.parametrize("cls", [RMSprop, Adam])
def test_zero_gradient_is_identity(cls, rng):
    p = Tensor(rng.standard_normal(4), requires_grad=True)
    before = p.data.copy()
    opt = cls([p])
    for _ in range(3):
        p.grad = np.zeros(4)
        opt.step()
    np.testing.assert_array_equal(p.data, before)


@pytest.mark.parametrize("cls", [RMSprop, Adam])
def test_descent_on_quadratic(cls):
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = cls([p], lr=1e-2)
    f = [1.0]
    for _ in range(10):
        opt.zero_grad()
        F.sum(F.square(p)).backward()
        opt.step()
        f.append(float(p.data[0] ** 2))
    assert all(b < a for a, b in zip(f, f[1:]))


@pytest.mark.parametrize("scale", [1e-6, 1.0, 1e4])
def test_adam_first_step_magnitude(scale, rng):
    p = Tensor(np.zeros(5), requires_grad=True)
    # first step is lr * |g| / (|g| + eps), so the bound needs |g| well above eps
    p.grad = rng.choice([-1.0, 1.0], 5) * rng.uniform(0.5, 2.0, 5) * scale
    Adam([p], lr=1e-3).step()
    assert np.all((np.abs(p.data) >= 0.9e-3) & (np.abs(p.data) <= 1e-3))


@pytest.mark.parametrize("cls", [RMSprop, Adam])
def test_optimizer_shape_mismatch(cls):
    p = Tensor(np.zeros(3), requires_grad=True)
    p.grad = np.zeros(4)
    with pytest.raises(ValueError):
        cls([p]).step()


# checkpoint container

def test_checkpoint_round_trip(tmp_path, rng):
    params = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b": np.float32(rng.standard_normal(2))}
    checkpoint.save(tmp_path / "c", params, {"k": 1})
    back, meta = checkpoint.load(tmp_path / "c")
    assert meta == {"k": 1}
    for k in params:
        assert back[k].tobytes() == params[k].tobytes()


def test_checkpoint_errors(rng):
    buf = checkpoint.dumps({"w": rng.standard_normal(10)})
    with pytest.raises(checkpoint.TruncatedCheckpointError):
        checkpoint.loads(buf[:-9])
    bad = bytearray(buf)
    bad[-6] ^= 0xFF
    with pytest.raises(checkpoint.ChecksumError):
        checkpoint.loads(bytes(bad))
    ver = bytearray(buf)
    ver[8] = 99
    with pytest.raises(checkpoint.CheckpointVersionError):
        checkpoint.loads(bytes(ver))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"NOTACKPT" + buf[8:])
    assert not issubclass(checkpoint.ChecksumError, checkpoint.TruncatedCheckpointError)


def test_grad_check_requires_float64():
    p = Tensor(np.zeros(2, np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        grad_check(lambda: F.sum(p), [p])


def test_flush_denormals_is_scoped():
    tiny = np.float32(1e-39)
    with kernels.flush_denormals():
        pass
    assert tiny * np.float32(1) != 0
