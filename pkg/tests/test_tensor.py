import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rescal.autograd import tensor as T
from rescal.autograd import checkpoint
from rescal.autograd.gradcheck import check_gradients
from rescal.autograd.nn import Linear, uniform_param
from rescal.autograd.optim import AdamState, adam_step
from rescal.autograd.rng import Rng
from rescal.autograd.tensor import Tensor, backward, no_grad
from rescal.errors import ContractError, NumericDomainError, ParseError, ShapeError
from rescal.estimator import st_gumbel
from rescal.models import gru_cell

GRAD_TOL = 1e-3


def away_from_zero(rng, shape, lo=0.1):
    """Values bounded away from the relu/abs kink so central differences stay valid."""
    mag = rng.uniform(lo, 1.5, shape)
    return mag * np.where(rng.random(shape) < 0.5, -1.0, 1.0)


def _weighted(out, rng_key):
    # a fixed random projection turns any output into a scalar with a dense gradient
    w = np.random.default_rng(rng_key).uniform(-1, 1, out.shape)
    return T.sum(T.mul(out, Tensor(w, dtype=out.dtype)))


def _small_shape(r, ndim):
    limits = (4, 4, 8)[-ndim:] if ndim <= 3 else (2, 4, 4, 8)
    return tuple(int(r.integers(1, m + 1)) for m in limits)


def _case(name, r):
    """(fn, arrays) for one random trial of op ``name``."""
    key = int(r.integers(1 << 30))
    if name in ("add", "sub", "mul"):
        s = _small_shape(r, 3)
        b_shape = s if r.random() < 0.5 else (1,) + s[1:]
        op = getattr(T, name)
        return (lambda t: _weighted(op(t[0], t[1]), key)), [r.normal(size=s), away_from_zero(r, b_shape)]
    if name in ("relu", "abs"):
        op = getattr(T, name)
        return (lambda t: _weighted(op(t[0]), key)), [away_from_zero(r, _small_shape(r, 3), 0.05)]
    if name in ("sigmoid", "tanh", "neg"):
        op = getattr(T, name)
        return (lambda t: _weighted(op(t[0]), key)), [r.normal(size=_small_shape(r, 3))]
    if name == "softmax":
        s = _small_shape(r, 3)
        ax = int(r.integers(-len(s), len(s)))
        return (lambda t: _weighted(T.softmax(t[0], axis=ax), key)), [r.normal(size=s)]
    if name in ("sum", "mean"):
        s = _small_shape(r, 3)
        ax = None if r.random() < 0.3 else int(r.integers(0, len(s)))
        keep = bool(r.random() < 0.5)
        op = getattr(T, name)
        return (lambda t: _weighted(op(t[0], axis=ax, keepdims=keep), key)), [r.normal(size=s)]
    if name == "matmul":
        B, n, k, m = (int(v) for v in r.integers(1, 5, 4))
        a_shape = (B, n, k) if r.random() < 0.5 else (n, k)
        return (lambda t: _weighted(T.matmul(t[0], t[1]), key)), [r.normal(size=a_shape), r.normal(size=(k, m))]
    if name == "pointwise_conv":
        B, C, L = _small_shape(r, 3)
        O = int(r.integers(1, 5))
        return (lambda t: _weighted(T.pointwise_conv(t[0], t[1], t[2]), key),
                [r.normal(size=(B, C, L)), r.normal(size=(O, C)), r.normal(size=O)])
    if name == "conv1d":
        B, C, L = _small_shape(r, 3)
        O, K, d = int(r.integers(1, 4)), int(r.integers(1, 4)), int(r.integers(1, 4))
        return (lambda t: _weighted(T.conv1d(t[0], t[1], t[2], dilation=d), key),
                [r.normal(size=(B, C, L)), r.normal(size=(O, C, K)), r.normal(size=O)])
    if name == "embedding":
        rows, dim = int(r.integers(2, 5)), int(r.integers(1, 5))
        idx = r.integers(0, rows, size=int(r.integers(1, 8)))
        return (lambda t: _weighted(T.embedding(t[0], idx), key)), [r.normal(size=(rows, dim))]
    if name == "concat":
        s = _small_shape(r, 3)
        ax = int(r.integers(0, 3))
        s2 = list(s)
        s2[ax] = int(r.integers(1, 4))
        return (lambda t: _weighted(T.concat([t[0], t[1]], axis=ax), key)), [r.normal(size=s), r.normal(size=s2)]
    if name == "slice":
        s = _small_shape(r, 3)
        lo = int(r.integers(0, s[-1]))
        return (lambda t: _weighted(t[0][:, ..., lo:], key)), [r.normal(size=s)]
    if name == "reshape":
        s = _small_shape(r, 3)
        return (lambda t: _weighted(T.reshape(t[0], (-1,)), key)), [r.normal(size=s)]
    if name == "transpose":
        s = _small_shape(r, 3)
        perm = tuple(int(v) for v in r.permutation(3))
        return (lambda t: _weighted(T.transpose(t[0], perm), key)), [r.normal(size=s)]
    if name == "gru_cell":
        B, n_in, H = int(r.integers(1, 4)), int(r.integers(1, 4)), int(r.integers(1, 5))
        arrays = [r.normal(size=(B, n_in)), r.normal(size=(B, H)), r.normal(size=(n_in, 3 * H)) * 0.5,
                  r.normal(size=(H, 3 * H)) * 0.5, r.normal(size=3 * H) * 0.1, r.normal(size=3 * H) * 0.1]
        return (lambda t: _weighted(gru_cell(*t), key)), arrays
    raise KeyError(name)


OPS = ["add", "sub", "mul", "neg", "relu", "sigmoid", "tanh", "abs", "softmax", "sum", "mean", "matmul",
       "pointwise_conv", "conv1d", "embedding", "concat", "slice", "reshape", "transpose", "gru_cell"]
TRIALS_PER_OP = 8


@pytest.mark.parametrize("name", OPS)
def test_gradients_match_finite_differences(name):
    r = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(TRIALS_PER_OP):
        fn, arrays = _case(name, r)
        worst = max(worst, check_gradients(fn, arrays))
    assert worst < GRAD_TOL, f"{name}: relative error {worst:.2e}"


def test_gradient_trial_count_meets_floor():
    assert len(OPS) * TRIALS_PER_OP >= 100


def test_composite_graph_gradcheck():
    r = np.random.default_rng(7)
    x, w, k = r.normal(size=(2, 3, 6)), r.normal(size=(4, 3, 2)), r.normal(size=(4, 6))

    def fn(t):
        h = T.tanh(T.conv1d(t[0], t[1], dilation=2))
        s = T.softmax(T.matmul(h, T.transpose(t[2])), axis=-1)
        return T.mean(T.abs(s - 0.2))

    assert check_gradients(fn, [x, w, k]) < GRAD_TOL


def test_st_gumbel_backward_is_softmax_jacobian():
    r = np.random.default_rng(3)
    logits = r.normal(size=(3, 5))
    noise = r.gumbel(size=(3, 5))
    proj = r.uniform(-1, 1, size=(3, 5))
    x = Tensor(logits, requires_grad=True)
    backward(T.sum(T.mul(st_gumbel(x, 0.7, noise=noise), Tensor(proj))))
    # analytic: J^T p for J = diag(s) - s s^T, scaled by 1/tau
    z = (logits + noise) / 0.7
    s = np.exp(z - z.max(-1, keepdims=True))
    s /= s.sum(-1, keepdims=True)
    expect = s * (proj - (proj * s).sum(-1, keepdims=True)) / 0.7
    np.testing.assert_allclose(x.grad, expect, rtol=1e-5, atol=1e-6)


# ------------------------------------------------------------------ examples


def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_relu_sign_cases():
    np.testing.assert_array_equal(T.relu(Tensor([-1, 0, 2])).data, [0, 0, 2])


def test_causal_conv1d_hand_example():
    x = Tensor(np.array([1, 2, 3, 4], dtype=np.float32).reshape(1, 1, 4))
    w = Tensor(np.ones((1, 1, 2)))
    out = T.conv1d(x, w, dilation=1)
    # y_t = x_{t-1} + x_t with x_{-1} = 0
    np.testing.assert_array_equal(out.data.ravel(), [1, 3, 5, 7])


def test_conv1d_dilation_matches_naive_sum():
    r = np.random.default_rng(0)
    x, w = r.normal(size=(2, 3, 9)).astype(np.float32), r.normal(size=(4, 3, 3)).astype(np.float32)
    d = 2
    out = T.conv1d(Tensor(x), Tensor(w), dilation=d).data
    ref = np.zeros((2, 4, 9))
    for t in range(9):
        for k in range(3):
            src = t - (3 - 1 - k) * d
            if src >= 0:
                ref[:, :, t] += x[:, :, src] @ w[:, :, k].T
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


def test_backward_square():
    x = Tensor([3.0], requires_grad=True)
    backward(T.sum(x * x))
    np.testing.assert_array_equal(x.grad, [6.0])


def test_backward_sigmoid_at_zero():
    x = Tensor([0.0], requires_grad=True)
    backward(T.mean(T.sigmoid(x)))
    np.testing.assert_allclose(x.grad, [0.25])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2)


def test_backward_clears_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = T.sum(T.tanh(x))
    backward(y)
    assert y._parents == () and y._backward is None


def test_leaf_gradients_accumulate():
    x = Tensor([2.0], requires_grad=True)
    backward(T.sum(x * x))
    backward(T.sum(x * 3.0))
    np.testing.assert_allclose(x.grad, [7.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2
    assert not y.requires_grad


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))))


def test_non_finite_input_rejected():
    with pytest.raises(NumericDomainError):
        Tensor([1.0, np.nan])


def test_non_finite_result_rejected():
    big = Tensor([3e38])
    with pytest.raises(NumericDomainError), np.errstate(over="ignore"):
        T.mul(big, big)


def test_slice_rejects_fancy_indexing():
    with pytest.raises(ContractError):
        Tensor(np.ones(4))[np.array([0, 1])]


def test_float32_storage():
    assert Tensor([1, 2]).dtype == np.float32


# ------------------------------------------------------------------ properties


_arrays = hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                     elements=st.floats(-30, 30, width=32))


@settings(max_examples=60, deadline=None)
@given(_arrays, st.integers(-3, 2))
def test_softmax_is_a_distribution(x, axis):
    axis = axis % x.ndim
    s = T.softmax(Tensor(x), axis=axis).data
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(axis=axis), 1.0, atol=1e-5)


@settings(max_examples=60, deadline=None)
@given(_arrays, st.data())
def test_structure_round_trips_are_exact(x, data):
    t = Tensor(x)
    np.testing.assert_array_equal(T.reshape(T.reshape(t, (-1,)), x.shape).data, x)
    perm = data.draw(st.permutations(range(x.ndim)))
    back = T.transpose(T.transpose(t, perm), np.argsort(perm))
    np.testing.assert_array_equal(back.data, x)
    cut = data.draw(st.integers(0, x.shape[0]))
    joined = T.concat([t[:cut], t[cut:]], axis=0)
    np.testing.assert_array_equal(joined.data, x)


@settings(max_examples=40, deadline=None)
@given(_arrays)
def test_results_are_finite(x):
    t = Tensor(x, requires_grad=True)
    y = T.sum(T.tanh(t) * T.sigmoid(t) + T.relu(t))
    backward(y)
    assert np.isfinite(y.data).all() and np.isfinite(t.grad).all()
    assert t.grad.shape == t.shape


# ------------------------------------------------------------------ adam


def test_adam_zero_gradient_leaves_params():
    p = Tensor([1.0, -2.0], requires_grad=True)
    p.grad = np.zeros(2, dtype=np.float32)
    adam_step([p], AdamState())
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = Tensor([0.0], requires_grad=True)
    p.grad = np.ones(1, dtype=np.float32)
    state = AdamState(lr=1e-3)
    adam_step([p], state)
    # m_hat = 1, v_hat = 1 -> step = lr * 1 / (1 + eps)
    np.testing.assert_allclose(p.data, [-1e-3 / (1 + 1e-8)], rtol=1e-6)
    assert state.step == 1
    np.testing.assert_array_equal(p.grad, [0.0])


def test_adam_requires_grad_present():
    p = Tensor([0.0], requires_grad=True)
    with pytest.raises(ContractError):
        adam_step([p], AdamState())


def test_adam_rejects_bad_hyperparameters():
    with pytest.raises(ContractError):
        AdamState(lr=-1)
    with pytest.raises(ContractError):
        AdamState(beta1=1.0)


def test_adam_matches_reference_over_steps():
    r = np.random.default_rng(1)
    p0 = r.normal(size=5)
    grads = r.normal(size=(6, 5))
    p = Tensor(p0, requires_grad=True)
    state = AdamState(lr=0.01)
    m = v = np.zeros(5)
    ref = p0.astype(np.float32).astype(np.float64)
    for k, g in enumerate(grads, 1):
        p.grad = g.astype(np.float32)
        adam_step([p], state)
        g32 = g.astype(np.float32).astype(np.float64)
        m = 0.9 * m + 0.1 * g32
        v = 0.999 * v + 0.001 * g32 ** 2
        ref = ref - 0.01 * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-5)


def _train_tiny(seed):
    rng = Rng(seed)
    layer = Linear(3, 2, rng)
    state = AdamState()
    x = rng.normal((8, 3)).astype(np.float32)
    for _ in range(5):
        backward(T.mean(T.abs(layer(Tensor(x)))))
        adam_step(layer.parameters(), state)
    return checkpoint.dumps(layer.state_dict())


def test_training_is_bit_reproducible():
    assert _train_tiny(4) == _train_tiny(4)
    assert _train_tiny(4) != _train_tiny(5)


# ------------------------------------------------------------------ rng


def test_rng_is_deterministic_and_streams_differ():
    a, b = Rng(9), Rng(9)
    np.testing.assert_array_equal(a.random(5), b.random(5))
    assert not np.array_equal(Rng(9).child(1).random(5), Rng(9).child(2).random(5))


def test_rng_rejects_non_u64_seed():
    with pytest.raises(ValueError):
        Rng(-1)
    with pytest.raises(ValueError):
        Rng(2**64)


def test_uniform_init_bounds():
    w = uniform_param((200, 50), 25, Rng(0))
    assert np.abs(w.data).max() <= np.sqrt(1 / 25)


# ------------------------------------------------------------------ checkpoint


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    r = np.random.default_rng(0)
    tensors = {"a": r.normal(size=(3, 4)).astype(np.float32), "scalar": np.float32(2.5).reshape(()),
               "näme": np.arange(6, dtype=np.float32).reshape(1, 2, 3)}
    path = tmp_path / "x.ckpt"
    checkpoint.save(path, tensors)
    back = checkpoint.load(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes() and back[k].shape == tensors[k].shape
    assert checkpoint.dumps(back) == path.read_bytes()


def test_checkpoint_layout():
    blob = checkpoint.dumps({"w": np.array([1.0, 2.0], dtype=np.float32)})
    assert blob[:5] == b"RSCL\x01"
    assert int.from_bytes(blob[5:9], "little") == 1
    assert blob[-8:] == np.array([1.0, 2.0], dtype="<f4").tobytes()


@pytest.mark.parametrize("blob", [b"XXXX\x01\x00\x00\x00\x00", b"RSCL\x01\x01\x00\x00\x00\x05", b"RSCL"])
def test_checkpoint_rejects_corruption(blob):
    with pytest.raises(ParseError):
        checkpoint.loads(blob)


def test_checkpoint_rejects_trailing_bytes():
    blob = checkpoint.dumps({"w": np.zeros(2, dtype=np.float32)})
    with pytest.raises(ParseError):
        checkpoint.loads(blob + b"\x00")
