import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from img2img import nn
from img2img import tensor as T
from img2img.errors import DomainError, GraphError, NonDeterministicError, NonFiniteError, ShapeError
from img2img.tensor import RngState, Tensor, backward, default_dtype, finite_diff_check, gaussian_init


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- construction -------------------------------------------------------------

def test_zeros_ones():
    z = T.zeros([2, 3])
    assert z.size == 6 and (z.data == 0).all() and not z.requires_grad
    o = T.ones([1])
    assert o.data.tolist() == [1.0]
    assert T.zeros([1, 3, 256, 256]).size == 196608
    assert z.dtype == np.float32


@pytest.mark.parametrize("shape", [[], [0], [2, -1]])
def test_zeros_rejects_bad_shapes(shape):
    with pytest.raises(ShapeError):
        T.zeros(shape)


def test_default_dtype_switch():
    with default_dtype(np.float64):
        assert T.zeros([2]).dtype == np.float64
    assert T.zeros([2]).dtype == np.float32


def test_gaussian_init_statistics():
    w = gaussian_init([10000], 0.0, 0.02, RngState(1))
    # 3 sigma standard errors: mean 0.02/100*3 = 6e-4; stddev 0.02/sqrt(2*10000)*3 = 4.2e-4
    assert abs(w.data.mean()) < 1e-3
    assert abs(w.data.std() - 0.02) < 2e-3


def test_gaussian_init_degenerate_and_deterministic():
    w = gaussian_init([100], 0.5, 1e-12, RngState(3))
    np.testing.assert_allclose(w.data, 0.5, atol=1e-9)
    a = gaussian_init([4, 4], 0, 0.02, RngState(7))
    b = gaussian_init([4, 4], 0, 0.02, RngState(7))
    assert np.array_equal(a.data, b.data)
    with pytest.raises(ValueError):
        gaussian_init([3], 0, 0.0, RngState(0))


def test_rng_streams_independent_and_serializable():
    r = RngState(5, (3,))
    r.normal((10,))
    saved = r.get_state()
    a = r.normal((5,))
    r2 = RngState.from_state(saved)
    assert np.array_equal(r2.normal((5,)), a)
    assert r2.position == r.position
    assert not np.array_equal(RngState(5, (1,)).normal((5,)), RngState(5, (2,)).normal((5,)))


# -- elementwise ops ----------------------------------------------------------

def test_elementwise_examples():
    assert T.abs(Tensor([-1.0, 2.0])).data.tolist() == [1.0, 2.0]
    assert T.log(Tensor([1.0])).data.tolist() == [0.0]
    assert T.reduce_mean(Tensor([1.0, 2.0, 3.0])).item() == 2.0


def test_add_backward_is_one():
    a, b = t64([1.0, 2.0]), t64([3.0, 4.0])
    backward(T.reduce_sum(T.add(a, b)))
    assert a.grad.tolist() == [1.0, 1.0] and b.grad.tolist() == [1.0, 1.0]


def test_no_implicit_broadcasting():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones((3, 1))))
    with pytest.raises(ShapeError):
        T.mul(Tensor(np.ones(2)), Tensor(np.ones(3)))
    # scalars are fine
    assert (Tensor(np.ones(3)) * 2.0).data.tolist() == [2.0, 2.0, 2.0]


def test_log_domain():
    with pytest.raises(DomainError):
        T.log(Tensor([0.5, 0.0]))
    with pytest.raises(DomainError):
        T.log(Tensor([-1.0]))


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        T.exp(Tensor([1000.0]))


def test_reduction_gradients():
    w = t64(np.arange(5.0))
    backward(T.reduce_sum(w))
    assert (w.grad == 1.0).all()
    v = t64(np.ones(4))
    backward(T.reduce_mean(v))
    assert (v.grad == 0.25).all()


def test_backward_square():
    w = t64([3.0])
    backward(T.reduce_mean(T.mul(w, w)))
    assert w.grad.tolist() == [6.0]


def test_backward_errors():
    w = t64([1.0, 2.0])
    with pytest.raises(GraphError):
        backward(T.mul(w, w))
    loss = T.reduce_sum(T.mul(w, w))
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)


def test_independent_parameter_gets_zero_gradient():
    a, b = t64([1.0, 2.0]), t64([5.0, 6.0])
    backward(T.reduce_sum(a) + T.reduce_sum(b) * 0.0)
    assert (b.grad == 0).all()


def test_grad_accumulates_on_leaves():
    w = t64([2.0])
    backward(T.reduce_sum(w * 3.0))
    backward(T.reduce_sum(w * 3.0))
    assert w.grad.tolist() == [6.0]


def test_abs_kink_uses_right_branch():
    w = t64([0.0])
    backward(T.reduce_sum(T.abs(w)))
    assert w.grad.tolist() == [1.0]


def test_no_grad_records_nothing():
    w = t64([1.0])
    with T.no_grad():
        y = w * 2.0
    assert not y.requires_grad


def test_conv_relu_mean_graph_fd():
    rng = RngState(11)
    with default_dtype(np.float64):
        x = Tensor(rng.normal((1, 2, 6, 6)), requires_grad=True)
        w = Tensor(rng.normal((3, 2, 4, 4)) * 0.3, requires_grad=True)

    def f(t):
        return T.reduce_mean(nn.relu(nn.conv2d(t, w, None, 2, 1)))

    rep = finite_diff_check(f, x, step=1e-5, tolerance=1e-3)
    assert rep.passed, rep.max_rel_error


# -- finite_diff_check -------------------------------------------------------

def test_fd_sum_exact():
    x = t64(np.random.default_rng(0).normal(size=7))
    rep = finite_diff_check(T.reduce_sum, x)
    assert rep.max_rel_error < 1e-9


def test_fd_mean_tanh():
    x = t64(np.random.default_rng(1).normal(size=(3, 4)))
    rep = finite_diff_check(lambda t: T.reduce_mean(nn.tanh(t)), x, tolerance=1e-4)
    assert rep.passed


def test_fd_dropout_frozen_vs_unfrozen():
    x = t64(np.random.default_rng(2).normal(size=(1, 1, 4, 4)))
    st = nn.DropoutState(RngState(0))

    def f(t):
        return T.reduce_sum(nn.dropout(t, st))

    with pytest.raises(NonDeterministicError):
        finite_diff_check(f, x)
    st.frozen = True
    assert finite_diff_check(f, x).passed


def test_fd_indices_subset():
    x = t64(np.arange(10.0))
    rep = finite_diff_check(lambda t: T.reduce_sum(t * t), x, indices=[0, 3, 9])
    assert rep.indices.tolist() == [0, 3, 9]
    np.testing.assert_allclose(rep.analytic, [0.0, 6.0, 18.0])


# -- properties ---------------------------------------------------------------

arrays = hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)),
                    elements=st.floats(-3, 3, allow_nan=False))


def _away_from_zero(a):
    return np.where(np.abs(a) < 1e-3, 0.5, a)


@settings(max_examples=30, deadline=None)
@given(arrays, arrays)
def test_binary_ops_fd(a, b):
    if a.shape != b.shape:
        b = np.resize(b, a.shape)
    for op in (T.add, T.sub, T.mul):
        x = t64(a)
        other = Tensor(b)
        assert finite_diff_check(lambda t: T.reduce_sum(T.mul(op(t, other), op(t, other))), x).passed


@settings(max_examples=30, deadline=None)
@given(arrays)
def test_unary_ops_fd(a):
    a = _away_from_zero(a)
    pos = np.abs(a) + 0.1
    checks = [
        (a, lambda t: T.reduce_mean(T.abs(t) * 2.0)),
        (pos, lambda t: T.reduce_sum(T.log(t))),
        (a, lambda t: T.reduce_mean(T.exp(t))),
        (a, lambda t: T.reduce_sum(T.scalar_mul(t, -1.5) * t)),
        (np.where(np.abs(np.abs(a) - 1) < 1e-3, 0.5, a), lambda t: T.reduce_sum(T.clamp(t, -1.0, 1.0) * t)),
    ]
    for data, f in checks:
        assert finite_diff_check(f, t64(data)).passed


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 50))
def test_same_seed_same_sequence(seed, n):
    a, b = RngState(seed, (1,)), RngState(seed, (1,))
    assert np.array_equal(a.normal((n,)), b.normal((n,)))
    assert np.array_equal(a.permutation(n), b.permutation(n))
