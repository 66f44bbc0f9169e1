import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from globalvol import diffcore as dc
from globalvol.diffcore import tensor


def fd_check(build, leaves, eps=1e-5, rtol=1e-4):
    """Compare analytic gradients of scalar ``build()`` with central differences."""
    dc.zero_grad(leaves)
    out = build()
    dc.backward(out)
    analytic = [leaf.grad.copy() for leaf in leaves]
    for leaf, g in zip(leaves, analytic):
        with dc.no_grad():
            num = dc.numeric_grad(lambda: build().item(), leaf, eps=eps)
        scale = np.maximum(np.abs(num), 1e-3)
        assert np.all(np.abs(g - num) / scale < rtol), (leaf.name, g, num)


# -- matmul ---------------------------------------------------------------

def test_matmul_identity():
    out = dc.matmul(tensor([[1, 0], [0, 1]]), tensor([[3], [4]]))
    np.testing.assert_array_equal(out.data, [[3], [4]])


def test_matmul_row_times_column():
    out = dc.matmul(tensor([[1, 2]]), tensor([[3], [4]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(dc.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        dc.matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    a = tensor(rng.standard_normal((3, 4)), requires_grad=True, name="a")
    b = tensor(rng.standard_normal((4, 2)), requires_grad=True, name="b")
    fd_check(lambda: dc.matmul(a, b).sum(), [a, b])


def test_batched_matmul_gradient():
    rng = np.random.default_rng(2)
    a = tensor(rng.standard_normal((2, 3, 4)), requires_grad=True, name="a")
    b = tensor(rng.standard_normal((4, 5)), requires_grad=True, name="b")
    fd_check(lambda: dc.square(dc.matmul(a, b)).sum(), [a, b])


# -- elementwise ------------------------------------------------------------

def test_softplus_zero_is_log2():
    assert dc.softplus(tensor(0.0)).item() == pytest.approx(math.log(2.0), abs=1e-15)


def test_sigmoid_zero():
    assert dc.sigmoid(tensor(0.0)).item() == 0.5


def test_tanh_gradient_at_zero():
    x = tensor(0.0, requires_grad=True)
    dc.backward(dc.tanh(x))
    assert x.grad == 1.0


def test_log_domain_error():
    with pytest.raises(dc.DomainError):
        dc.log(tensor([1.0, 0.0]))
    with pytest.raises(dc.DomainError):
        dc.log(tensor(-2.0))


def test_softplus_large_inputs_do_not_overflow():
    out = dc.softplus(tensor([-700.0, 800.0])).data
    assert np.all(np.isfinite(out))
    assert out[1] == 800.0
    # below about -745 the exact value underflows float64 itself
    assert out[0] > 0.0


@given(st.floats(min_value=-700, max_value=700, allow_nan=False))
def test_softplus_strictly_positive(x):
    assert dc.softplus(tensor(x)).item() > 0.0


def test_elementwise_dispatch():
    assert dc.elementwise("square", tensor(3.0)).item() == 9.0
    assert dc.elementwise("add", tensor(1.0), tensor(2.0)).item() == 3.0
    with pytest.raises(dc.ContractError):
        dc.elementwise("cosh", tensor(1.0))


@pytest.mark.parametrize("op", ["sigmoid", "tanh", "softplus", "exp", "neg", "square", "relu"])
def test_unary_gradients(op):
    rng = np.random.default_rng(3)
    # keep relu inputs away from its kink
    data = rng.standard_normal((3, 4))
    data = np.where(np.abs(data) < 0.05, 0.3, data)
    x = tensor(data, requires_grad=True, name="x")
    fd_check(lambda: (dc.elementwise(op, x) * tensor(np.arange(12.0).reshape(3, 4))).sum(), [x])


def test_log_sqrt_gradients():
    rng = np.random.default_rng(4)
    x = tensor(rng.uniform(0.5, 2.0, size=5), requires_grad=True, name="x")
    fd_check(lambda: (dc.log(x) + dc.sqrt(x) * 2.0).sum(), [x])


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_gradients_with_broadcast(op):
    rng = np.random.default_rng(5)
    a = tensor(rng.uniform(0.5, 2.0, (2, 3)), requires_grad=True, name="a")
    b = tensor(rng.uniform(0.5, 2.0, (3,)), requires_grad=True, name="b")
    s = tensor(1.7, requires_grad=True, name="s")
    fd_check(lambda: dc.square(dc.elementwise(op, dc.elementwise(op, a, b), s)).sum(), [a, b, s])


def test_broadcast_error():
    with pytest.raises(dc.ShapeError):
        dc.add(tensor(np.ones((2, 3))), tensor(np.ones((4,))))


def test_reductions_and_shape_ops():
    rng = np.random.default_rng(6)
    x = tensor(rng.standard_normal((2, 3, 4)), requires_grad=True, name="x")
    w = tensor(rng.standard_normal((4, 3, 2)))

    def build():
        y = x.transpose(2, 1, 0) * w
        z = dc.concat([y.reshape(4, 6), dc.tanh(y).mean(axis=0).reshape(1, 6)], axis=0)
        return dc.square(z[1:, ::2]).sum() + dc.stack([x.sum(axis=1), x.mean(axis=1)], axis=0).sum()

    fd_check(build, [x])


def test_softmax_with_mask_gradient():
    rng = np.random.default_rng(7)
    x = tensor(rng.standard_normal((3, 3)), requires_grad=True, name="x")
    mask = np.triu(np.ones((3, 3), dtype=bool), k=1)
    w = tensor(rng.standard_normal((3, 3)))
    out = dc.softmax(x, axis=-1, mask=mask)
    assert np.all(out.data[mask] == 0.0)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0)
    fd_check(lambda: (dc.softmax(x, axis=-1, mask=mask) * w).sum(), [x])


def test_fancy_index_gradient_accumulates_duplicates():
    x = tensor([1.0, 2.0, 3.0], requires_grad=True)
    dc.backward(x[np.array([0, 0, 2])].sum())
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])


# -- backward -----------------------------------------------------------------

def test_square_gradient():
    x = tensor(3.0, requires_grad=True)
    dc.backward(dc.square(x))
    assert x.grad == 6.0


def test_constant_root_gives_zero_gradients():
    x = tensor([1.0, 2.0], requires_grad=True)
    root = (x * 0.0).sum() + 5.0
    dc.backward(root)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_backward_needs_scalar_root():
    x = tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(dc.ContractError):
        dc.backward(x * 2.0)


def test_backward_accumulates_until_reset():
    x = tensor(2.0, requires_grad=True)
    dc.backward(dc.square(x))
    dc.backward(dc.square(x))
    assert x.grad == 8.0
    dc.zero_grad([x])
    dc.backward(dc.square(x))
    assert x.grad == 4.0


def test_long_chain_does_not_recurse():
    x = tensor(1.0, requires_grad=True)
    y = x
    for _ in range(20000):
        y = y * 1.0
    dc.backward(y)
    assert x.grad == 1.0


def test_graph_order_parents_precede_children():
    a = tensor(1.0, requires_grad=True)
    b = dc.exp(a) * a
    c = b + dc.square(b)
    for node in dc._reachable(c):
        assert all(p._id < node._id for p in node._parents)


def test_forward_is_deterministic():
    rng = np.random.default_rng(8)
    a = rng.standard_normal((5, 6))
    b = rng.standard_normal((6, 3))

    def run():
        x = dc.matmul(tensor(a), tensor(b))
        return dc.softplus(dc.tanh(x) * 3.0).data

    assert np.array_equal(run(), run())


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_random_composite_gradients(seed):
    rng = np.random.default_rng(seed)
    x = tensor(rng.standard_normal((2, 3)), requires_grad=True, name="x")
    w = tensor(rng.standard_normal((3, 3)) * 0.5, requires_grad=True, name="w")
    b = tensor(rng.standard_normal(3) * 0.1, requires_grad=True, name="b")

    def build():
        h = dc.tanh(dc.matmul(x, w) + b)
        s = dc.softplus(h) + 1e-8
        return (dc.log(s) + dc.square(dc.sigmoid(h)) / s).mean()

    fd_check(build, [x, w, b])


def test_no_grad_records_nothing():
    x = tensor(1.0, requires_grad=True)
    with dc.no_grad():
        y = dc.exp(x)
    assert not y.requires_grad and y.is_leaf


# -- Adam -----------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = tensor([1.0, -2.0], requires_grad=True)
    state = dc.AdamState.for_params([p])
    dc.adam_step([p], [np.zeros(2)], state, lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_is_lr_times_sign():
    p = tensor([0.0, 0.0, 0.0], requires_grad=True)
    state = dc.AdamState.for_params([p])
    dc.adam_step([p], [np.array([3.0, -0.5, 1e-3])], state, lr=1e-4)
    np.testing.assert_allclose(p.data, [-1e-4, 1e-4, -1e-4], rtol=1e-4)


def test_adam_two_step_trace():
    # hand-rolled: b1=.9, b2=.999, eps=1e-8, lr=.01, grads 1.0 then 2.0
    p = tensor([0.0], requires_grad=True)
    state = dc.AdamState.for_params([p])
    dc.adam_step([p], [np.array([1.0])], state, lr=0.01)
    m1, v1 = 0.1, 0.001
    step1 = 0.01 * (m1 / 0.1) / (math.sqrt(v1 / 0.001) + 1e-8)
    assert p.data[0] == pytest.approx(-step1, rel=1e-12)
    dc.adam_step([p], [np.array([2.0])], state, lr=0.01)
    m2 = 0.9 * m1 + 0.1 * 2.0
    v2 = 0.999 * v1 + 0.001 * 4.0
    step2 = 0.01 * (m2 / (1 - 0.81)) / (math.sqrt(v2 / (1 - 0.999 ** 2)) + 1e-8)
    assert p.data[0] == pytest.approx(-step1 - step2, rel=1e-12)
    assert state.step == 2


def test_adam_contract_errors():
    p = tensor([0.0, 1.0], requires_grad=True)
    state = dc.AdamState.for_params([p])
    with pytest.raises(dc.ContractError):
        dc.adam_step([p], [np.zeros(3)], state, lr=0.1)
    with pytest.raises(dc.ContractError):
        dc.adam_step([p], [np.zeros(2)], state, lr=0.0)


def test_clip_grad_norm():
    p = tensor([0.0, 0.0], requires_grad=True)
    p.grad = np.array([3.0, 4.0])
    norm = dc.clip_grad_norm([p], 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(p.grad, [0.6, 0.8])


def test_dropout_training_only():
    rng = np.random.default_rng(0)
    x = tensor(np.ones((1000,)), requires_grad=True)
    assert dc.dropout(x, 0.2, rng, training=False) is x
    y = dc.dropout(x, 0.2, rng, training=True)
    kept = y.data > 0
    assert 0.7 < kept.mean() < 0.9
    np.testing.assert_allclose(y.data[kept], 1.25)


def test_numeric_grad_five_point_stencil():
    x = dc.tensor(np.array([0.3, -1.2]), requires_grad=True)
    f = lambda: float(np.sum(np.sin(x.data) * np.exp(x.data)))  # noqa: E731
    exact = np.cos(x.data) * np.exp(x.data) + np.sin(x.data) * np.exp(x.data)
    e2 = np.abs(dc.numeric_grad(f, x, eps=1e-3) - exact).max()
    e4 = np.abs(dc.numeric_grad(f, x, eps=1e-3, order=4) - exact).max()
    assert e4 < 1e-11 < e2
    with pytest.raises(dc.ContractError):
        dc.numeric_grad(f, x, order=3)


def test_no_grad_is_thread_local():
    import threading
    inside, done = threading.Event(), threading.Event()

    def hold():
        with dc.no_grad():
            inside.set()
            done.wait(5)
    t = threading.Thread(target=hold)
    t.start()
    inside.wait(5)
    try:
        x = dc.tensor(np.array([2.0]), requires_grad=True)
        y = dc.square(x).sum()
        dc.backward(y)
        assert x.grad[0] == 4.0
    finally:
        done.set()
        t.join()
