import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crane import autodiff as ad
from crane.autodiff import BatchNormState, DegenerateBatchError, DomainError, ShapeError, Tensor

from oracles import central_difference, rel_err

FD_TOL = 1e-4


def leaf(x):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def check_grad(build, *arrays, tol=FD_TOL, seed_grad=None):
    """Compare tape gradients of sum(w * build(...)) against central differences."""
    rng = np.random.default_rng(0)
    leaves = [leaf(a) for a in arrays]
    out = build(*leaves)
    weights = rng.normal(size=out.shape) if seed_grad is None else seed_grad
    ad.total(ad.mul(out, weights)).backward()
    for k, t in enumerate(leaves):
        def f(x, k=k):
            args = [np.array(a) for a in arrays]
            args[k] = x
            return float((build(*[Tensor(a) for a in args]).data * weights).sum())
        assert rel_err(t.grad, central_difference(f, arrays[k])) < tol


# -- examples ------------------------------------------------------------------

def test_matmul_examples():
    assert np.array_equal(ad.matmul([[1, 0], [0, 1]], [[5, 6], [7, 8]]).data, [[5, 6], [7, 8]])
    assert ad.matmul([[1, 2]], [[3], [4]]).data.tolist() == [[11.0]]
    with pytest.raises(ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_gradient_is_ones_times_b_transpose():
    rng = np.random.default_rng(1)
    a, b = leaf(rng.normal(size=(3, 4))), rng.normal(size=(4, 2))
    ad.total(ad.matmul(a, Tensor(b))).backward()
    assert np.allclose(a.grad, np.ones((3, 2)) @ b.T)
    check_grad(ad.matmul, rng.normal(size=(3, 4)), rng.normal(size=(4, 2)))


def test_relu_examples_and_mask():
    assert ad.relu([-1.0, 0.0, 2.0]).data.tolist() == [0.0, 0.0, 2.0]
    assert not ad.relu(-np.ones(5)).data.any()
    x = leaf([-0.5, 0.5, 0.0])
    ad.total(ad.relu(x)).backward()
    assert x.grad.tolist() == [0.0, 1.0, 0.0]
    check_grad(ad.relu, np.array([-0.5, 0.5]))


def test_batchnorm_examples():
    x = np.c_[np.full(4, 3.0), np.arange(4.0)]
    state = BatchNormState.fresh(2)
    out = ad.batchnorm(x, np.ones(2), np.zeros(2), state, "train")
    assert np.all(out.data[:, 0] == 0.0)
    state = BatchNormState.fresh(3)
    x = np.random.default_rng(0).normal(size=(5, 3))
    ident = ad.batchnorm(x, np.ones(3), np.zeros(3), state, "infer").data
    assert np.allclose(ident, x / np.sqrt(1 + state.eps), rtol=0, atol=1e-12)
    with pytest.raises(DegenerateBatchError):
        ad.batchnorm(np.ones((1, 3)), np.ones(3), np.zeros(3), BatchNormState.fresh(3), "train")


def test_batchnorm_running_stats_only_in_train_mode():
    state = BatchNormState.fresh(2)
    x = np.array([[0.0, 1.0], [2.0, 5.0]])
    ad.batchnorm(x, np.ones(2), np.zeros(2), state, "infer")
    assert state.running_mean.tolist() == [0.0, 0.0]
    ad.batchnorm(x, np.ones(2), np.zeros(2), state, "train")
    assert np.allclose(state.running_mean, 0.1 * x.mean(axis=0))
    assert np.allclose(state.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1))


@pytest.mark.parametrize("mode", ["train", "infer"])
def test_batchnorm_gradient(mode):
    rng = np.random.default_rng(2)
    x, g, b = rng.normal(size=(4, 3)), rng.uniform(0.5, 2, 3), rng.normal(size=3)

    def build(x, g, b):
        return ad.batchnorm(x, g, b, BatchNormState(np.full(3, 0.2), np.full(3, 1.5)), mode)

    check_grad(build, x, g, b)


def test_outer_examples_and_gradient():
    assert ad.outer([1, 2], [3, 4]).data.tolist() == [[3, 4], [6, 8]]
    assert not ad.outer(np.zeros(3), [1, 2]).data.any()
    rng = np.random.default_rng(3)
    check_grad(ad.outer, rng.normal(size=3), rng.normal(size=2))


def test_min_ratio_examples():
    a = np.array([[3.0, 4.0], [6.0, 8.0]])
    assert ad.min_ratio([[6, 8], [12, 16]], a).item() == 2.0
    assert ad.min_ratio([[6, 18], [12, 16]], a).item() == 2.0
    assert ad.min_ratio(np.zeros((2, 2)), a).item() == 0.0
    with pytest.raises(DomainError):
        ad.min_ratio(np.ones((2, 2)), [[1, 0], [1, 1]])


def test_min_ratio_tie_goes_to_first_cell():
    m = leaf([[6.0, 8.0], [12.0, 16.0]])
    ad.min_ratio(m, [[3.0, 4.0], [6.0, 8.0]]).backward()
    assert np.count_nonzero(m.grad) == 1 and m.grad[0, 0] != 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 10))
def test_min_ratio_single_cell_gradient(seed, upstream):
    rng = np.random.default_rng(seed)
    m = leaf(rng.uniform(0, 5, (4, 5)))
    a = leaf(rng.uniform(0.5, 2, (4, 5)))
    ad.min_ratio(m, a).backward(np.array(upstream))
    assert np.count_nonzero(m.grad) == 1
    # d(m/a)/dm * a = 1 at the argmin, so the gradient scaled by a sums to upstream
    assert np.isclose((m.grad * a.data).sum(), upstream)
    assert np.count_nonzero(a.grad) <= 1


def test_min_ratio_rows_matches_per_row_min_ratio():
    rng = np.random.default_rng(4)
    mem = rng.uniform(0, 3, (5, 6))
    eo, ed = rng.uniform(0, 1, (7, 5)), rng.uniform(0, 1, (7, 6))
    rows = ad.min_ratio_rows(mem, eo, ed, 1e-3).data
    single = [ad.min_ratio(mem, np.outer(eo[j], ed[j]) + 1e-3).item() for j in range(7)]
    assert np.allclose(rows, single, rtol=1e-14, atol=0)
    check_grad(lambda m, o, d: ad.min_ratio_rows(m, o, d, 1e-3), mem, eo, ed)


def test_floor_div_clip_examples():
    assert ad.floor_div_clip(9, 4) == 2
    assert ad.floor_div_clip(3, 4) == 0
    assert ad.floor_div_clip(4, 4) == 1
    assert ad.floor_div_clip(-3, 4) == 0
    with pytest.raises(ValueError):
        ad.floor_div_clip(1, 0)


def test_floor_div_clip_contributes_no_gradient():
    rng = np.random.default_rng(5)
    m = leaf(rng.uniform(1, 9, (3, 3)))
    a = Tensor(rng.uniform(0.5, 1, (3, 3)))
    q = ad.min_ratio(m, a)
    t = ad.floor_div_clip(q, 2.0)
    ad.sub(q, ad.mul(a, t * 2.0)).backward(np.ones((3, 3)))
    with_floor = m.grad.copy()
    m.grad = None
    q = ad.min_ratio(m, a)
    ad.sub(q, ad.mul(a, float(t) * 2.0)).backward(np.ones((3, 3)))
    assert np.array_equal(with_floor, m.grad)


def test_mae_loss_examples_and_gradient():
    assert ad.mae_loss([1.0, 2.0], [1.0, 2.0]).item() == 0.0
    assert ad.mae_loss([1.0, 3.0], [2.0, 5.0]).item() == 1.5
    with pytest.raises(ValueError):
        ad.mae_loss([], [])
    p = leaf([1.0, 3.0, 2.0])
    ad.mae_loss(p, [2.0, 1.0, 2.0]).backward()
    assert p.grad.tolist() == [-1 / 3, 1 / 3, 0.0]
    check_grad(lambda x: ad.mae_loss(x, np.array([0.0, 1.0, -2.0])),
               np.array([0.7, -0.4, 1.1]), seed_grad=np.array(1.0))


def test_superpose_matches_explicit_sum_and_gradient():
    rng = np.random.default_rng(6)
    eo, ed = rng.uniform(0, 1, (3, 4)), rng.uniform(0, 1, (2, 5))
    ro, rd, c = np.array([0, 2, 0, 1]), np.array([1, 0, 1, 1]), np.array([2.0, -4.0, 1.0, 0.5])
    explicit = sum(ck * (np.outer(eo[i], ed[j]) + 1e-3) for ck, i, j in zip(c, ro, rd))
    assert np.allclose(ad.superpose(eo, ed, ro, rd, c, 1e-3).data, explicit)
    check_grad(lambda o, d: ad.superpose(o, d, ro, rd, c, 1e-3), eo, ed)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_random_points_composite_gradient(seed):
    """A small MLP-plus-query composite checked at a random point."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(3, 5))
    g, b = rng.uniform(0.5, 2, 5), rng.normal(size=5)
    v = rng.normal(size=5)

    def build(x, w, g, b, v):
        h = ad.batchnorm(ad.matmul(x, w), g, b, BatchNormState.fresh(5), "train")
        return ad.matvec(ad.take_rows(ad.transpose(ad.transpose(h)), [0, 2, 2]), v)

    check_grad(build, x, w, g, b, v)


def test_backward_visits_shared_nodes_once():
    x = leaf([2.0])
    y = ad.mul(x, x)
    z = ad.add(y, y)
    ad.total(z).backward()
    assert x.grad.tolist() == [8.0]


def test_stack_columns_and_mean():
    a, b = leaf([1.0, 2.0]), leaf([3.0, 4.0])
    s = ad.stack_columns([a, None, b], 2)
    assert s.data.tolist() == [[1, 0, 3], [2, 0, 4]]
    ad.total(s).backward()
    assert a.grad.tolist() == [1.0, 1.0]
    m = ad.mean([ad.total(a), ad.total(b)])
    assert m.item() == 5.0
