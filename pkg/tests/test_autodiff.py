import math
import threading
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_difference, naive_matmul, relative_error
from skelprompt import autodiff as ad
from skelprompt.autodiff import DegenerateCosineWarning, Parameter, ParamStore
from skelprompt.errors import NonFiniteError, ShapeError

FD_STEP = 1e-3
FD_TOL = 1e-4


def gradcheck(build, arrays):
    """Compare backprop gradients of ``build(*tensors)`` with central differences."""
    params = [Parameter(f"p{i}", a) for i, a in enumerate(arrays)]
    ad.backpropagate(build(*params))
    for i, p in enumerate(params):

        def f(x, i=i):
            args = [ad.constant(x if j == i else a) for j, a in enumerate(arrays)]
            with ad.no_grad():
                return build(*args).item()

        numeric = central_difference(f, arrays[i], FD_STEP)
        err = relative_error(p.grad, numeric)
        assert err <= FD_TOL, f"argument {i}: relative error {err:.2e}"


def away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def distinct_values(rng, shape, gap=0.01):
    """Values whose pairwise gaps exceed the finite-difference probe."""
    n = int(np.prod(shape))
    return rng.permutation(np.arange(n) * gap * 3 + rng.uniform(0, gap, n)).reshape(shape) - n * gap


# -- forward values ----------------------------------------------------------------


def test_affine_identity():
    out = ad.affine(ad.constant([[1.0, 0.0]]), ad.constant(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1.0, 0.0]])


def test_affine_matches_naive_matmul(rng):
    u, W, b = rng.normal(size=(5, 4)), rng.normal(size=(3, 4)), rng.normal(size=(1, 3))
    expected = naive_matmul(u, W.T) + b
    np.testing.assert_allclose(ad.affine(ad.constant(u), ad.constant(W), ad.constant(b)).data, expected, atol=1e-13)
    # Taped path takes a different kernel; same numbers.
    taped = ad.affine(ad.constant(u), Parameter("W", W), Parameter("b", b))
    np.testing.assert_allclose(taped.data, expected, atol=1e-13)


def test_affine_two_by_two():
    out = ad.affine(ad.constant([[1.0, 2.0]]), ad.constant([[1.0, 1.0], [0.0, 1.0]]))
    np.testing.assert_array_equal(out.data, naive_matmul([[1.0, 2.0]], [[1.0, 0.0], [1.0, 1.0]]))


def test_affine_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 3\).*\(2, 2\)"):
        ad.affine(ad.constant([[1.0, 2.0, 3.0]]), ad.constant(np.eye(2)))


def test_affine_rows_independent_of_batch(rng):
    u, W = rng.normal(size=(9, 6)), rng.normal(size=(5, 6))
    full = ad.affine(ad.constant(u), ad.constant(W)).data
    for i in range(9):
        assert np.array_equal(ad.affine(ad.constant(u[i : i + 1]), ad.constant(W)).data[0], full[i])


def test_relu_values_and_gradient():
    np.testing.assert_array_equal(ad.relu(ad.constant([[-1.0, 0.0, 2.0]])).data, [[0.0, 0.0, 2.0]])
    np.testing.assert_array_equal(ad.relu(ad.constant([[-3.0, -1.0]])).data, [[0.0, 0.0]])
    p = Parameter("x", [[-1.0, 0.0, 2.0]])
    ad.backpropagate(ad.sum_all(ad.relu(p)))
    np.testing.assert_array_equal(p.grad, [[0.0, 0.0, 1.0]])


def test_layer_normalize_cases():
    one, zero = ad.constant([[1.0, 1.0]]), ad.constant([[0.0, 0.0]])
    np.testing.assert_allclose(ad.layer_normalize(ad.constant([[1.0, 3.0]]), one, zero).data, [[-1.0, 1.0]], atol=1e-4)
    np.testing.assert_array_equal(ad.layer_normalize(ad.constant([[2.0, 2.0]]), one, zero).data, [[0.0, 0.0]])
    five = ad.constant([[5.0, 5.0]])
    np.testing.assert_array_equal(ad.layer_normalize(ad.constant([[1.0, 3.0]]), zero, five).data, [[5.0, 5.0]])


def test_layer_normalize_matches_direct_formula(rng):
    u = rng.normal(size=(4, 6))
    mean = u.mean(axis=1, keepdims=True)
    var = ((u - mean) ** 2).mean(axis=1, keepdims=True)
    expected = (u - mean) / np.sqrt(var + 1e-5)
    got = ad.layer_normalize(ad.constant(u), ad.constant(np.ones((1, 6))), ad.constant(np.zeros((1, 6)))).data
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_max_pool_cases():
    np.testing.assert_array_equal(ad.set_max_pool(ad.constant([[1.0, 5.0], [3.0, 2.0]])).data, [[3.0, 5.0]])
    np.testing.assert_array_equal(ad.set_max_pool(ad.constant([[4.0, -1.0]])).data, [[4.0, -1.0]])
    with pytest.raises(ShapeError):
        ad.set_max_pool(ad.constant(np.zeros((0, 3))))


def test_max_pool_tie_goes_to_lowest_row():
    p = Parameter("x", [[2.0, 1.0], [2.0, 3.0], [0.0, 3.0]])
    ad.backpropagate(ad.sum_all(ad.set_max_pool(p)))
    np.testing.assert_array_equal(p.grad, [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 6)), elements=st.floats(-1e6, 1e6)), st.randoms())
def test_max_pool_permutation_invariant(x, rnd):
    perm = list(range(len(x)))
    rnd.shuffle(perm)
    assert np.array_equal(ad.set_max_pool(ad.constant(x)).data, ad.set_max_pool(ad.constant(x[perm])).data)


def test_segment_max_pool_matches_per_segment_pool(rng):
    x = rng.normal(size=(10, 3))
    lengths = [3, 1, 6]
    got = ad.segment_max_pool(ad.constant(x), lengths).data
    expected = np.vstack([x[0:3].max(0), x[3:4].max(0), x[4:].max(0)])
    np.testing.assert_array_equal(got, expected)
    with pytest.raises(ShapeError):
        ad.segment_max_pool(ad.constant(x), [3, 3])


def test_cross_entropy_values():
    assert ad.softmax_cross_entropy(ad.constant([[0.0] * 4]), 2).item() == pytest.approx(math.log(4), abs=1e-12)
    # Frozen from the formula log(1 + e^-10).
    assert ad.softmax_cross_entropy(ad.constant([[10.0, 0.0]]), 0).item() == pytest.approx(4.5398899216870535e-05, rel=1e-9)


def test_cross_entropy_gradient_sums_to_zero(rng):
    p = Parameter("z", rng.normal(size=(1, 5)))
    ad.backpropagate(ad.softmax_cross_entropy(p, 3))
    assert abs(p.grad.sum()) < 1e-15


@pytest.mark.parametrize("target", [-1, 2])
def test_cross_entropy_target_range(target):
    with pytest.raises(ValueError):
        ad.softmax_cross_entropy(ad.constant([[1.0, 2.0]]), target)


def test_cross_entropy_needs_two_classes():
    with pytest.raises(ValueError):
        ad.softmax_cross_entropy(ad.constant([[1.0]]), 0)


def test_cosine_cases():
    a = ad.constant([[1.0, 2.0]])
    assert ad.cosine_similarity(a, ad.constant([[2.0, 4.0]])).item() == pytest.approx(1.0, abs=1e-15)
    assert ad.cosine_similarity(a, ad.constant([[-2.0, 1.0]])).item() == 0.0
    assert ad.cosine_similarity(a, ad.constant([[-1.0, -2.0]])).item() == pytest.approx(-1.0, abs=1e-15)


def test_cosine_degenerate_is_zero_with_warning():
    with pytest.warns(DegenerateCosineWarning):
        assert ad.cosine_similarity(ad.constant([[0.0, 0.0]]), ad.constant([[1.0, 0.0]])).item() == 0.0
    with pytest.warns(DegenerateCosineWarning):
        out = ad.cosine_matrix(ad.constant([[0.0, 0.0], [1.0, 0.0]]), ad.constant([[1.0, 1.0]]))
    assert out.data[0, 0] == 0.0


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError) as info:
        ad.exp(ad.constant([[1000.0]]))
    assert info.value.op == "exp" and info.value.phase == "forward"


def test_non_finite_backward_names_op():
    p = Parameter("x", [[1e-200]])
    loss = ad.sum_all(ad.reciprocal(p))
    with pytest.raises(NonFiniteError) as info:
        ad.backpropagate(loss)
    assert info.value.phase == "backward" and info.value.op == "reciprocal"


# -- gradients ---------------------------------------------------------------------


def test_gradcheck_affine(rng):
    gradcheck(lambda u, W, b: ad.sum_all(ad.mul(ad.affine(u, W, b), ad.affine(u, W, b))),
              [rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), rng.normal(size=(1, 2))])


def test_gradcheck_relu(rng):
    w = rng.normal(size=(3, 4))
    gradcheck(lambda x: ad.sum_all(ad.mul(ad.relu(x), ad.constant(w))), [away_from_zero(rng, (3, 4))])


def test_gradcheck_layer_normalize(rng):
    w = rng.normal(size=(3, 5))
    gradcheck(lambda u, g, b: ad.sum_all(ad.mul(ad.layer_normalize(u, g, b), ad.constant(w))),
              [rng.normal(size=(3, 5)), rng.normal(size=(1, 5)), rng.normal(size=(1, 5))])


def test_gradcheck_max_pools(rng):
    w = rng.normal(size=(1, 4))
    gradcheck(lambda x: ad.sum_all(ad.mul(ad.set_max_pool(x), ad.constant(w))), [distinct_values(rng, (5, 4))])
    w2 = rng.normal(size=(2, 4))
    gradcheck(lambda x: ad.sum_all(ad.mul(ad.segment_max_pool(x, [2, 4]), ad.constant(w2))),
              [distinct_values(rng, (6, 4))])


def test_gradcheck_cosines(rng):
    gradcheck(lambda a, b: ad.scale(ad.cosine_similarity(a, b), 3.0), [rng.normal(size=(1, 4)), rng.normal(size=(1, 4))])
    w = rng.normal(size=(3, 2))
    gradcheck(lambda a, b: ad.sum_all(ad.mul(ad.cosine_matrix(a, b), ad.constant(w))),
              [rng.normal(size=(3, 5)), rng.normal(size=(2, 5))])


def test_gradcheck_elementwise(rng):
    gradcheck(lambda a, b: ad.sum_all(ad.mul(ad.exp(a), ad.reciprocal(b))),
              [rng.normal(size=(2, 3)) * 0.5, rng.uniform(0.5, 2.0, size=(2, 3))])
    gradcheck(lambda a, b: ad.sum_all(ad.mul(ad.add(a, b), ad.neg(ad.transpose(ad.transpose(a))))),
              [rng.normal(size=(2, 3)), rng.normal(size=(1, 3))])


def test_gradcheck_mean_and_gather(rng):
    w = rng.normal(size=(2, 3))
    gradcheck(lambda t: ad.sum_all(ad.mul(ad.segment_mean(ad.gather_rows(t, [0, 2, 2, 1]), [1, 3]), ad.constant(w))),
              [rng.normal(size=(4, 3))])


def test_gradcheck_cross_entropy(rng):
    gradcheck(lambda z: ad.cross_entropy_rows(z, [0, 2, 1]), [rng.normal(size=(3, 4))])
    gradcheck(lambda z: ad.softmax_cross_entropy(z, 1), [rng.normal(size=(1, 3))])


def test_gradient_of_linear_sum(rng):
    u = rng.normal(size=(1, 3))
    W = Parameter("W", rng.normal(size=(2, 3)))
    ad.backpropagate(ad.sum_all(ad.affine(ad.constant(u), W)))
    np.testing.assert_allclose(W.grad, np.repeat(u, 2, axis=0), atol=1e-15)


# -- tape contract -----------------------------------------------------------------


def test_constant_loss_leaves_zero_gradients():
    p = Parameter("x", [[1.0, 2.0]])
    ad.backpropagate(ad.constant([[3.0]]))
    np.testing.assert_array_equal(p.grad, 0.0)


def test_two_backward_calls_double_gradients(rng):
    W = Parameter("W", rng.normal(size=(2, 3)))
    u = ad.constant(rng.normal(size=(4, 3)))
    loss = ad.sum_all(ad.mul(ad.affine(u, W), ad.affine(u, W)))
    ad.backpropagate(loss)
    once = W.grad.copy()
    ad.backpropagate(loss)
    np.testing.assert_allclose(W.grad, 2 * once, rtol=1e-15)


def test_loss_must_be_scalar():
    with pytest.raises(ShapeError):
        ad.backpropagate(Parameter("x", [[1.0, 2.0]]))


def test_shared_subexpression_accumulates():
    x = Parameter("x", [[3.0]])
    y = ad.mul(x, x)
    ad.backpropagate(ad.add(y, y))
    assert x.grad[0, 0] == 12.0


def test_no_grad_is_thread_local():
    seen = {}

    def worker():
        seen["other"] = ad.grad_enabled()

    with ad.no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
        assert not ad.grad_enabled()
        assert not ad.mul(Parameter("x", [[1.0]]), ad.constant([[2.0]])).requires_grad
    assert seen["other"] and ad.grad_enabled()


def test_tensors_are_two_dimensional():
    assert ad.constant(3.0).shape == (1, 1)
    assert ad.constant([1.0, 2.0]).shape == (1, 2)
    with pytest.raises(ShapeError):
        ad.constant(np.zeros((2, 2, 2)))


# -- optimizer ---------------------------------------------------------------------


def test_zero_gradient_leaves_parameters():
    store = ParamStore()
    p = store.add("w", [[1.0, -2.0]])
    ad.adam_step(store, 0.1)
    np.testing.assert_array_equal(p.data, [[1.0, -2.0]])
    assert store.step == 1


def test_adam_shrinks_square():
    store = ParamStore()
    w = store.add("w", [[1.0]])
    prev = 1.0
    for _ in range(10):
        store.zero_grad()
        ad.backpropagate(ad.mul(w, w))
        ad.adam_step(store, 0.1)
        assert abs(w.item()) < prev
        prev = abs(w.item())


def _scalar_adam(w, lr, steps):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2 * w
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= lr * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
    return w


def test_adam_matches_scalar_simulation():
    store = ParamStore()
    w = store.add("w", [[1.0]])
    for _ in range(10):
        store.zero_grad()
        ad.backpropagate(ad.mul(w, w))
        ad.adam_step(store, 0.1)
    assert w.item() == pytest.approx(_scalar_adam(1.0, 0.1, 10), abs=1e-14)


def test_adam_is_deterministic(rng):
    init = rng.normal(size=(3, 3))
    u = rng.normal(size=(5, 3))

    def run():
        store = ParamStore()
        W = store.add("W", init)
        for _ in range(5):
            store.zero_grad()
            h = ad.affine(ad.constant(u), W)
            ad.backpropagate(ad.sum_all(ad.mul(h, h)))
            ad.adam_step(store, 0.01)
        return W.data.copy()

    assert np.array_equal(run(), run())


def test_duplicate_parameter_names_rejected():
    store = ParamStore()
    store.add("w", [[1.0]])
    with pytest.raises(KeyError):
        store.add("w", [[2.0]])


def test_parameter_owns_its_buffer():
    init = np.array([[1.0, 2.0]])
    store = ParamStore()
    w = store.add("w", init)
    w.data += 1.0
    np.testing.assert_array_equal(init, [[1.0, 2.0]])


def test_zero_grad_resets_buffers():
    store = ParamStore()
    w = store.add("w", [[2.0]])
    ad.backpropagate(ad.mul(w, w))
    store.zero_grad()
    assert w.grad[0, 0] == 0.0


def test_degenerate_warning_category():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ad.row_normalize(ad.constant([[0.0, 0.0]]))
    assert caught and issubclass(caught[0].category, DegenerateCosineWarning)
