import numpy as np
import pytest

from pitasr import autodiff as ad
from pitasr.model import softmax_rows


def scalar(node):
    return float(node.data[0, 0])


class TestMatmul:
    def test_identity(self):
        a = ad.leaf(np.eye(2))
        b = ad.leaf([[3.0, 4.0], [5.0, 6.0]])
        assert np.array_equal(ad.matmul(a, b).data, b.data)

    def test_dot_product(self):
        out = ad.matmul(ad.leaf([[1.0, 2.0]]), ad.leaf([[3.0], [4.0]]))
        assert out.data.shape == (1, 1)
        assert scalar(out) == 11.0

    def test_backward_values(self):
        # upstream grad [[1]] on [[1,2]] @ [[3],[4]]
        a = ad.leaf([[1.0, 2.0]], requires_grad=True)
        b = ad.leaf([[3.0], [4.0]], requires_grad=True)
        with ad.Graph() as g:
            out = ad.matmul(a, b)
            ad.backward(g, out)
        assert np.allclose(a.grad, [[3.0, 4.0]])
        assert np.allclose(b.grad, [[1.0], [2.0]])

    def test_shape_error_names_shapes(self):
        with pytest.raises(ValueError, match=r"\(1, 2\).*\(3, 1\)"):
            ad.matmul(ad.leaf([[1.0, 2.0]]), ad.leaf([[1.0], [2.0], [3.0]]))


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert scalar(ad.sigmoid(ad.leaf([[0.0]]))) == 0.5

    def test_tanh_at_zero(self):
        assert scalar(ad.tanh(ad.leaf([[0.0]]))) == 0.0

    def test_sigmoid_derivative_at_zero(self):
        # central difference, h = 1e-5
        h = 1e-5
        central = (scalar(ad.sigmoid(ad.leaf([[h]])))
                   - scalar(ad.sigmoid(ad.leaf([[-h]])))) / (2 * h)
        x = ad.leaf([[0.0]], requires_grad=True)
        with ad.Graph() as g:
            ad.backward(g, ad.sigmoid(x))
        assert abs(central - 0.25) < 1e-9
        assert abs(x.grad[0, 0] - 0.25) < 1e-12

    def test_dispatcher_matches_named_ops(self):
        x = ad.leaf([[0.3, -0.7]])
        assert np.array_equal(ad.elementwise("tanh", x).data, ad.tanh(x).data)
        y = ad.leaf([[1.0, 2.0]])
        assert np.array_equal(ad.elementwise("add", x, y).data, ad.add(x, y).data)
        assert np.array_equal(ad.elementwise("mul", x, y).data, ad.mul(x, y).data)

    def test_dispatcher_rejects_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown elementwise kind"):
            ad.elementwise("relu", ad.leaf([[1.0]]))

    def test_add_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            ad.add(ad.leaf([[1.0]]), ad.leaf([[1.0, 2.0]]))


class TestConcat:
    def test_empty_left_operand(self):
        a = ad.leaf(np.zeros((2, 0)))
        b = ad.leaf([[1.0], [2.0]])
        assert np.array_equal(ad.concat_cols(a, b).data, b.data)

    def test_single_entries(self):
        out = ad.concat_cols(ad.leaf([[1.0]]), ad.leaf([[2.0]]))
        assert np.array_equal(out.data, [[1.0, 2.0]])

    def test_backward_splits(self):
        a = ad.leaf([[1.0]], requires_grad=True)
        b = ad.leaf([[2.0]], requires_grad=True)
        w = ad.leaf([[3.0, 5.0]])
        with ad.Graph() as g:
            root = ad.sum_all(ad.mul(ad.concat_cols(a, b), w))
            ad.backward(g, root)
        assert a.grad[0, 0] == 3.0
        assert b.grad[0, 0] == 5.0

    def test_row_mismatch(self):
        with pytest.raises(ValueError, match="row counts differ"):
            ad.concat_cols(ad.leaf(np.zeros((2, 1))), ad.leaf(np.zeros((3, 1))))


class TestSoftmaxCrossEntropy:
    def test_uniform_case(self):
        ce = ad.softmax_cross_entropy(ad.leaf([[0.0, 0.0]]), [0])
        assert abs(scalar(ce) - np.log(2.0)) < 1e-12

    def test_uniform_gradient(self):
        logits = ad.leaf([[0.0, 0.0]], requires_grad=True)
        with ad.Graph() as g:
            ad.backward(g, ad.sum_all(ad.softmax_cross_entropy(logits, [0])))
        assert np.allclose(logits.grad, [[-0.5, 0.5]])

    def test_large_logits_stay_finite(self):
        ce = ad.softmax_cross_entropy(ad.leaf([[1000.0, 0.0]]), [0])
        assert np.isfinite(scalar(ce))
        assert scalar(ce) < 1e-12  # the 1000-logit class holds all the mass

    def test_extreme_magnitudes_finite(self):
        rng = np.random.default_rng(0)
        logits = ad.leaf(rng.uniform(-1e3, 1e3, size=(6, 5)))
        ce = ad.softmax_cross_entropy(logits, rng.integers(0, 5, size=6))
        assert np.all(np.isfinite(ce.data))

    def test_posterior_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        z = rng.uniform(-1e3, 1e3, size=(20, 7))
        assert np.allclose(softmax_rows(z).sum(axis=1), 1.0, atol=1e-9)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="label out of range"):
            ad.softmax_cross_entropy(ad.leaf([[0.0, 0.0]]), [2])

    def test_label_count_mismatch(self):
        with pytest.raises(ValueError, match="labels for"):
            ad.softmax_cross_entropy(ad.leaf([[0.0, 0.0]]), [0, 1])


class TestBackward:
    def test_leaf_root(self):
        x = ad.leaf([[5.0]], requires_grad=True)
        with ad.Graph() as g:
            pass
        ad.backward(g, x)
        assert x.grad[0, 0] == 1.0

    def test_product_rule(self):
        x = ad.leaf([[2.0]], requires_grad=True)
        y = ad.leaf([[3.0]], requires_grad=True)
        with ad.Graph() as g:
            ad.backward(g, ad.mul(x, y))
        assert x.grad[0, 0] == 3.0
        assert y.grad[0, 0] == 2.0

    def test_fanout_accumulates(self):
        # f(x) = x + x  =>  df/dx = 2
        x = ad.leaf([[1.5]], requires_grad=True)
        with ad.Graph() as g:
            ad.backward(g, ad.add(x, x))
        assert x.grad[0, 0] == 2.0

    def test_non_scalar_root_rejected(self):
        x = ad.leaf([[1.0, 2.0]], requires_grad=True)
        with ad.Graph() as g:
            out = ad.add(x, x)
        with pytest.raises(ValueError, match="must be 1x1"):
            ad.backward(g, out)

    def test_double_backward_forbidden(self):
        x = ad.leaf([[1.0]], requires_grad=True)
        with ad.Graph() as g:
            root = ad.mul(x, x)
        ad.backward(g, root)
        with pytest.raises(RuntimeError, match="already"):
            ad.backward(g, root)

    def test_gradients_accumulate_across_graphs(self):
        # explicit reset is the trainer's job, backward never zeroes
        x = ad.leaf([[2.0]], requires_grad=True)
        for _ in range(2):
            with ad.Graph() as g:
                ad.backward(g, ad.mul(x, x))
        assert x.grad[0, 0] == 8.0
        x.zero_grad()
        assert x.grad[0, 0] == 0.0

    def test_construction_order_is_topological(self):
        x = ad.leaf([[1.0]], requires_grad=True)
        with ad.Graph() as g:
            a = ad.sigmoid(x)
            b = ad.mul(a, x)
            ad.sum_all(ad.add(b, a))
        position = {id(node): i for i, node in enumerate(g.nodes)}
        for node in g.nodes:
            for parent in node.parents:
                if id(parent) in position:
                    assert position[id(parent)] < position[id(node)]

    def test_untracked_outside_graph(self):
        x = ad.leaf([[1.0]], requires_grad=True)
        out = ad.mul(x, x)
        assert out.graph is None and out._backward is None


def _random_leaf(rng, shape, requires_grad=True):
    return ad.leaf(rng.uniform(-2.0, 2.0, size=shape), requires_grad=requires_grad)


def _fd_check(build, leaves, h=1e-5):
    """check_gradients over the concatenation of all leaves' entries."""
    sizes = [p.data.size for p in leaves]

    def f(theta):
        offset = 0
        for p, n in zip(leaves, sizes):
            p.data[...] = theta[offset:offset + n].reshape(p.data.shape)
            p.zero_grad()
            offset += n
        with ad.Graph() as g:
            root = build()
            ad.backward(g, root)
        grad = np.concatenate([p.grad.reshape(-1) for p in leaves])
        return float(root.data[0, 0]), grad

    theta0 = np.concatenate([p.data.reshape(-1) for p in leaves])
    return ad.check_gradients(f, theta0, h=h)


class TestPrimitiveGradients:
    """Every differentiable primitive vs central differences (h=1e-5)."""

    @pytest.mark.parametrize("trial", range(20))
    def test_composite_random_instances(self, trial):
        rng = np.random.default_rng(100 + trial)
        a = _random_leaf(rng, (3, 4))
        b = _random_leaf(rng, (4, 2))
        c = _random_leaf(rng, (3, 2))
        v = _random_leaf(rng, (1, 2))
        w = ad.leaf(rng.normal(size=(3, 4)))  # fixed upstream weighting

        def build():
            m = ad.matmul(a, b)                      # 3x2
            m = ad.add_rowvec(ad.add(m, c), v)       # 3x2
            m = ad.concat_cols(ad.sigmoid(m), ad.tanh(ad.mul(m, c)))  # 3x4
            top = ad.slice_rows(m, 0, 2)
            bottom = ad.slice_rows(m, 2, 3)
            m = ad.stack_rows([ad.slice_rows(top, 0, 1),
                               ad.slice_rows(top, 1, 2),
                               bottom])
            m = ad.slice_cols(ad.mul(m, w), 0, 4)
            return ad.scale(ad.sum_all(m), 0.37)

        assert _fd_check(build, [a, b, c, v]) < 1e-4

    @pytest.mark.parametrize("trial", range(20))
    def test_softmax_ce_random_instances(self, trial):
        rng = np.random.default_rng(200 + trial)
        logits = _random_leaf(rng, (2, 3))
        labels = rng.integers(0, 3, size=2)
        weights = ad.leaf(rng.uniform(0.5, 1.5, size=(2, 1)))

        def build():
            return ad.sum_all(ad.mul(ad.softmax_cross_entropy(logits, labels), weights))

        assert _fd_check(build, [logits]) < 1e-6


class TestCheckGradients:
    def test_quadratic_is_exact(self):
        def f(theta):
            return float(theta[0] ** 2), np.array([2.0 * theta[0]])

        assert ad.check_gradients(f, np.array([3.0]), h=1e-5) < 1e-9

    def test_rejects_nonpositive_h(self):
        with pytest.raises(ValueError, match="must be positive"):
            ad.check_gradients(lambda t: (0.0, t), np.zeros(1), h=0.0)

    def test_non_finite_f_raises(self):
        def f(theta):
            return float("inf"), np.zeros(1)

        with pytest.raises(FloatingPointError):
            ad.check_gradients(f, np.zeros(1))
