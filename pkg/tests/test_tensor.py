import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cutlab.tensor import (
    Tensor,
    affine,
    backward,
    concat_cols,
    gradcheck,
    layer_norm,
    logsumexp,
    no_grad,
    stack_scalars,
)


def randt(shape, seed, requires_grad=True):
    return Tensor(np.random.default_rng(seed).standard_normal(shape), requires_grad=requires_grad)


class TestMatmul:
    def test_identity(self):
        out = Tensor(np.eye(2)) @ Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_projector_selects_row(self):
        out = Tensor([[1.0, 0.0], [0.0, 0.0]]) @ Tensor([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(out.data, [[5.0, 6.0], [0.0, 0.0]])

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))

    def test_gradients_match_finite_differences(self):
        a, b = randt((3, 4), 0), randt((4, 2), 1)
        probe = Tensor(np.random.default_rng(2).standard_normal((3, 2)))
        assert gradcheck(lambda: ((a @ b) * probe).sum(), [a, b]) < 1e-6

    def test_vector_matrix(self):
        v, w = randt(4, 3), randt((4, 2), 4)
        assert gradcheck(lambda: (v @ w).sum(), [v, w]) < 1e-6


class TestSoftmax:
    def test_uniform_on_equal_logits(self):
        out = Tensor([0.0, 0.0, 0.0]).softmax()
        assert np.allclose(out.data, 1 / 3, atol=1e-15)

    def test_large_logits_do_not_overflow(self):
        out = Tensor([1000.0, 1000.0]).softmax()
        assert np.array_equal(out.data, [0.5, 0.5])

    def test_direct_evaluation(self):
        out = Tensor([0.0, math.log(3.0)]).softmax()
        assert np.allclose(out.data, [0.25, 0.75], atol=1e-15)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="finite"):
            Tensor([np.inf, 0.0]).softmax()

    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=6))
    @settings(max_examples=60, deadline=None)
    def test_rows_sum_to_one_and_positive(self, logits):
        p = Tensor(logits).softmax().data
        assert abs(p.sum() - 1.0) <= 1e-12
        assert np.all(p > 0.0) and np.all(p < 1.0 + 1e-15)

    def test_gradients(self):
        t = randt(5, 7)
        probe = Tensor(np.random.default_rng(8).standard_normal(5))
        assert gradcheck(lambda: (t.softmax() * probe).sum(), [t]) < 1e-6


class TestLayerNorm:
    def test_constant_row_collapses_to_bias(self):
        x = Tensor(np.full((2, 4), 3.7))
        out = layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert np.allclose(out.data, 0.0, atol=1e-12)

    def test_two_point_row(self):
        out = layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        expected = 1.0 / math.sqrt(1.0 + 1e-5)
        assert np.allclose(out.data, [[expected, -expected]], atol=1e-15)

    def test_gradients(self):
        x, g, b = randt((3, 4), 10), randt(4, 11), randt(4, 12)
        probe = Tensor(np.random.default_rng(13).standard_normal((3, 4)))
        assert gradcheck(lambda: (layer_norm(x, g, b) * probe).sum(), [x, g, b]) < 1e-5

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)), Tensor(np.zeros(4)))


class TestBackward:
    def test_sum_gives_ones(self):
        p = randt(6, 1)
        backward(p.sum())
        assert np.array_equal(p.grad, np.ones(6))

    def test_half_squared_norm_gives_parameter(self):
        p = randt(5, 2)
        backward(((p * p).sum()) * 0.5)
        assert np.allclose(p.grad, p.data, atol=1e-15)

    def test_rejects_non_scalar(self):
        p = randt(3, 3)
        with pytest.raises(ValueError, match="scalar"):
            backward(p * 2.0)

    def test_rejects_second_backward(self):
        p = randt(3, 4)
        loss = p.sum()
        backward(loss)
        with pytest.raises(ValueError, match="consumed"):
            backward(loss)

    def test_rejects_graphless_loss(self):
        with pytest.raises(ValueError, match="graph"):
            backward(Tensor(1.0))

    def test_each_node_visited_exactly_once(self):
        p = randt(4, 5)
        y = (p * p).sum() + p.sum() * 0.5
        graph = y.graph
        assert len(graph.records) > 3
        backward(y)
        assert all(rec.visits == 1 for rec in graph.records)

    def test_params_detach_after_consumption(self):
        p = randt(3, 6)
        loss = p.sum()
        g = loss.graph
        backward(loss)
        y = p.sum()
        assert y.graph is not g and y.graph.live
        backward(y)

    def test_counter_increment(self):
        class C:
            backwards = 0
            forwards = 0

        c = C()
        p = randt(3, 7)
        backward(p.sum(), c)
        assert c.backwards == 1


class TestGradcheck:
    def test_quadratic_is_nearly_exact(self):
        p = randt(6, 20)
        target = Tensor(np.random.default_rng(21).standard_normal(6))
        err = gradcheck(lambda: (((p - target) * (p - target)).sum()) * 0.5, [p])
        assert err < 1e-9

    def test_softmax_cross_entropy_composite(self):
        p = randt(5, 22)
        err = gradcheck(lambda: logsumexp(p) - p.pick(2), [p])
        assert err < 1e-6

    def test_constant_function_has_zero_error(self):
        p = randt(4, 23)
        assert gradcheck(lambda: (p * 0.0).sum(), [p]) == 0.0

    def test_rejects_non_finite_objective(self):
        p = randt(3, 24)
        with pytest.raises(ValueError, match="finite"):
            gradcheck(lambda: p.sum() * np.inf, [p])


class TestOtherOps:
    def test_gelu_values(self):
        out = Tensor([0.0, 10.0, -10.0]).gelu()
        assert out.data[0] == 0.0
        assert abs(out.data[1] - 10.0) < 1e-12
        assert abs(out.data[2]) < 1e-12

    def test_elementwise_gradients(self):
        t = randt(6, 30)
        probe = Tensor(np.random.default_rng(31).standard_normal(6))
        assert gradcheck(lambda: (t.gelu() * probe).sum(), [t]) < 1e-6
        assert gradcheck(lambda: (t.exp() * probe).sum(), [t]) < 1e-6
        assert gradcheck(lambda: ((t * t + 1.0).log_clamped() * probe).sum(), [t]) < 1e-6

    def test_structural_op_gradients(self):
        m = randt((4, 6), 32)
        probe = Tensor(np.random.default_rng(33).standard_normal((4, 2)))
        assert gradcheck(lambda: ((m.slice_cols(2, 4)) * probe).sum(), [m]) < 1e-6
        assert gradcheck(lambda: m.gather_rows([1, 1, 3]).sum(), [m]) < 1e-6
        assert gradcheck(lambda: m.row(2).sum(), [m]) < 1e-6
        assert gradcheck(lambda: m.T.sum() + m.row(0).pick(1), [m]) < 1e-6

    def test_affine_matches_unfused(self):
        x, w, b = randt((3, 4), 34), randt((4, 2), 35), randt(2, 36)
        fused = affine(x, w, b)
        assert np.allclose(fused.data, x.data @ w.data + b.data, atol=1e-15)
        probe = Tensor(np.random.default_rng(37).standard_normal((3, 2)))
        assert gradcheck(lambda: (affine(x, w, b) * probe).sum(), [x, w, b]) < 1e-6

    def test_concat_and_stack(self):
        a, b = randt((3, 2), 38), randt((3, 1), 39)
        assert gradcheck(lambda: concat_cols([a, b]).sum(), [a, b]) < 1e-6
        s, t = randt((), 40), randt((), 41)
        out = stack_scalars([s, t])
        assert out.shape == (2,)
        assert gradcheck(lambda: (stack_scalars([s * 2.0, t * s])).sum(), [s, t]) < 1e-6

    def test_bias_broadcast_add(self):
        x, b = randt((3, 4), 42), randt(4, 43)
        out = x + b
        assert np.allclose(out.data, x.data + b.data[None, :], atol=1e-15)
        assert gradcheck(lambda: (x + b).sum(), [x, b]) < 1e-6
        with pytest.raises(ValueError, match="mismatch"):
            x + randt(3, 44)

    def test_no_grad_disables_recording(self):
        p = randt(3, 45)
        with no_grad():
            out = (p * p).sum()
        assert not out.requires_grad and out.graph is None

    def test_detach(self):
        p = randt(3, 46)
        d = p.detach()
        assert not d.requires_grad and d.graph is None
        d.data[0] = 99.0
        assert p.data[0] != 99.0
