import math

from hypothesis import given, settings
from hypothesis import strategies as st
import numpy as np
import pytest

from gradibd import diff_core as dc
from gradibd.diff_core import Tensor
from gradibd.errors import EmptyInput, NonFiniteGradient, NotScalar, ShapeMismatch


def _check_grad(build, *shapes, seed=0, tolerance=1e-6):
    """Compare backward against central differences for every input of ``build``."""
    rng = np.random.default_rng(seed)
    inputs = [Tensor(rng.normal(size=shape)) for shape in shapes]
    dc.backward(build(*inputs))
    for tensor in inputs:
        numeric = dc.numerical_gradient(lambda: build(*inputs).item(), tensor)
        assert dc.relative_error(tensor.grad, numeric) < tolerance


def test_add_broadcast_gradient():
    _check_grad(lambda a, b: dc.sum((a + b) * (a + b)), (3, 4), (4,))


def test_mul_div_gradient():
    _check_grad(lambda a, b: dc.sum(a * b / (b * b + 1.0)), (2, 3), (2, 3))


def test_matmul_gradient():
    _check_grad(lambda a, b: dc.sum(dc.exp(dc.matmul(a, b) * 0.1)), (3, 4), (4, 2))
    _check_grad(lambda a, b: dc.sum(dc.matmul(a, b) * dc.matmul(a, b)), (4,), (4, 3))


def test_gather_rows_accumulates_repeated_rows():
    table = Tensor(np.arange(6.0).reshape(3, 2))
    dc.backward(dc.sum(dc.gather_rows(table, [0, 2, 0])))
    assert table.grad.tolist() == [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]]


def test_layer_norm_symmetric_pair():
    out = dc.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    assert out.data == pytest.approx([-1.0, 1.0], abs=1e-5)


def test_layer_norm_gradient():
    _check_grad(lambda x, g, b: dc.sum(dc.layer_norm(x, g, b) * Tensor([1.0, -2.0, 0.5, 3.0])),
                (4,), (4,), (4,), tolerance=1e-5)


def test_layer_norm_needs_two_features():
    with pytest.raises(ShapeMismatch):
        dc.layer_norm(Tensor([1.0]), Tensor([1.0]), Tensor([0.0]))


def test_cosine_similarity_values_and_gradient():
    assert dc.cosine_sim(Tensor([1.0, 0.0]), Tensor([1.0, 1.0])).item() == pytest.approx(1 / math.sqrt(2))
    assert dc.cosine_sim(Tensor([0.0, 0.0]), Tensor([1.0, 1.0])).item() == 0.0
    _check_grad(lambda a, b: dc.cosine_sim(a, b), (5,), (5,))


BLOCKS = ((0, 2, 2, 3), (2, 3, 3, 6))


def test_block_cosine_matches_vector_version(rng):
    H = rng.normal(size=(6, 4))
    values = dc.block_cosine(Tensor(H), BLOCKS).data
    expected = [dc.cosine_sim(Tensor(H[v]), Tensor(H[u])).item()
                for s0, s1, d0, d1 in BLOCKS for v in range(d0, d1) for u in range(s0, s1)]
    assert values.shape == (2 + 3,)
    assert values == pytest.approx(expected, abs=1e-12)


def test_block_cosine_gradient():
    weights = Tensor(np.linspace(-1.0, 2.0, 5))
    _check_grad(lambda h: dc.sum(dc.block_cosine(h, BLOCKS) * weights), (6, 4))


def test_block_cosine_zero_row_is_finite():
    H = Tensor(np.vstack([np.zeros(3), np.ones((2, 3))]))
    dc.backward(dc.sum(dc.block_cosine(H, ((0, 1, 1, 3),))))
    assert np.all(np.isfinite(H.grad))


def test_segment_sum_and_gradient():
    values = Tensor([1.0, 2.0, 3.0, 4.0])
    out = dc.segment_sum(values, [2, 0, 2, 2], 4)
    assert out.data.tolist() == [2.0, 0.0, 8.0, 0.0]
    dc.backward(dc.sum(out * Tensor([1.0, 10.0, 100.0, 1000.0])))
    assert values.grad.tolist() == [100.0, 1.0, 100.0, 100.0]
    with pytest.raises(ShapeMismatch):
        dc.segment_sum(values, [0, 1, 2, 4], 4)


def test_block_aggregate_matches_explicit_sum(rng):
    H = rng.normal(size=(6, 3))
    w = rng.random(5)
    out = dc.block_aggregate(Tensor(w), Tensor(H), BLOCKS).data
    expected = np.zeros_like(H)
    expected[2] = w[0] * H[0] + w[1] * H[1]
    expected[3:6] = w[2:5, np.newaxis] * H[2]
    assert out == pytest.approx(expected, abs=1e-12)


def test_block_aggregate_gradient():
    _check_grad(lambda w, h: dc.sum(dc.exp(dc.block_aggregate(w, h, BLOCKS) * 0.3)), (5,), (6, 3))


def test_block_aggregate_rejects_wrong_edge_count():
    with pytest.raises(ShapeMismatch):
        dc.block_aggregate(Tensor(np.ones(4)), Tensor(np.ones((6, 3))), BLOCKS)


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor([-1.0, 0.0, 2.0])
    dc.backward(dc.sum(dc.relu(x)))
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


def test_bce_at_zero_logit():
    assert dc.bce_with_logit(Tensor(0.0), 1).item() == pytest.approx(math.log(2))


@given(st.floats(-500, 500), st.sampled_from([0, 1]))
def test_bce_is_finite_and_has_sigmoid_gradient(logit, label):
    z = Tensor(logit)
    value = dc.bce_with_logit(z, label)
    dc.backward(value)
    assert math.isfinite(value.item()) and value.item() >= 0
    assert z.grad == pytest.approx(dc.sigmoid(Tensor(logit)).item() - label, abs=1e-12)


def test_mean_pool_rejects_empty_input():
    with pytest.raises(EmptyInput):
        dc.mean_pool([])
    with pytest.raises(EmptyInput):
        dc.mean_pool(Tensor(np.zeros((0, 3))))


def test_linear_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        dc.linear(Tensor(np.ones(3)), Tensor(np.ones((2, 4))), Tensor(np.ones(2)))


def test_backward_needs_scalar():
    with pytest.raises(NotScalar):
        dc.backward(Tensor(np.ones(3)) * 2.0)


def test_backward_twice_gives_same_gradient():
    x = Tensor([1.0, 2.0])
    y = dc.sum(x * x)
    dc.backward(y)
    first = x.grad.copy()
    dc.backward(y)
    assert x.grad.tolist() == first.tolist()


def test_shared_value_accumulates_from_every_path():
    x = Tensor(3.0)
    y = x * x + x
    dc.backward(y)
    assert x.grad == pytest.approx(7.0)


def test_adam_minimizes_square():
    w = np.array([1.0])
    state = dc.AdamState(lr=0.1)
    for _ in range(100):
        updated, state = dc.adam_step({"w": w}, {"w": 2.0 * w}, state)
        w = updated["w"]
    assert abs(w[0]) < 0.05
    assert state.step == 100


def test_adam_first_step_moves_by_lr():
    updated, _ = dc.adam_step({"w": np.array([1.0, -1.0])}, {"w": np.array([0.3, -5.0])}, dc.AdamState(lr=0.01))
    assert updated["w"] == pytest.approx([0.99, -0.99], abs=1e-6)


def test_adam_refuses_non_finite_gradients():
    state = dc.AdamState()
    with pytest.raises(NonFiniteGradient) as excinfo:
        dc.adam_step({"w": np.ones(2)}, {"w": np.array([1.0, np.nan])}, state)
    assert excinfo.value.name == "w"
    assert state.step == 0 and not state.m


def test_adam_refuses_mismatched_shapes():
    with pytest.raises(ShapeMismatch):
        dc.adam_step({"w": np.ones(2)}, {"w": np.ones(3)}, dc.AdamState())


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000))
def test_composite_gradient_matches_finite_differences(seed):
    def build(x, W, b, g, beta):
        h = dc.relu(dc.linear(x, W, b))
        return dc.bce_with_logit(dc.sum(dc.layer_norm(h + 1.0, g, beta) * 0.3), 1)

    _check_grad(build, (3,), (4, 3), (4,), (4,), (4,), seed=seed, tolerance=1e-4)


def test_item_needs_a_single_value():
    assert Tensor([[2.5]]).item() == 2.5
    with pytest.raises(NotScalar):
        Tensor([1.0, 2.0]).item()
