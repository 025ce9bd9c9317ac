import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from aboots.services import autodiff as ad
from aboots.services.autodiff import Graph
from aboots.services.parameters import Group, ParameterSet
from aboots.services.utils import (
    ContractError,
    EmptyInputError,
    InvalidHyperparameterError,
    ShapeError,
)

EPS = 1e-6
POINTS = range(10)


def _loss_value(build, values, projection):
    graph = Graph()
    tensors = [graph.constant(value) for value in values]
    out = build(*tensors)
    return ad.total(ad.mul(out, projection)).item() if projection is not None else out.item()


def assert_gradients_match(build, values, seed, scalar=False):
    """Compares backward() with central differences for every input entry."""
    rng = np.random.default_rng(seed)
    graph = Graph()
    tensors = [graph.constant(value) for value in values]
    out = build(*tensors)
    projection = None if scalar else rng.normal(size=out.shape)
    loss = out if scalar else ad.total(ad.mul(out, projection))
    graph.backward(loss)

    for position, value in enumerate(values):
        numeric = np.zeros_like(value, dtype=np.float64)
        for entry in np.ndindex(*np.shape(value)):
            plus = [np.array(item, dtype=np.float64) for item in values]
            minus = [np.array(item, dtype=np.float64) for item in values]
            plus[position][entry] += EPS
            minus[position][entry] -= EPS
            numeric[entry] = (
                _loss_value(build, plus, projection) - _loss_value(build, minus, projection)
            ) / (2 * EPS)
        assert_allclose(graph.grad(tensors[position]), numeric, rtol=1e-4, atol=1e-8)


def _vectors(seed, *shapes):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=shape) for shape in shapes]


@pytest.mark.parametrize("seed", POINTS)
class TestPrimitiveGradients:
    def test_add_broadcasts(self, seed):
        assert_gradients_match(ad.add, _vectors(seed, (3, 4), (4,)), seed)

    def test_sub(self, seed):
        assert_gradients_match(ad.sub, _vectors(seed, (3,), (3,)), seed)

    def test_mul_broadcasts(self, seed):
        assert_gradients_match(ad.mul, _vectors(seed, (2, 3), (1, 3)), seed)

    def test_scale(self, seed):
        assert_gradients_match(lambda a: ad.scale(a, -2.5), _vectors(seed, (4,)), seed)

    @pytest.mark.parametrize("shapes", [((3,), (3, 4)), ((2, 3), (3,)), ((2, 3), (3, 4)), ((3,), (3,))])
    def test_matmul(self, seed, shapes):
        assert_gradients_match(ad.matmul, _vectors(seed, *shapes), seed)

    def test_tanh(self, seed):
        assert_gradients_match(ad.tanh, _vectors(seed, (5,)), seed)

    def test_sigmoid(self, seed):
        assert_gradients_match(ad.sigmoid, _vectors(seed, (5,)), seed)

    def test_exp(self, seed):
        assert_gradients_match(ad.exp, _vectors(seed, (5,)), seed)

    def test_log(self, seed):
        values = [np.abs(value) + 0.5 for value in _vectors(seed, (5,))]
        assert_gradients_match(ad.log, values, seed)

    def test_clip_inside_bounds(self, seed):
        values = [np.clip(value, -0.9, 0.9) for value in _vectors(seed, (5,))]
        assert_gradients_match(lambda a: ad.clip(a, -1.0, 1.0), values, seed)

    def test_mean(self, seed):
        assert_gradients_match(ad.mean, _vectors(seed, (2, 3)), seed, scalar=True)

    def test_concat(self, seed):
        assert_gradients_match(lambda a, b: ad.concat([a, b]), _vectors(seed, (2,), (3,)), seed)

    def test_stack(self, seed):
        assert_gradients_match(lambda a, b: ad.stack([a, b]), _vectors(seed, (3,), (3,)), seed)

    def test_index_and_column(self, seed):
        assert_gradients_match(lambda a: ad.index(a, 2), _vectors(seed, (4, 2)), seed)
        assert_gradients_match(lambda a: ad.column(a, 1), _vectors(seed, (3, 4)), seed)

    def test_softmax_with_temperature(self, seed):
        build = lambda a: ad.softmax_with_temperature(a, 0.7)
        assert_gradients_match(build, _vectors(seed, (6,)), seed)

    def test_log_softmax_with_temperature(self, seed):
        build = lambda a: ad.log_softmax_with_temperature(a, 1.3)
        assert_gradients_match(build, _vectors(seed, (6,)), seed)

    def test_l2_pooling(self, seed):
        build = lambda a, b, c: ad.l2_pooling([a, b, c])
        assert_gradients_match(build, _vectors(seed, (4,), (4,), (4,)), seed)

    def test_gru_cell(self, seed):
        values = _vectors(seed, (3,), (2,), (3, 6), (2, 6), (6,))
        assert_gradients_match(ad.gru_cell, values, seed)


class TestGraph:
    def test_param_is_bound_by_reference_once(self):
        parameters = ParameterSet()
        storage = parameters.add("w", np.ones(3), Group.GENERATOR)
        graph = Graph(parameters)
        first, second = graph.param("w"), graph.param("w")
        assert first is second
        assert first.value is storage

    def test_shared_parameter_accumulates_gradient(self):
        parameters = ParameterSet()
        parameters.add("w", np.array([1.0, 2.0]), Group.GENERATOR)
        graph = Graph(parameters)
        loss = ad.add(ad.total(graph.param("w")), ad.total(ad.mul(graph.param("w"), 3.0)))
        grads = graph.backward(loss)
        assert_allclose(grads["w"], [4.0, 4.0])

    def test_unreached_parameters_get_zeros(self):
        parameters = ParameterSet()
        parameters.add("used", np.ones(2), Group.GENERATOR)
        parameters.add("unused", np.ones((2, 2)), Group.DISCRIMINATOR)
        graph = Graph(parameters)
        grads = graph.backward(ad.total(graph.param("used")))
        assert_allclose(grads["unused"], np.zeros((2, 2)))

    def test_backward_needs_a_scalar(self):
        graph = Graph()
        with pytest.raises(ContractError):
            graph.backward(graph.constant([1.0, 2.0]))

    def test_backward_rejects_foreign_loss(self):
        loss = Graph().constant(1.0)
        with pytest.raises(ContractError):
            Graph().backward(loss)

    def test_mixing_graphs_fails(self):
        with pytest.raises(ContractError):
            ad.add(Graph().constant(1.0), Graph().constant(2.0))

    def test_detach_stops_gradient(self):
        graph = Graph()
        x = graph.constant([1.0, 2.0])
        loss = ad.total(ad.mul(x, ad.detach(x)))
        graph.backward(loss)
        assert_allclose(graph.grad(x), [1.0, 2.0])

    def test_operator_overloads(self):
        graph = Graph()
        x = graph.constant([1.0, 2.0])
        y = (2.0 * x - 1.0) * x + x
        assert_allclose(y.value, [2.0, 8.0])


class TestFusedOps:
    def test_softmax_sums_to_one_for_extreme_logits(self):
        graph = Graph()
        out = ad.softmax_with_temperature(graph.constant([1000.0, 0.0, -1000.0]), 1.0)
        assert np.isfinite(out.value).all()
        assert out.value.sum() == pytest.approx(1.0)

    @pytest.mark.parametrize("temperature", [0.0, -1.0])
    def test_softmax_rejects_bad_temperature(self, temperature):
        graph = Graph()
        with pytest.raises(InvalidHyperparameterError):
            ad.softmax_with_temperature(graph.constant([1.0, 2.0]), temperature)

    def test_low_temperature_sharpens(self):
        logits = np.array([1.0, 2.0, 3.0])
        sharp = ad.softmax_probabilities(logits, 0.1)
        flat = ad.softmax_probabilities(logits, 10.0)
        assert sharp[2] > 0.99
        assert flat.max() - flat.min() < 0.1

    def test_log_softmax_agrees_with_softmax(self):
        graph = Graph()
        logits = graph.constant([0.3, -1.2, 2.0, 0.0])
        assert_allclose(
            np.exp(ad.log_softmax_with_temperature(logits, 0.5).value),
            ad.softmax_with_temperature(logits, 0.5).value,
        )

    def test_l2_pooling_is_root_mean_square(self):
        graph = Graph()
        pooled = ad.l2_pooling([graph.constant([3.0, 0.0]), graph.constant([-4.0, 0.0])])
        assert_allclose(pooled.value, [np.sqrt(12.5), 0.0])

    def test_l2_pooling_of_one_vector_is_its_magnitude(self):
        graph = Graph()
        assert_allclose(ad.l2_pooling([graph.constant([-2.0, 1.0])]).value, [2.0, 1.0])

    def test_l2_pooling_zero_input_has_zero_gradient(self):
        graph = Graph()
        x = graph.constant([0.0, 0.0])
        graph.backward(ad.total(ad.l2_pooling([x])))
        assert_allclose(graph.grad(x), [0.0, 0.0])

    def test_l2_pooling_rejects_empty_and_ragged(self):
        graph = Graph()
        with pytest.raises(EmptyInputError):
            ad.l2_pooling([])
        with pytest.raises(ShapeError):
            ad.l2_pooling([graph.constant([1.0]), graph.constant([1.0, 2.0])])

    def test_gru_cell_rejects_mismatched_shapes(self):
        graph = Graph()
        x, h = graph.constant(np.zeros(3)), graph.constant(np.zeros(2))
        with pytest.raises(ShapeError):
            ad.gru_cell(x, h, graph.constant(np.zeros((4, 6))), graph.constant(np.zeros((2, 6))), graph.constant(np.zeros(6)))

    def test_gru_cell_with_zero_weights_halves_state(self):
        graph = Graph()
        h = np.array([0.4, -0.8])
        out = ad.gru_cell(
            graph.constant(np.ones(3)),
            graph.constant(h),
            graph.constant(np.zeros((3, 6))),
            graph.constant(np.zeros((2, 6))),
            graph.constant(np.zeros(6)),
        )
        assert_allclose(out.value, 0.5 * h)

    def test_gru_cell_saturated_update_gate_keeps_state(self):
        graph = Graph()
        rng = np.random.default_rng(5)
        h = rng.uniform(-0.9, 0.9, size=2)
        bias = np.zeros(6)
        bias[:2] = 50.0
        out = ad.gru_cell(
            graph.constant(np.zeros(3)),
            graph.constant(h),
            graph.constant(rng.normal(size=(3, 6))),
            graph.constant(rng.normal(size=(2, 6))),
            graph.constant(bias),
        )
        assert_allclose(out.value, h, atol=1e-12)

    @pytest.mark.parametrize("seed", [42, 43, 44])
    def test_gru_cell_matches_scalar_recurrence(self, seed):
        rng = np.random.default_rng(seed)
        x, h = float(rng.normal()), float(rng.uniform(-1, 1))
        w, u, b = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)

        def sigmoid(value):
            return 1.0 / (1.0 + math.exp(-value))

        z = sigmoid(x * w[0] + h * u[0] + b[0])
        r = sigmoid(x * w[1] + h * u[1] + b[1])
        n = math.tanh(x * w[2] + (r * h) * u[2] + b[2])
        expected = z * h + (1 - z) * n

        graph = Graph()
        out = ad.gru_cell(
            graph.constant([x]),
            graph.constant([h]),
            graph.constant(w.reshape(1, 3)),
            graph.constant(u.reshape(1, 3)),
            graph.constant(b),
        )
        assert out.value[0] == pytest.approx(expected, abs=1e-12)
        assert -1 < out.value[0] < 1

    def test_matmul_shape_errors(self):
        graph = Graph()
        with pytest.raises(ShapeError):
            ad.matmul(graph.constant(np.zeros(3)), graph.constant(np.zeros((2, 2))))
