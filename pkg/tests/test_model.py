from dataclasses import replace
import math

from hypothesis import given, settings
from hypothesis import strategies as st
import numpy as np
import pytest

from gradibd import diff_core as dc
from gradibd.diff_core import Tensor
from gradibd.errors import ConfigError, EmptyIncoming, ShapeMismatch
from gradibd.icd_graph import GraphStats, IcdGraph
from gradibd.model import (ABLATION_GRID, Ablation, ModelConfig, ModelParams, ablation_grid, aggregation_flops,
                           count_flops, count_params, edge_weight, flop_breakdown, forward, graph_embedding,
                           incoming_weight_sums, incoming_weights, loss, normalize_incoming, parameter_shapes,
                           predict_proba, time_decay)
from gradibd.selftest import SMALL_CONFIG, SMALL_VOCAB, mean_aggregator_logit, random_graph

GRAPH = IcdGraph.from_buckets(7, [(0, [(0, 1), (1, 3)]), (2, [(2, 1)]), (3, [(0, 2), (4, 1)])])


def _params(config, rng, n_codes=SMALL_VOCAB):
    return ModelParams.initialize(config, n_codes, rng)


def test_ablation_labels_and_grid_order():
    assert [a.label for a in ABLATION_GRID] == ["CS+CF+TD", "CS+CF", "CS+TD", "CF+TD", "TD", "Uniform"]
    assert Ablation.from_label("CF+TD") == Ablation(False, True, True)
    assert Ablation.from_label("Uniform") == Ablation(False, False, False)
    with pytest.raises(ConfigError):
        Ablation.from_label("CS+XX")


def test_ablation_grid_filters_axes():
    assert ablation_grid(["cs", "cf", "td"]) == list(ABLATION_GRID)
    assert [a.label for a in ablation_grid(["td"])] == ["TD", "Uniform"]
    with pytest.raises(ConfigError):
        ablation_grid(["cs", "age"])


def test_edge_weight_closed_form():
    w = edge_weight(2.0, Tensor([1.0, 0.0]), Tensor([1.0, 1.0]), Ablation())
    assert w.item() == pytest.approx(1.41422, abs=1e-5)


def test_edge_weight_rectifies_negative_similarity():
    w = edge_weight(3.0, Tensor([1.0, 0.0]), Tensor([-1.0, 0.0]), Ablation())
    assert w.item() == pytest.approx(1e-6)


def test_edge_weight_without_similarity_is_frequency():
    w = edge_weight(3.0, Tensor([1.0, 0.0]), Tensor([-1.0, 0.0]), Ablation(cs=False))
    assert w.item() == pytest.approx(3.0 + 1e-6)


def test_normalize_incoming():
    weights = normalize_incoming([Tensor(1.0), Tensor(3.0)])
    assert [w.item() for w in weights] == pytest.approx([0.25, 0.75])
    with pytest.raises(EmptyIncoming):
        normalize_incoming([])


def test_time_decay():
    assert time_decay(np.array([1.0]), 0.3)[0] == pytest.approx(0.740818, abs=1e-6)
    assert time_decay(np.array([0.0]), 0.3)[0] == 1.0


def _edge_weights(graph, params, config):
    return incoming_weights(graph, dc.gather_rows(params["E"], graph.code_ids), config)


def test_edge_weights_match_per_edge_formula(rng):
    config = replace(SMALL_CONFIG, ablation=Ablation())
    params = _params(config, rng)
    H0 = dc.gather_rows(params["E"], GRAPH.code_ids)
    weights = incoming_weights(GRAPH, H0, config).data
    sources, targets, gaps = GRAPH.edge_index()
    for v in (2, 3, 4):
        edges = np.flatnonzero(targets == v)
        raw = [edge_weight(GRAPH.nodes[u].frequency, Tensor(H0.data[u]), Tensor(H0.data[v]), config.ablation)
               for u in sources[edges]]
        decay = time_decay(gaps[edges[:1]], config.lam)[0]
        assert weights[edges] == pytest.approx([w.item() * decay for w in normalize_incoming(raw)], rel=1e-12)
    assert weights.shape == (GRAPH.n_edges,)


def test_decayed_sums_equal_decay_factor(rng):
    config = SMALL_CONFIG
    weights = _edge_weights(GRAPH, _params(config, rng), config).data
    _, targets, _ = GRAPH.edge_index()
    sums = np.bincount(targets, weights=weights, minlength=GRAPH.n_nodes)
    assert sums[2:] == pytest.approx(time_decay(GRAPH.node_gaps()[2:], config.lam))
    assert not sums[:2].any()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), which=st.integers(0, len(ABLATION_GRID) - 1))
def test_normalized_incoming_weights_sum_to_one(seed, which):
    rng = np.random.default_rng(seed)
    graph = random_graph(rng)
    config = replace(SMALL_CONFIG, ablation=ABLATION_GRID[which])
    sums = incoming_weight_sums(graph, _params(config, rng), config)
    has_incoming = graph.has_incoming()
    assert np.all(np.abs(sums[has_incoming] - 1.0) < 1e-12)
    assert not sums[~has_incoming].any()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), which=st.integers(0, len(ABLATION_GRID) - 1))
def test_logit_ignores_node_order_within_a_bucket(seed, which):
    rng = np.random.default_rng(seed)
    graph = random_graph(rng)
    shuffled = IcdGraph.from_buckets(graph.tau, [
        (span.bucket, [(graph.nodes[span.start + i].code_id, graph.nodes[span.start + i].frequency)
                       for i in rng.permutation(span.size)])
        for span in graph.bucket_spans
    ])
    config = replace(SMALL_CONFIG, ablation=ABLATION_GRID[which])
    params = _params(config, rng)
    assert forward(shuffled, params, config).item() == pytest.approx(forward(graph, params, config).item(),
                                                                     abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_undecayed_messages_stay_inside_predecessor_range(seed):
    rng = np.random.default_rng(seed)
    graph = random_graph(rng)
    if graph.n_edges == 0:
        return
    config = replace(SMALL_CONFIG, ablation=Ablation(True, True, False))
    params = _params(config, rng)
    H0 = dc.gather_rows(params["E"], graph.code_ids)
    messages = dc.block_aggregate(incoming_weights(graph, H0, config), H0, graph.edge_blocks).data
    for s0, s1, d0, d1 in graph.edge_blocks:
        lo, hi = H0.data[s0:s1].min(axis=0), H0.data[s0:s1].max(axis=0)
        assert np.all(messages[d0:d1] >= lo - 1e-12) and np.all(messages[d0:d1] <= hi + 1e-12)


@given(gap=st.integers(0, 50), extra=st.integers(1, 50), lam=st.floats(0.01, 2.0))
def test_time_decay_shrinks_with_gap_and_lambda(gap, extra, lam):
    near, far = time_decay(np.array([gap, gap + extra]), lam)
    assert 0.0 < far < near <= 1.0
    assert time_decay(np.array([gap + extra]), lam * 2)[0] <= far


def test_zero_lambda_decay_is_bit_identical_to_no_decay(rng):
    decayed = replace(SMALL_CONFIG, lam=0.0, ablation=Ablation(True, True, True))
    plain = replace(decayed, ablation=Ablation(True, True, False))
    params = _params(decayed, rng)
    assert forward(GRAPH, params, decayed).data.tobytes() == forward(GRAPH, params, plain).data.tobytes()


def test_similarity_carries_gradient_into_embeddings(rng):
    config = replace(SMALL_CONFIG, ablation=Ablation())
    params = _params(config, rng)
    params["E"].data = rng.random(params["E"].shape) + 0.1  # positive cosines, so relu passes gradient
    coefficients = Tensor(np.arange(1.0, GRAPH.n_edges + 1))

    def objective():
        return dc.sum(_edge_weights(GRAPH, params, config) * coefficients)

    dc.backward(objective())
    analytic = params["E"].grad.copy()
    assert analytic[GRAPH.code_ids].any()
    numeric = dc.numerical_gradient(lambda: objective().item(), params["E"])
    assert dc.relative_error(analytic, numeric) < 1e-6

    no_similarity = replace(config, ablation=Ablation(False, True, True))
    params.zero_grad()
    dc.backward(dc.sum(_edge_weights(GRAPH, params, no_similarity) * coefficients))
    assert not params.gradients()["E"].any()


def test_long_chain_keeps_weights_edge_sized(rng):
    chain = IcdGraph.from_buckets(7, [(b, [(b % SMALL_VOCAB, 1)]) for b in range(1600)])
    params = _params(SMALL_CONFIG, rng)
    assert _edge_weights(chain, params, SMALL_CONFIG).shape == (chain.n_edges,) == (1599,)
    dc.backward(loss(chain, 1, params, SMALL_CONFIG))
    assert np.all(np.isfinite(params["E"].grad))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_uniform_ablation_is_mean_aggregation(seed):
    rng = np.random.default_rng(seed)
    graph = random_graph(rng)
    config = replace(SMALL_CONFIG, ablation=Ablation(False, False, False))
    params = _params(config, rng)
    assert forward(graph, params, config).item() == pytest.approx(
        mean_aggregator_logit(graph, params.arrays(), config), abs=1e-12)


def test_empty_graph_pools_to_zero(rng):
    empty = IcdGraph.from_buckets(7, [])
    params = _params(SMALL_CONFIG, rng)
    assert not graph_embedding(empty, params, SMALL_CONFIG).data.any()
    assert 0.0 < predict_proba(empty, params, SMALL_CONFIG) < 1.0


def test_embedding_width(rng):
    params = _params(SMALL_CONFIG, rng)
    assert graph_embedding(GRAPH, params, SMALL_CONFIG).shape == (SMALL_CONFIG.d_graph,)


def test_loss_gradient_reaches_every_parameter(rng):
    config = SMALL_CONFIG
    params = _params(config, rng)
    dc.backward(loss(GRAPH, 1, params, config))
    touched = {name for name, t in params.named_parameters() if t.grad is not None}
    assert touched == set(parameter_shapes(config, SMALL_VOCAB))
    # Only rows of codes in the graph receive embedding gradient.
    assert not params["E"].grad[[3, 5]].any()


def test_model_gradient_matches_finite_differences(rng):
    config = SMALL_CONFIG
    params = _params(config, rng)
    dc.backward(loss(GRAPH, 0, params, config))
    analytic = {name: t.grad.copy() for name, t in params.named_parameters()}
    for name, tensor in params.named_parameters():
        numeric = dc.numerical_gradient(lambda: loss(GRAPH, 0, params, config).item(), tensor)
        assert dc.relative_error(analytic[name], numeric) < 1e-4, name


def test_from_arrays_checks_shapes(rng):
    params = _params(SMALL_CONFIG, rng)
    arrays = params.arrays()
    assert ModelParams.from_arrays(arrays, SMALL_CONFIG, SMALL_VOCAB).arrays().keys() == arrays.keys()
    arrays["E"] = arrays["E"][:-1]
    with pytest.raises(ShapeMismatch):
        ModelParams.from_arrays(arrays, SMALL_CONFIG, SMALL_VOCAB)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_hidden=1).validate()
    with pytest.raises(ConfigError):
        ModelConfig(lam=-0.1).validate()


def test_count_params_small_example():
    config = ModelConfig(d_node=2, d_graph=2, depth=1, d_hidden=2)
    assert count_params(config, 2) == 23


@settings(max_examples=20, deadline=None)
@given(d_node=st.integers(1, 8), d_graph=st.integers(1, 8), depth=st.integers(1, 4), d_hidden=st.integers(2, 8),
       n_codes=st.integers(1, 40))
def test_count_params_matches_initialized_size(d_node, d_graph, depth, d_hidden, n_codes):
    config = ModelConfig(d_node=d_node, d_graph=d_graph, depth=depth, d_hidden=d_hidden)
    params = ModelParams.initialize(config, n_codes, np.random.default_rng(0))
    assert count_params(config, n_codes) == params.size()


def test_aggregation_flops_are_linear_in_edges():
    config = ModelConfig()
    stats = GraphStats(40, 300, 8, 2.0, 10)
    doubled = stats._replace(n_edges=600)
    assert aggregation_flops(config, doubled) == 2 * aggregation_flops(config, stats)
    assert count_flops(config, stats) == sum(t.flops for t in flop_breakdown(config, stats))


def test_ablations_drop_their_flop_terms():
    stats = GraphStats(10, 20, 3, 1.0, 4)
    names = {t.name for t in flop_breakdown(ModelConfig(ablation=Ablation(False, False, False)), stats)}
    assert not any(n.startswith("similarity") for n in names)
    assert "edge.frequency" not in names and "edge.decay" not in names
    assert count_flops(ModelConfig(), stats) > count_flops(ModelConfig(ablation=Ablation(False, False, False)), stats)


def test_prediction_is_a_probability(rng):
    p = predict_proba(GRAPH, _params(SMALL_CONFIG, rng), SMALL_CONFIG)
    assert 0.0 < p < 1.0 and math.isfinite(p)
