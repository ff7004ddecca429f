# selftest.py
"""Built-in invariant suite behind the ``selftest`` command.

Each check draws random small structures, compares the library against an
independent brute-force computation and reports pass/fail with the worst
deviation seen.
"""
from dataclasses import replace
from typing import Dict, List, NamedTuple, Optional
import logging
import time

import numpy as np

from gradibd import diff_core as dc
from gradibd.bucketizer import BucketMatrix, nnz
from gradibd.icd_graph import GraphStats, IcdGraph, build_graph
from gradibd.metrics import auroc, average_precision
from gradibd.model import (ABLATION_GRID, Ablation, ModelConfig, ModelParams, aggregation_flops, count_params,
                           forward, incoming_weight_sums, loss)

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-4
EXACT_TOLERANCE = 1e-12
SMALL_CONFIG = ModelConfig(d_node=3, d_graph=4, depth=2, lam=0.3, d_hidden=3)
SMALL_VOCAB = 6


class CheckResult(NamedTuple):
    name: str
    passed: bool
    cases: int
    worst: float
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.cases} cases, worst deviation {self.worst:.3e} ({self.seconds:.1f}s)"


# === Random structures ===

def random_bucket_matrix(rng: np.random.Generator, n_codes: int = 8, n_buckets: int = 6,
                         density: float = 0.3, max_frequency: int = 4, tau: int = 7) -> BucketMatrix:
    dense = np.where(rng.random((n_codes, n_buckets)) < density,
                     rng.integers(1, max_frequency + 1, size=(n_codes, n_buckets)), 0)
    entries = {(int(c), int(b)): int(dense[c, b])
               for b in range(n_buckets) for c in range(n_codes) if dense[c, b] > 0}
    nonempty = tuple(sorted({b for _, b in entries}))
    return BucketMatrix(n_codes, n_buckets, tau, 0, entries, nonempty)


def random_graph(rng: np.random.Generator, n_codes: int = SMALL_VOCAB, max_nodes: int = 10,
                 max_buckets: int = 4, max_frequency: int = 4) -> IcdGraph:
    """A canonical graph with 1..max_nodes nodes spread over 1..max_buckets non-empty buckets."""
    n_buckets = int(rng.integers(1, max_buckets + 1))
    buckets = np.sort(rng.choice(3 * max_buckets, size=n_buckets, replace=False))
    budget = int(rng.integers(n_buckets, max(n_buckets, max_nodes) + 1))
    sizes = np.ones(n_buckets, dtype=int)
    for extra in rng.integers(0, n_buckets, size=budget - n_buckets):
        sizes[extra] += 1
    sizes = np.minimum(sizes, n_codes)
    members = []
    for bucket, size in zip(buckets, sizes):
        codes = np.sort(rng.choice(n_codes, size=size, replace=False))
        members.append((int(bucket), [(int(c), int(rng.integers(1, max_frequency + 1))) for c in codes]))
    return IcdGraph.from_buckets(7, members)


# === Independent implementations ===

def brute_force_auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (pos.size * neg.size))


def rank_walk_ap(scores: np.ndarray, labels: np.ndarray) -> float:
    order = sorted(range(scores.size), key=lambda i: -scores[i])
    hits, total = 0, 0.0
    for rank, i in enumerate(order, start=1):
        if labels[i] == 1:
            hits += 1
            total += hits / rank
    return total / hits


def brute_force_graph_counts(matrix: BucketMatrix) -> tuple:
    dense = matrix.to_dense()
    per_bucket = [int(np.count_nonzero(dense[:, b])) for b in range(dense.shape[1])]
    sizes = [s for s in per_bucket if s > 0]
    return int(np.count_nonzero(dense)), sum(a * b for a, b in zip(sizes, sizes[1:]))


def mean_aggregator_logit(graph: IcdGraph, arrays: Dict[str, np.ndarray], config: ModelConfig) -> float:
    """Plain-numpy forward with every message the unweighted mean of the predecessors."""
    H = arrays["E"][[n.code_id for n in graph.nodes]]
    predecessors = {}
    for src, dst in zip(graph.bucket_spans, graph.bucket_spans[1:]):
        for v in range(dst.start, dst.stop):
            predecessors[v] = list(range(src.start, src.stop))
    for i in range(config.depth):
        M = np.zeros_like(H)
        for v, preds in predecessors.items():
            M[v] = H[preds].mean(axis=0)
        H = np.maximum(0.0, (H + M) @ arrays[f"update.{i}.W"].T + arrays[f"update.{i}.b"])
    h = arrays["head.fc1.W"] @ H.mean(axis=0) + arrays["head.fc1.b"]
    h = (h - h.mean()) / np.sqrt(h.var() + dc.LAYER_NORM_EPS)
    h = np.maximum(0.0, h * arrays["head.norm.gamma"] + arrays["head.norm.beta"])
    return float((arrays["head.fc2.W"] @ h + arrays["head.fc2.b"])[0])


# === Checks ===

def check_gradients(rng: np.random.Generator, n_graphs: int = 50) -> float:
    """Worst relative error between backward and central differences over all parameters."""
    worst = 0.0
    for i in range(n_graphs):
        graph = random_graph(rng)
        config = replace(SMALL_CONFIG, ablation=ABLATION_GRID[i % len(ABLATION_GRID)])
        params = ModelParams.initialize(config, SMALL_VOCAB, rng)
        label = int(rng.integers(0, 2))
        dc.backward(loss(graph, label, params, config))
        analytic = {name: t.grad.copy() for name, t in params.named_parameters()}
        for name, tensor in params.named_parameters():
            numeric = dc.numerical_gradient(lambda: loss(graph, label, params, config).item(), tensor)
            worst = max(worst, dc.relative_error(analytic[name], numeric))
    return worst


def check_normalization(rng: np.random.Generator, n_graphs: int = 1000) -> float:
    worst = 0.0
    for _ in range(n_graphs):
        graph = random_graph(rng)
        if graph.n_edges == 0:
            continue
        has_incoming = graph.has_incoming()
        for ablation in ABLATION_GRID:
            config = replace(SMALL_CONFIG, ablation=ablation)
            params = ModelParams.initialize(config, SMALL_VOCAB, rng)
            sums = incoming_weight_sums(graph, params, config)
            worst = max(worst, float(np.max(np.abs(sums[has_incoming] - 1.0))),
                        float(np.max(np.abs(sums[~has_incoming]), initial=0.0)))
    return worst


def check_uniform_mean(rng: np.random.Generator, n_graphs: int = 100) -> float:
    config = replace(SMALL_CONFIG, ablation=Ablation(False, False, False))
    worst = 0.0
    for _ in range(n_graphs):
        graph = random_graph(rng)
        params = ModelParams.initialize(config, SMALL_VOCAB, rng)
        expected = mean_aggregator_logit(graph, params.arrays(), config)
        worst = max(worst, abs(forward(graph, params, config).item() - expected))
    return worst


def check_graph_oracle(rng: np.random.Generator, n_matrices: int = 1000) -> float:
    mismatches = 0
    for _ in range(n_matrices):
        matrix = random_bucket_matrix(rng, n_codes=int(rng.integers(1, 9)), n_buckets=int(rng.integers(1, 9)),
                                      density=float(rng.uniform(0.05, 0.8)))
        graph = build_graph(matrix)
        n_nodes, n_edges = brute_force_graph_counts(matrix)
        if (graph.n_nodes, graph.n_edges, nnz(matrix)) != (n_nodes, n_edges, n_nodes) \
                or sum(1 for _ in graph.edges()) != n_edges:
            mismatches += 1
    return float(mismatches)


def check_metric_oracles(rng: np.random.Generator, n_vectors: int = 200, max_n: int = 1000) -> float:
    worst = 0.0
    for _ in range(n_vectors):
        n = int(rng.integers(2, max_n + 1))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = (0, 1)
        scores = rng.random(n)
        if rng.random() < 0.5:
            scores = np.round(scores, 1)  # force ties
        worst = max(worst,
                    abs(auroc(scores, labels) - brute_force_auroc(scores, labels)),
                    abs(average_precision(scores, labels) - rank_walk_ap(scores, labels)))
    return worst


def check_complexity(rng: np.random.Generator, n_configs: int = 20) -> float:
    mismatches = 0
    for _ in range(n_configs):
        config = ModelConfig(d_node=int(rng.integers(1, 9)), d_graph=int(rng.integers(1, 9)),
                             depth=int(rng.integers(1, 5)), d_hidden=int(rng.integers(2, 9)))
        n_codes = int(rng.integers(1, 50))
        if count_params(config, n_codes) != ModelParams.initialize(config, n_codes, rng).size():
            mismatches += 1
        stats = GraphStats(int(rng.integers(1, 100)), int(rng.integers(1, 1000)), 3, 1.0, 5)
        doubled = stats._replace(n_edges=2 * stats.n_edges)
        if aggregation_flops(config, doubled) != 2 * aggregation_flops(config, stats):
            mismatches += 1
    return float(mismatches)


CHECKS: Dict[str, tuple] = {
    "gradient-vs-finite-differences": (check_gradients, 50, GRAD_TOLERANCE),
    "incoming-weights-sum-to-one": (check_normalization, 1000, EXACT_TOLERANCE),
    "uniform-equals-mean-aggregation": (check_uniform_mean, 100, EXACT_TOLERANCE),
    "graph-construction-oracle": (check_graph_oracle, 1000, 0.0),
    "metric-oracles": (check_metric_oracles, 200, EXACT_TOLERANCE),
    "complexity-accounting": (check_complexity, 20, 0.0),
}


def run_selftest(seed: int = 0, scale: float = 1.0,
                 only: Optional[List[str]] = None) -> List[CheckResult]:
    """Run the suite; ``scale`` shrinks the number of random cases for quick runs."""
    results = []
    for offset, (name, (check, cases, tolerance)) in enumerate(CHECKS.items()):
        if only and name not in only:
            continue
        n = max(1, int(round(cases * scale)))
        rng = np.random.default_rng([seed, offset])
        started = time.perf_counter()
        worst = check(rng, n)
        result = CheckResult(name, worst <= tolerance, n, worst, time.perf_counter() - started)
        (logger.info if result.passed else logger.error)(result.line())
        results.append(result)
    return results
