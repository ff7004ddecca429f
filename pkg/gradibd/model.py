# model.py
"""Context-aware, time-decay message passing over ICD-graphs.

Every node starts from its code's row of the shared embedding matrix E. Edge
weights combine rectified cosine similarity of the endpoint embeddings with the
source node's occurrence frequency, are normalized per target node and damped
by exp(-lambda * gap) across the bucket gap. After ``depth`` update rounds the
node features are mean-pooled and classified by linear -> layer norm -> ReLU ->
linear.
"""
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple
import logging

import numpy as np

from gradibd import diff_core as dc
from gradibd.diff_core import Tensor
from gradibd.errors import ConfigError, EmptyIncoming, ShapeMismatch
from gradibd.icd_graph import GraphStats, IcdGraph

logger = logging.getLogger(__name__)

SIM_FLOOR = 1e-6

PUBLISHED_FLOPS_M = 23.495
PUBLISHED_PARAMS_M = 0.172

FLOP_CONVENTION = (
    "1 multiply = 1 add = 1 FLOP (a multiply-add is 2); a d_out x d_in linear layer on one "
    "row costs 2*d_out*d_in + d_out; embedding lookups are free; per-edge similarity costs "
    "2*d_node + 3, node norms 2*d_node each; weighting, flooring, normalizing and decaying "
    "each cost 1 per edge; aggregation costs 2*d_in per edge per round; layer norm costs "
    "8 per feature; exp, sigmoid and loss are not counted"
)


@dataclass(frozen=True)
class Ablation:
    """Which information enters the edge weights: code similarity, frequency, time decay."""
    cs: bool = True
    cf: bool = True
    td: bool = True

    @property
    def label(self) -> str:
        parts = [name.upper() for name in ("cs", "cf", "td") if getattr(self, name)]
        return "+".join(parts) if parts else "Uniform"

    @classmethod
    def from_label(cls, label: str) -> "Ablation":
        """Inverse of ``label``, case-insensitive: ``"cs+td"`` or ``"uniform"``."""
        text = label.strip().lower()
        if text == "uniform":
            return cls(False, False, False)
        parts = set(text.split("+"))
        if not parts <= {"cs", "cf", "td"}:
            raise ConfigError(f"unknown ablation label {label!r}")
        return cls("cs" in parts, "cf" in parts, "td" in parts)

    @property
    def slug(self) -> str:
        """File-name form of the label, e.g. ``cs-cf-td``."""
        return self.label.lower().replace("+", "-")


# Rows of the ablation table, in reporting order.
ABLATION_GRID: Tuple[Ablation, ...] = (
    Ablation(True, True, True),
    Ablation(True, True, False),
    Ablation(True, False, True),
    Ablation(False, True, True),
    Ablation(False, False, True),
    Ablation(False, False, False),
)


def ablation_grid(axes: Sequence[str]) -> List[Ablation]:
    """Rows of ``ABLATION_GRID`` that only switch on the given axes (e.g. ``["cs", "cf", "td"]``)."""
    wanted = {a.strip().lower() for a in axes if a.strip()}
    unknown = wanted - {"cs", "cf", "td"}
    if unknown:
        raise ConfigError(f"unknown ablation axes {sorted(unknown)}; use cs, cf, td")
    return [a for a in ABLATION_GRID if {n for n in ("cs", "cf", "td") if getattr(a, n)} <= wanted]


@dataclass(frozen=True)
class ModelConfig:
    d_node: int = 64
    d_graph: int = 256
    depth: int = 3
    lam: float = 0.3
    d_hidden: int = 128
    ablation: Ablation = field(default_factory=Ablation)
    sim_floor: float = SIM_FLOOR

    def validate(self) -> "ModelConfig":
        for name in ("d_node", "d_graph", "depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_hidden < 2:
            raise ConfigError(f"d_hidden must be >= 2 for layer norm, got {self.d_hidden}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if not self.sim_floor > 0:
            raise ConfigError(f"sim_floor must be > 0, got {self.sim_floor}")
        return self

    def update_shapes(self) -> List[Tuple[int, int]]:
        """(d_out, d_in) of each update layer."""
        return [(self.d_graph, self.d_node if i == 0 else self.d_graph) for i in range(self.depth)]


def parameter_shapes(config: ModelConfig, n_codes: int) -> Dict[str, Tuple[int, ...]]:
    """Name -> shape for every parameter, in canonical order."""
    shapes: Dict[str, Tuple[int, ...]] = {"E": (n_codes, config.d_node)}
    for i, (d_out, d_in) in enumerate(config.update_shapes()):
        shapes[f"update.{i}.W"] = (d_out, d_in)
        shapes[f"update.{i}.b"] = (d_out,)
    shapes["head.fc1.W"] = (config.d_hidden, config.d_graph)
    shapes["head.fc1.b"] = (config.d_hidden,)
    shapes["head.norm.gamma"] = (config.d_hidden,)
    shapes["head.norm.beta"] = (config.d_hidden,)
    shapes["head.fc2.W"] = (1, config.d_hidden)
    shapes["head.fc2.b"] = (1,)
    return shapes


class ModelParams:
    """Named parameter tensors; E is shared by every patient graph."""

    def __init__(self, tensors: Mapping[str, Tensor]):
        self.tensors: Dict[str, Tensor] = dict(tensors)

    @classmethod
    def initialize(cls, config: ModelConfig, n_codes: int, rng: np.random.Generator) -> "ModelParams":
        """E ~ N(0, 1); linear weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        if n_codes < 1:
            raise ConfigError(f"vocabulary must hold at least one code, got {n_codes}")
        shapes = parameter_shapes(config, n_codes)
        tensors = {}
        for name, shape in shapes.items():
            if name == "E":
                data = rng.standard_normal(shape)
            elif name == "head.norm.gamma":
                data = np.ones(shape)
            elif name == "head.norm.beta":
                data = np.zeros(shape)
            else:
                fan_in = shapes[name.rsplit(".", 1)[0] + ".W"][1]
                bound = 1.0 / np.sqrt(fan_in)
                data = rng.uniform(-bound, bound, size=shape)
            tensors[name] = Tensor(data, name=name)
        return cls(tensors)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], config: ModelConfig,
                    n_codes: int) -> "ModelParams":
        expected = parameter_shapes(config, n_codes)
        if list(arrays) != list(expected):
            raise ShapeMismatch(f"parameter names {list(arrays)} do not match {list(expected)}")
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {arrays[name].shape}")
        return cls({name: Tensor(arrays[name], name=name) for name in expected})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self.tensors.items())

    def arrays(self) -> Dict[str, np.ndarray]:
        """Copies of the parameter values, safe to ship to other processes."""
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def gradients(self) -> Dict[str, np.ndarray]:
        return {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for name, t in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    @property
    def n_codes(self) -> int:
        return self.tensors["E"].shape[0]

    def size(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


# === Edge weights ===

def edge_weight(freq: float, src_embed: Tensor, dst_embed: Tensor, ablation: Ablation,
                sim_floor: float = SIM_FLOOR) -> Tensor:
    """Raw weight of one edge u_c -> v_d: freq * max(cos(src, dst), 0) + sim_floor."""
    factor: Tensor = Tensor(1.0)
    if ablation.cs:
        factor = dc.relu(dc.cosine_sim(src_embed, dst_embed))
    if ablation.cf:
        factor = factor * float(freq)
    return factor + sim_floor


def normalize_incoming(raw_weights: Sequence[Tensor]) -> List[Tensor]:
    """Scale the raw weights of one node's incoming edges to sum to 1."""
    if not raw_weights:
        raise EmptyIncoming("node has no incoming edges")
    raw = dc.stack([dc.reshape(dc.as_tensor(w), ()) for w in raw_weights])
    normalized = raw / dc.sum(raw)
    return [dc.reshape(dc.gather_rows(normalized, [i]), ()) for i in range(len(raw_weights))]


def incoming_weights(graph: IcdGraph, H0: Tensor, config: ModelConfig) -> Tensor:
    """Normalized, decayed weight of every edge, in ``graph.edge_index()`` order.

    Similarities come from the initial embeddings and stay fixed across the
    message-passing rounds of one forward. Work and storage grow with the edge
    count; no node-by-node matrix is formed.
    """
    ablation = config.ablation
    sources, targets, gaps = graph.edge_index()
    if ablation.cs:
        factor = dc.relu(dc.block_cosine(H0, graph.edge_blocks))
    else:
        factor = Tensor(np.ones(sources.size))
    if ablation.cf:
        factor = factor * graph.frequencies[sources]
    raw = factor + config.sim_floor
    totals = dc.segment_sum(raw, targets, graph.n_nodes)
    weights = raw / dc.gather_rows(totals, targets)
    if ablation.td:
        weights = weights * time_decay(gaps, config.lam)
    return weights


def time_decay(gaps: np.ndarray, lam: float) -> np.ndarray:
    """exp(-lambda * gap) with the gap in bucket units."""
    return np.exp(-lam * np.asarray(gaps, dtype=np.float64))


def incoming_weight_sums(graph: IcdGraph, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Per node, the sum of its undecayed normalized incoming weights; 0 without incoming edges."""
    if not graph.n_edges:
        return np.zeros(graph.n_nodes)
    plain = replace(config, ablation=replace(config.ablation, td=False))
    H0 = dc.gather_rows(params["E"], graph.code_ids)
    _, targets, _ = graph.edge_index()
    return np.bincount(targets, weights=incoming_weights(graph, H0, plain).data, minlength=graph.n_nodes)


# === Forward ===

def graph_embedding(graph: IcdGraph, params: ModelParams, config: ModelConfig) -> Tensor:
    """Pooled node features z of width d_graph; a zero vector for an empty graph."""
    if graph.n_nodes == 0:
        return Tensor(np.zeros(config.d_graph))
    H = dc.gather_rows(params["E"], graph.code_ids)
    weights = incoming_weights(graph, H, config) if graph.n_edges else None
    for i in range(config.depth):
        if weights is not None:
            H = H + dc.block_aggregate(weights, H, graph.edge_blocks)
        H = dc.relu(dc.linear(H, params[f"update.{i}.W"], params[f"update.{i}.b"]))
    return dc.mean_pool(H)


def classify(z: Tensor, params: ModelParams) -> Tensor:
    h = dc.linear(z, params["head.fc1.W"], params["head.fc1.b"])
    h = dc.relu(dc.layer_norm(h, params["head.norm.gamma"], params["head.norm.beta"]))
    return dc.reshape(dc.linear(h, params["head.fc2.W"], params["head.fc2.b"]), ())


def forward(graph: IcdGraph, params: ModelParams, config: ModelConfig) -> Tensor:
    """Scalar logit of one patient graph."""
    return classify(graph_embedding(graph, params, config), params)


def predict_proba(graph: IcdGraph, params: ModelParams, config: ModelConfig) -> float:
    return dc.sigmoid(forward(graph, params, config)).item()


def loss(graph: IcdGraph, label: int, params: ModelParams, config: ModelConfig) -> Tensor:
    return dc.bce_with_logit(forward(graph, params, config), label)


# === Complexity accounting ===

def count_params(config: ModelConfig, n_codes: int) -> int:
    S, dn, dg, dh = config.depth, config.d_node, config.d_graph, config.d_hidden
    return (n_codes * dn
            + (dn * dg + dg)
            + (S - 1) * (dg * dg + dg)
            + (dg * dh + dh + 2 * dh + dh * 1 + 1))


class FlopTerm(NamedTuple):
    name: str
    flops: int


def _linear_flops(d_out: int, d_in: int) -> int:
    return 2 * d_out * d_in + d_out


def flop_breakdown(config: ModelConfig, stats: GraphStats) -> List[FlopTerm]:
    """Itemized FLOPs of one forward pass over a graph with the given statistics."""
    n, e = stats.n_nodes, stats.n_edges
    ablation = config.ablation
    terms = []
    if ablation.cs:
        terms.append(FlopTerm("similarity.norms", n * 2 * config.d_node if e else 0))
        terms.append(FlopTerm("similarity.edges", e * (2 * config.d_node + 3)))
    if ablation.cf:
        terms.append(FlopTerm("edge.frequency", e))
    terms.append(FlopTerm("edge.floor", e))
    terms.append(FlopTerm("edge.normalize", 2 * e))
    if ablation.td:
        terms.append(FlopTerm("edge.decay", e))
    for i, (d_out, d_in) in enumerate(config.update_shapes()):
        terms.append(FlopTerm(f"round.{i}.aggregate", e * 2 * d_in))
        terms.append(FlopTerm(f"round.{i}.residual", n * d_in if e else 0))
        terms.append(FlopTerm(f"round.{i}.update", n * _linear_flops(d_out, d_in)))
        terms.append(FlopTerm(f"round.{i}.relu", n * d_out))
    terms.append(FlopTerm("pool", n * config.d_graph))
    terms.append(FlopTerm("head.fc1", _linear_flops(config.d_hidden, config.d_graph)))
    terms.append(FlopTerm("head.norm", 8 * config.d_hidden))
    terms.append(FlopTerm("head.relu", config.d_hidden))
    terms.append(FlopTerm("head.fc2", _linear_flops(1, config.d_hidden)))
    return terms


def aggregation_flops(config: ModelConfig, stats: GraphStats) -> int:
    return sum(t.flops for t in flop_breakdown(config, stats) if t.name.endswith(".aggregate"))


def count_flops(config: ModelConfig, stats: GraphStats) -> int:
    return sum(t.flops for t in flop_breakdown(config, stats))


def mean_graph_stats(stats: Sequence[GraphStats]) -> GraphStats:
    """Cohort-average graph statistics, rounded to whole nodes and edges."""
    if not stats:
        return GraphStats(0, 0, 0, 0.0, 0)
    return GraphStats(
        n_nodes=int(round(np.mean([s.n_nodes for s in stats]))),
        n_edges=int(round(np.mean([s.n_edges for s in stats]))),
        n_buckets=int(round(np.mean([s.n_buckets for s in stats]))),
        mean_gap=float(np.mean([s.mean_gap for s in stats])),
        max_in_degree=max(s.max_in_degree for s in stats),
    )


def describe(config: ModelConfig, n_codes: Optional[int] = None) -> str:
    text = (f"d_node={config.d_node} d_graph={config.d_graph} depth={config.depth} "
            f"lambda={config.lam} d_hidden={config.d_hidden} ablation={config.ablation.label}")
    if n_codes is not None:
        text += f" params={count_params(config, n_codes)}"
    return text
