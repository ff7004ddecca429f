# icd_graph.py
"""Per-patient temporally directed ICD-graph.

Nodes are (code, non-empty bucket) pairs stored bucket by bucket. Every node of
one non-empty bucket points to every node of the next one, so edges are implied
by the bucket spans and never stored.
"""
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, NamedTuple, Sequence, Tuple

import numpy as np

from gradibd import GRAPH_FORMAT_VERSION
from gradibd.bucketizer import BucketMatrix
from gradibd.errors import InvariantViolation, ParseError


class GraphNode(NamedTuple):
    node_index: int
    code_id: int
    bucket: int
    frequency: int


class BucketSpan(NamedTuple):
    """Contiguous node-index range [start, stop) of one non-empty bucket."""
    bucket: int
    start: int
    stop: int

    @property
    def size(self) -> int:
        return self.stop - self.start


class GraphStats(NamedTuple):
    n_nodes: int
    n_edges: int
    n_buckets: int
    mean_gap: float
    max_in_degree: int


@dataclass(frozen=True)
class IcdGraph:
    tau: int
    nodes: Tuple[GraphNode, ...]
    bucket_spans: Tuple[BucketSpan, ...]

    @classmethod
    def from_buckets(cls, tau: int, buckets: Sequence[Tuple[int, Sequence[Tuple[int, int]]]]) -> "IcdGraph":
        """Assemble a graph from ``[(bucket, [(code_id, frequency), ...]), ...]``.

        Node order inside a bucket is taken as given; buckets must be increasing.
        """
        nodes: List[GraphNode] = []
        spans: List[BucketSpan] = []
        previous = -1
        for bucket, members in buckets:
            if bucket <= previous:
                raise InvariantViolation("buckets", "bucket indices must be strictly increasing")
            if not members:
                raise InvariantViolation("buckets", f"bucket {bucket} has no nodes")
            seen = set()
            start = len(nodes)
            for code_id, frequency in members:
                if frequency < 1:
                    raise InvariantViolation("frequency", f"must be >= 1, got {frequency}")
                if code_id in seen:
                    raise InvariantViolation("code_id", f"code {code_id} repeated in bucket {bucket}")
                seen.add(code_id)
                nodes.append(GraphNode(len(nodes), int(code_id), int(bucket), int(frequency)))
            spans.append(BucketSpan(int(bucket), start, len(nodes)))
            previous = bucket
        return cls(tau, tuple(nodes), tuple(spans))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return sum(a.size * b.size for a, b in zip(self.bucket_spans, self.bucket_spans[1:]))

    @property
    def gaps(self) -> Tuple[int, ...]:
        """b_{i+1} - b_i for each consecutive pair of non-empty buckets."""
        return tuple(b.bucket - a.bucket for a, b in zip(self.bucket_spans, self.bucket_spans[1:]))

    @property
    def code_ids(self) -> np.ndarray:
        return np.array([n.code_id for n in self.nodes], dtype=np.int64)

    @property
    def frequencies(self) -> np.ndarray:
        return np.array([n.frequency for n in self.nodes], dtype=np.float64)

    @property
    def edge_blocks(self) -> Tuple[Tuple[int, int, int, int], ...]:
        """``(src_start, src_stop, dst_start, dst_stop)`` for each consecutive pair of bucket spans."""
        return tuple((src.start, src.stop, dst.start, dst.stop)
                     for src, dst in zip(self.bucket_spans, self.bucket_spans[1:]))

    def edges(self) -> Iterator[Tuple[int, int]]:
        """Explicit (source, target) node-index pairs in ``edge_index`` order."""
        for src, dst in zip(self.bucket_spans, self.bucket_spans[1:]):
            for v in range(dst.start, dst.stop):
                for u in range(src.start, src.stop):
                    yield u, v

    def edge_index(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Source node, target node and bucket gap of every edge.

        Edges run block by block, target-major inside a block, which is the
        layout of the per-edge vectors in ``diff_core``.
        """
        sources, targets, gaps = [], [], []
        for src, dst in zip(self.bucket_spans, self.bucket_spans[1:]):
            sources.append(np.tile(np.arange(src.start, src.stop), dst.size))
            targets.append(np.repeat(np.arange(dst.start, dst.stop), src.size))
            gaps.append(np.full(src.size * dst.size, dst.bucket - src.bucket, dtype=np.float64))
        if not sources:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0)
        return (np.concatenate(sources).astype(np.int64), np.concatenate(targets).astype(np.int64),
                np.concatenate(gaps))

    def has_incoming(self) -> np.ndarray:
        """True for every node outside the first non-empty bucket."""
        flags = np.ones(self.n_nodes, dtype=bool)
        if self.bucket_spans:
            flags[:self.bucket_spans[0].stop] = False
        return flags

    def node_gaps(self) -> np.ndarray:
        """Per node, the gap to its predecessor bucket; 0 for first-bucket nodes."""
        gaps = np.zeros(self.n_nodes, dtype=np.float64)
        for src, dst in zip(self.bucket_spans, self.bucket_spans[1:]):
            gaps[dst.start:dst.stop] = dst.bucket - src.bucket
        return gaps

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": GRAPH_FORMAT_VERSION,
            "tau": self.tau,
            "buckets": [
                {
                    "bucket_index": span.bucket,
                    "nodes": [{"code_id": n.code_id, "frequency": n.frequency}
                              for n in self.nodes[span.start:span.stop]],
                }
                for span in self.bucket_spans
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "IcdGraph":
        version = data.get("format_version")
        if version != GRAPH_FORMAT_VERSION:
            raise ParseError(f"unsupported graph format version {version!r}")
        try:
            return cls.from_buckets(data["tau"], [
                (b["bucket_index"], [(n["code_id"], n["frequency"]) for n in b["nodes"]])
                for b in data["buckets"]
            ])
        except (KeyError, TypeError) as e:
            raise ParseError(f"malformed graph: {e}") from None


def build_graph(matrix: BucketMatrix) -> IcdGraph:
    """Canonical graph of a bucket matrix: nodes by bucket, then code_id."""
    return IcdGraph.from_buckets(matrix.tau, list(matrix.iter_buckets()))


def graph_stats(graph: IcdGraph) -> GraphStats:
    gaps = graph.gaps
    spans = graph.bucket_spans
    return GraphStats(
        n_nodes=graph.n_nodes,
        n_edges=graph.n_edges,
        n_buckets=len(spans),
        mean_gap=float(np.mean(gaps)) if gaps else 0.0,
        max_in_degree=max((s.size for s in spans[:-1]), default=0),
    )
