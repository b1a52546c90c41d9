"""Thresholded frame-similarity graph and graph-quality metrics."""
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

from src.utils.errors import ArgumentError, DegenerateGraphError, FormatError, ShapeError
from src.utils.logger import get_logger

logger = get_logger("graph")

GRAPH_MAGIC = b"CDG1"
UNIT_NORM_TOL = 1e-5


@dataclass(frozen=True)
class SimilarityGraph:
    """Binary undirected graph over frames; B = A - dd^T/2m stays implicit."""

    n: int
    edges: np.ndarray
    adjacency: sp.csr_matrix
    degrees: np.ndarray
    m: int
    theta: float

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[Sequence[int]], theta: float = float("nan")) -> "SimilarityGraph":
        """Build from an edge list; pairs are canonicalized to i < j and deduplicated."""
        pairs = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
        if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
            raise ShapeError("edge endpoint out of range", {"n": n})
        if np.any(pairs[:, 0] == pairs[:, 1]):
            raise ShapeError("self-loops are not allowed")
        pairs = np.unique(np.sort(pairs, axis=1), axis=0)
        if pairs.shape[0] == 0:
            raise DegenerateGraphError("graph has no edges", {"n": n, "theta": theta})
        rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
        cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
        adjacency = sp.csr_matrix((np.ones(rows.shape[0]), (rows, cols)), shape=(n, n))
        adjacency.sort_indices()
        degrees = np.asarray(adjacency.sum(axis=1)).ravel()
        return cls(n=n, edges=pairs, adjacency=adjacency, degrees=degrees, m=int(pairs.shape[0]), theta=float(theta))

    def neighbors(self, node: int) -> np.ndarray:
        start, end = self.adjacency.indptr[node], self.adjacency.indptr[node + 1]
        return self.adjacency.indices[start:end]


@dataclass(frozen=True)
class Partition:
    labels: np.ndarray
    k: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1:
            raise ShapeError("partition labels must be a vector")
        if self.k < 1 or (labels.size and (labels.min() < 0 or labels.max() >= self.k)):
            raise ShapeError("labels must lie in [0, k)", {"k": self.k})
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_labels(cls, labels: Sequence[int]) -> "Partition":
        labels = np.asarray(labels, dtype=np.int64)
        return cls(labels, int(labels.max()) + 1 if labels.size else 1)

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)


def build_graph(embeddings: np.ndarray, theta: float) -> SimilarityGraph:
    """Edge (i, j) iff e_i . e_j >= theta over all pairs; ties keep the edge."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] < 2:
        raise ShapeError("need an n x d embedding matrix with n >= 2", {"shape": list(embeddings.shape)})
    norms = np.linalg.norm(embeddings, axis=1)
    if np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOL:
        raise ArgumentError("embedding rows must be unit-norm", {"max_deviation": float(np.max(np.abs(norms - 1.0)))})
    similarity = embeddings @ embeddings.T
    rows, cols = np.nonzero(np.triu(similarity >= theta, k=1))
    graph = SimilarityGraph.from_edges(embeddings.shape[0], np.stack([rows, cols], axis=1), theta)
    logger.debug(f"Built graph n={graph.n} m={graph.m} theta={theta}")
    return graph


def normalized_adjacency(graph: SimilarityGraph) -> sp.csr_matrix:
    """D^-1/2 (A + I) D^-1/2 with degrees taken after adding self-loops."""
    with_loops = graph.adjacency + sp.identity(graph.n, format="csr")
    inv_sqrt = sp.diags(1.0 / np.sqrt(graph.degrees + 1.0))
    normalized = (inv_sqrt @ with_loops @ inv_sqrt).tocsr()
    normalized.sort_indices()
    return normalized


def _require_edges(graph: SimilarityGraph) -> None:
    if graph.m < 1:
        raise DegenerateGraphError("graph has no edges", {"n": graph.n})


def _check_partition(graph: SimilarityGraph, partition: Partition) -> None:
    if partition.n != graph.n:
        raise ShapeError("partition size does not match graph", {"n": graph.n, "labels": partition.n})


def _internal_edge_counts(graph: SimilarityGraph, labels: np.ndarray, k: int) -> np.ndarray:
    left, right = labels[graph.edges[:, 0]], labels[graph.edges[:, 1]]
    same = left == right
    return np.bincount(left[same], minlength=k).astype(np.float64)


def modularity_oracle(graph: SimilarityGraph, partition: Partition) -> float:
    """Newman modularity (1/2m) sum_ij (A_ij - d_i d_j/2m) delta(g_i, g_j)."""
    _require_edges(graph)
    _check_partition(graph, partition)
    two_m = 2.0 * graph.m
    internal = _internal_edge_counts(graph, partition.labels, partition.k)
    degree_sums = np.bincount(partition.labels, weights=graph.degrees, minlength=partition.k)
    return float(np.sum(2.0 * internal - degree_sums ** 2 / two_m) / two_m)


def _node_mask(graph: SimilarityGraph, node_set) -> np.ndarray:
    node_set = np.asarray(node_set)
    if node_set.dtype == bool:
        if node_set.shape != (graph.n,):
            raise ShapeError("boolean node set must have one entry per node", {"n": graph.n})
        return node_set
    mask = np.zeros(graph.n, dtype=bool)
    mask[node_set.astype(np.int64)] = True
    return mask


def _edge_split(graph: SimilarityGraph, mask: np.ndarray):
    inside = mask[graph.edges[:, 0]].astype(np.int64) + mask[graph.edges[:, 1]]
    return int(np.sum(inside == 2)), int(np.sum(inside == 1))


def conductance(graph: SimilarityGraph, node_set) -> float:
    """c_s / (2 m_s + c_s); a set touching no edges scores 0."""
    mask = _node_mask(graph, node_set)
    size = int(mask.sum())
    if size == 0 or size == graph.n:
        raise ArgumentError("conductance needs a non-empty proper subset", {"size": size, "n": graph.n})
    internal, boundary = _edge_split(graph, mask)
    denominator = 2 * internal + boundary
    return boundary / denominator if denominator else 0.0


def modularity_metric(graph: SimilarityGraph, node_set) -> float:
    """(m_s - d_S^2 / 4m) / 4 for one community."""
    _require_edges(graph)
    mask = _node_mask(graph, node_set)
    if not mask.any():
        raise ArgumentError("modularity_metric needs a non-empty node set")
    internal, _ = _edge_split(graph, mask)
    degree_sum = float(graph.degrees[mask].sum())
    return (internal - degree_sum ** 2 / (4.0 * graph.m)) / 4.0


@dataclass(frozen=True)
class PartitionScores:
    conductance: float
    modularity: float
    community_modularity: float

    def to_dict(self) -> Dict[str, float]:
        return {"C": self.conductance, "Q": self.modularity, "Q_community": self.community_modularity}


def partition_scores(graph: SimilarityGraph, partition: Partition) -> PartitionScores:
    """Size-weighted conductance, Newman Q and the per-community sum, all x100."""
    _check_partition(graph, partition)
    sizes = partition.sizes()
    weighted = 0.0
    community = 0.0
    for cluster in np.flatnonzero(sizes):
        mask = partition.labels == cluster
        if sizes[cluster] < graph.n:
            weighted += sizes[cluster] / graph.n * conductance(graph, mask)
        community += modularity_metric(graph, mask)
    return PartitionScores(
        conductance=100.0 * weighted,
        modularity=100.0 * modularity_oracle(graph, partition),
        community_modularity=100.0 * community,
    )


def merge_by_modularity(graph: SimilarityGraph, partition: Partition) -> Partition:
    """Greedily merge the cluster pair with the largest positive modularity gain.

    Gain of merging a and b is E_ab/m - D_a D_b / 2m^2. Stops when no merge
    gains; ties go to the lowest (a, b). Labels come back compact.
    """
    _require_edges(graph)
    _check_partition(graph, partition)
    present = np.flatnonzero(partition.sizes())
    compact = np.searchsorted(present, partition.labels)
    k = present.shape[0]
    between = np.zeros((k, k))
    np.add.at(between, (compact[graph.edges[:, 0]], compact[graph.edges[:, 1]]), 1.0)
    between = between + between.T
    np.fill_diagonal(between, 0.0)
    degree_sums = np.bincount(compact, weights=graph.degrees, minlength=k)
    owner = np.arange(k)
    active = np.ones(k, dtype=bool)
    m = float(graph.m)

    while active.sum() > 1:
        gain = between / m - np.outer(degree_sums, degree_sums) / (2.0 * m * m)
        upper = np.triu(np.outer(active, active), k=1)
        gain = np.where(upper, gain, -np.inf)
        best = np.unravel_index(np.argmax(gain), gain.shape)
        if gain[best] <= 1e-12:
            break
        a, b = int(best[0]), int(best[1])
        between[a] += between[b]
        between[:, a] += between[:, b]
        between[a, a] = 0.0
        between[b] = 0.0
        between[:, b] = 0.0
        degree_sums[a] += degree_sums[b]
        degree_sums[b] = 0.0
        active[b] = False
        owner[owner == b] = a

    survivors = np.flatnonzero(active)
    relabel = np.searchsorted(survivors, owner)
    merged = Partition(relabel[compact], int(survivors.shape[0]))
    if merged.k < k:
        logger.debug(f"Merged {k} clusters into {merged.k}")
    return merged


def theta_sweep(embeddings: np.ndarray, thetas: Sequence[float], partition: Partition) -> List[Dict[str, Any]]:
    """Edge count and partition quality of `partition` at each threshold."""
    rows = []
    for theta in thetas:
        try:
            graph = build_graph(embeddings, theta)
        except DegenerateGraphError:
            rows.append({"theta": float(theta), "n": int(len(embeddings)), "m": 0, "C": None, "Q": None})
            continue
        scores = partition_scores(graph, partition)
        rows.append({"theta": float(theta), "n": graph.n, "m": graph.m, "C": scores.conductance, "Q": scores.modularity})
    return rows


def graph_report(graph: SimilarityGraph, partition: Optional[Partition] = None) -> Dict[str, Any]:
    report = {"theta": graph.theta, "n": graph.n, "m": graph.m, "conductance": None, "modularity": None}
    if partition is not None:
        scores = partition_scores(graph, partition)
        report["conductance"] = scores.conductance
        report["modularity"] = scores.modularity
    return report


def encode_graph(graph: SimilarityGraph) -> bytes:
    header = GRAPH_MAGIC + struct.pack("<QQ", graph.n, graph.m)
    return header + np.ascontiguousarray(graph.edges, dtype="<u4").tobytes()


def decode_graph(payload: bytes, theta: float = float("nan")) -> SimilarityGraph:
    if payload[:4] != GRAPH_MAGIC:
        raise FormatError("not a CDG1 graph file")
    if len(payload) < 20:
        raise FormatError("graph header truncated")
    n, m = struct.unpack("<QQ", payload[4:20])
    body = payload[20:]
    if len(body) != m * 8:
        raise FormatError("graph edge block has the wrong size", {"m": m, "bytes": len(body)})
    edges = np.frombuffer(body, dtype="<u4").reshape(m, 2).astype(np.int64)
    return SimilarityGraph.from_edges(int(n), edges, theta)


def save_graph(path: Union[str, Path], graph: SimilarityGraph) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_graph(graph))


def load_graph(path: Union[str, Path]) -> SimilarityGraph:
    """Read a CDG1 file; theta comes from the sibling .json report when present."""
    path = Path(path)
    try:
        payload = path.read_bytes()
    except FileNotFoundError as error:
        raise FormatError(f"graph file not found: {path}", {"path": str(path)}) from error
    theta = float("nan")
    report_path = path.with_suffix(".json")
    if report_path.exists():
        theta = float(json.loads(report_path.read_text()).get("theta", theta))
    return decode_graph(payload, theta)
