"""Cluster-assignment heads trained with the collapse-regularized modularity loss."""
import math
from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from config.settings import HeadConfig
from src.autodiff import ops
from src.autodiff.optim import ConstantLrSchedule, CyclicalLrSchedule, ParamStore, adam_step
from src.autodiff.tensor import Tensor
from src.graph.frame_graph import Partition, SimilarityGraph, merge_by_modularity, normalized_adjacency
from src.utils.errors import DegenerateGraphError, DivergenceError, NumericalError, ShapeError, StateError
from src.utils.logger import get_logger
from src.utils.seeding import STAGE_KEYS, derive_seed, make_rng

logger = get_logger("heads")

Params = Union[ParamStore, Mapping[str, Tensor]]


@dataclass(frozen=True)
class HeadInput:
    """Node features and graph for one mixture; the GCN also needs Ã."""

    features: np.ndarray
    graph: SimilarityGraph
    a_norm: Optional[sp.csr_matrix] = None

    @classmethod
    def build(cls, features: np.ndarray, graph: SimilarityGraph, kind: str = "mlp") -> "HeadInput":
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != graph.n:
            raise ShapeError(
                "features must have one row per graph node",
                {"features": list(features.shape), "n": graph.n},
            )
        return cls(features, graph, normalized_adjacency(graph) if kind == "gcn" else None)


@dataclass
class HeadResult:
    params: ParamStore
    assignments: np.ndarray
    losses: List[float] = field(default_factory=list)
    kind: str = "mlp"

    @property
    def loss_final(self) -> float:
        return self.losses[-1] if self.losses else float("nan")

    @property
    def steps(self) -> int:
        return len(self.losses)


@dataclass(frozen=True)
class ClusterResult:
    partition: Partition
    hardened: Partition
    head: HeadResult

    @property
    def k_eff(self) -> int:
        return self.partition.k


def init_head_params(kind: str, in_dim: int, config: HeadConfig, seed: int) -> ParamStore:
    rng = make_rng(seed)
    store = ParamStore("float64")
    mlp_in = in_dim
    if kind == "gcn":
        store.add("gcn.w", rng.standard_normal((in_dim, config.hidden)) * np.sqrt(2.0 / in_dim))
        store.add("gcn.b", np.zeros(config.hidden))
        mlp_in = config.hidden
    elif kind != "mlp":
        raise StateError(f"unknown head kind '{kind}'", {"kind": kind})
    store.add("mlp.w1", rng.standard_normal((mlp_in, config.hidden)) * np.sqrt(2.0 / mlp_in))
    store.add("mlp.b1", np.zeros(config.hidden))
    store.add("mlp.w2", rng.standard_normal((config.hidden, config.k_max)) * np.sqrt(2.0 / (config.hidden + config.k_max)))
    store.add("mlp.b2", np.zeros(config.k_max))
    return store


def _check_features(features, params: Params, key: str) -> None:
    width = params[key].shape[0]
    if len(features.shape) != 2 or features.shape[1] != width:
        raise ShapeError("feature width does not match head parameters", {"features": list(features.shape), "expected": width})


def mlp_assign(features: Union[np.ndarray, Tensor], params: Params) -> Tensor:
    """softmax(relu(F W1 + b1) W2 + b2), one row of S per node."""
    features = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=np.float64))
    _check_features(features, params, "mlp.w1")
    hidden = ops.relu(ops.add(ops.matmul(features, params["mlp.w1"]), params["mlp.b1"]))
    logits = ops.add(ops.matmul(hidden, params["mlp.w2"]), params["mlp.b2"])
    return ops.softmax_rows(logits)


def gcn_assign(a_norm: sp.spmatrix, features: np.ndarray, params: Params) -> Tensor:
    """One GCN layer relu(Ã X W + b) feeding the MLP head."""
    features = np.asarray(features, dtype=np.float64)
    _check_features(features, params, "gcn.w")
    if a_norm.shape != (features.shape[0], features.shape[0]):
        raise ShapeError("normalized adjacency does not match node count", {"a_norm": list(a_norm.shape), "n": features.shape[0]})
    propagated = ops.sparse_matmul(a_norm, Tensor(features))
    node = ops.relu(ops.add(ops.matmul(propagated, params["gcn.w"]), params["gcn.b"]))
    return mlp_assign(node, params)


def assign(head_input: HeadInput, params: Params, kind: str) -> Tensor:
    if kind == "gcn":
        if head_input.a_norm is None:
            raise StateError("GCN head needs a normalized adjacency")
        return gcn_assign(head_input.a_norm, head_input.features, params)
    return mlp_assign(head_input.features, params)


def dmon_terms(assignments: Tensor, graph: SimilarityGraph, k: Optional[int] = None) -> Tuple[Tensor, Tensor]:
    """Modularity term -Tr(S^T B S)/2m and collapse term (sqrt(k)/n)||S^T 1|| - 1."""
    if graph.m < 1:
        raise DegenerateGraphError("modularity loss needs at least one edge")
    n, columns = assignments.shape
    if n != graph.n:
        raise ShapeError("assignment rows do not match graph nodes", {"rows": n, "n": graph.n})
    k = columns if k is None else k
    quad = ops.trace_quadform(assignments, graph.adjacency, graph.degrees, graph.m)
    modularity = ops.scale(quad, -1.0 / (2.0 * graph.m))
    cluster_sizes = ops.reduce_sum(assignments, axis=0)
    collapse = ops.add(ops.scale(ops.l2_norm(cluster_sizes), math.sqrt(k) / n), -1.0)
    return modularity, collapse


def dmon_loss(assignments: Tensor, graph: SimilarityGraph, k: Optional[int] = None) -> Tensor:
    modularity, collapse = dmon_terms(assignments, graph, k)
    return ops.add(modularity, collapse)


def _schedule(config: HeadConfig):
    if config.schedule == "cyclical":
        return CyclicalLrSchedule(config.lr_min, config.lr, config.cycle_steps)
    return ConstantLrSchedule(config.lr)


def _step(store: ParamStore, head_input: HeadInput, kind: str, k_max: int, lr: float, step: int) -> float:
    try:
        loss = dmon_loss(assign(head_input, store, kind), head_input.graph, k_max)
    except NumericalError as error:
        raise DivergenceError(f"modularity loss diverged at step {step}", {"step": step, **error.details}) from error
    loss.backward()
    adam_step(store, lr)
    return loss.item()


def train_head(head_input: HeadInput, config: HeadConfig, seed: int) -> HeadResult:
    """Optimize a fresh head on one mixture's graph until the loss plateaus."""
    kind = config.kind
    if kind == "gcn" and head_input.a_norm is None:
        head_input = HeadInput.build(head_input.features, head_input.graph, "gcn")
    store = init_head_params(kind, head_input.features.shape[1], config, derive_seed(seed, STAGE_KEYS["head"]))
    schedule = _schedule(config)
    losses: List[float] = []
    best = math.inf
    stale = 0
    for step in range(config.max_steps):
        loss = _step(store, head_input, kind, config.k_max, schedule.lr_at(step), step)
        losses.append(loss)
        if loss < best - config.tol:
            best = loss
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    assignments = assign(head_input, store.detached(), kind).data
    logger.debug(f"Head ({kind}) stopped after {len(losses)} steps, loss={losses[-1]:.5f}")
    return HeadResult(params=store, assignments=assignments, losses=losses, kind=kind)


def train_head_amortized(inputs: Sequence[HeadInput], config: HeadConfig, seed: int) -> HeadResult:
    """One head trained across many mixture graphs; epochs visit graphs in a seeded order."""
    if not inputs:
        raise StateError("amortized training needs at least one graph")
    kind = config.kind
    widths = {item.features.shape[1] for item in inputs}
    if len(widths) != 1:
        raise ShapeError("all graphs need the same feature width", {"widths": sorted(widths)})
    if kind == "gcn":
        inputs = [item if item.a_norm is not None else HeadInput.build(item.features, item.graph, "gcn") for item in inputs]
    store = init_head_params(kind, widths.pop(), config, derive_seed(seed, STAGE_KEYS["head"]))
    schedule = _schedule(config)
    losses: List[float] = []
    step = 0
    for epoch in range(config.amortized_epochs):
        order = make_rng(seed, STAGE_KEYS["head"], epoch).permutation(len(inputs))
        epoch_losses = []
        for index in order:
            epoch_losses.append(_step(store, inputs[index], kind, config.k_max, schedule.lr_at(step), step))
            step += 1
        losses.append(float(np.mean(epoch_losses)))
        logger.info(f"Amortized head epoch {epoch + 1}/{config.amortized_epochs} mean loss={losses[-1]:.5f}")
    return HeadResult(params=store, assignments=np.zeros((0, config.k_max)), losses=losses, kind=kind)


def infer_head(head_input: HeadInput, params: ParamStore, config: HeadConfig) -> HeadResult:
    """Forward pass of an already trained (amortized) head on one mixture."""
    kind = config.kind
    if kind == "gcn" and head_input.a_norm is None:
        head_input = HeadInput.build(head_input.features, head_input.graph, "gcn")
    constants = params.detached()
    assignments = assign(head_input, constants, kind)
    loss = dmon_loss(assignments, head_input.graph, config.k_max).item()
    return HeadResult(params=params, assignments=assignments.data, losses=[loss], kind=kind)


def harden(assignments: np.ndarray, min_frac: float = 0.02) -> Tuple[Partition, List[int]]:
    """Argmax partition with small clusters dissolved into their next-best survivor.

    Returns the compact partition and the original column index of every
    surviving cluster.
    """
    assignments = np.asarray(assignments, dtype=np.float64)
    if assignments.ndim != 2 or assignments.shape[0] == 0:
        raise ShapeError("assignments must be a non-empty n x k matrix", {"shape": list(assignments.shape)})
    n, k = assignments.shape
    labels = np.argmax(assignments, axis=1)
    sizes = np.bincount(labels, minlength=k)
    threshold = max(2.0, min_frac * n)
    surviving = np.flatnonzero(sizes >= threshold)
    if surviving.size == 0:
        raise DegenerateGraphError("no cluster survives pruning", {"n": n, "threshold": threshold})
    dissolved = ~np.isin(labels, surviving)
    if dissolved.any():
        labels[dissolved] = surviving[np.argmax(assignments[dissolved][:, surviving], axis=1)]
    compact = np.searchsorted(surviving, labels)
    return Partition(compact, int(surviving.size)), surviving.tolist()


def cluster_frames(
    head_input: HeadInput,
    config: HeadConfig,
    seed: int,
    params: Optional[ParamStore] = None,
) -> ClusterResult:
    """Train (or apply a given) head, harden, and optionally merge clusters."""
    head = infer_head(head_input, params, config) if params is not None else train_head(head_input, config, seed)
    hardened, _ = harden(head.assignments, config.min_frac)
    partition = merge_by_modularity(head_input.graph, hardened) if config.merge_clusters else hardened
    return ClusterResult(partition=partition, hardened=hardened, head=head)
