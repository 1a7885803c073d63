import json
import logging
import math
import time
from typing import Dict, List, Optional, Sequence, Set, Tuple

import networkx as nx
import numpy as np
from jsonschema import validate
from networkx.algorithms.community import kernighan_lin_bisection

from eqhamnet.core.exceptions import PartitionError, UsageError
from eqhamnet.models.partition import PartitionAssignment, PartitionMethod, PartitionMetrics
from eqhamnet.models.structure import AtomGraph, AtomicStructure
from eqhamnet.services.schemas import PARTITION_METRICS_SCHEMA
from eqhamnet.services.structure_service import node_degrees

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Low-NN recursive bisection
# ---------------------------------------------------------------------------

def balanced_cut(weights: np.ndarray, min_side: int = 1) -> int:
    """Number of leading items whose weight sum best matches the trailing sum.

    Both sides keep at least ``min_side`` items; ties resolve to the smallest split.
    """
    n = len(weights)
    if n < 2 * min_side:
        raise PartitionError(f"Cannot split {n} atoms into two sides of at least {min_side}")
    prefix = np.cumsum(weights)
    total = prefix[-1]
    candidates = np.arange(min_side, n - min_side + 1)
    imbalance = np.abs(2 * prefix[candidates - 1] - total)
    return int(candidates[np.argmin(imbalance)])


def _select_dimension(cuts: Sequence[int], extent: np.ndarray, pbc: np.ndarray, r_cut: float) -> int:
    uncut = [d for d in range(3) if cuts[d] == 0]
    if uncut:
        return uncut[0]
    expected = np.empty(3)
    for d in range(3):
        if cuts[d] == 1 and pbc[d]:
            expected[d] = 1
        elif extent[d] <= 0:
            expected[d] = np.inf
        else:
            expected[d] = math.ceil(2.0 * r_cut / extent[d])
    minimizers = np.nonzero(expected == expected.min())[0]
    return int(minimizers.max())


def lownn_partition(structure: AtomicStructure, graph: AtomGraph, depth: int, r_cut: float,
                    initial_cuts: Tuple[int, int, int] = (0, 0, 0)) -> PartitionAssignment:
    """Recursive coordinate bisection to ``2**depth`` degree-balanced parts.

    Each level cuts one dimension: the lowest-index dimension not cut yet, otherwise the one
    with the fewest expected neighbors (ties go to the highest index). ``initial_cuts`` marks
    dimensions as already cut, e.g. the thin directions of a slab.
    """
    n = structure.n_atoms
    if depth < 0:
        raise PartitionError("Depth must be >= 0")
    if 2 ** depth > n:
        raise PartitionError(f"Depth {depth} needs {2 ** depth} parts but there are only {n} atoms")
    degrees = node_degrees(graph).astype(np.float64)
    positions = structure.positions
    cell_extent = np.linalg.norm(structure.cell, axis=1)
    node_to_part = np.zeros(n, dtype=np.int64)
    next_part = [0]

    def cut_domain(atoms: np.ndarray, level: int, cuts: List[int], top: bool):
        if level == 0:
            node_to_part[atoms] = next_part[0]
            next_part[0] += 1
            return
        coords = positions[atoms]
        if top:
            extent = np.where(structure.pbc, cell_extent, np.ptp(coords, axis=0))
        else:
            extent = np.ptp(coords, axis=0)
        dim = _select_dimension(cuts, extent, structure.pbc, r_cut)
        order = np.lexsort((atoms, coords[:, dim]))
        ordered = atoms[order]
        split = balanced_cut(degrees[ordered], min_side=2 ** (level - 1))
        logger.debug(
            f"Low-NN level {level}: cut dim {dim} of {len(atoms)} atoms at {split} "
            f"(cuts={cuts}, extent={np.round(extent, 3).tolist()})"
        )
        child_cuts = list(cuts)
        child_cuts[dim] += 1
        cut_domain(ordered[:split], level - 1, list(child_cuts), False)
        cut_domain(ordered[split:], level - 1, list(child_cuts), False)

    cut_domain(np.arange(n), depth, list(initial_cuts), True)
    return PartitionAssignment(2 ** depth, node_to_part, PartitionMethod.LOWNN)


# ---------------------------------------------------------------------------
# Min-cut baseline
# ---------------------------------------------------------------------------

def to_networkx(graph: AtomGraph) -> nx.Graph:
    """Undirected graph with edge weight = number of directed edges (images included) per pair."""
    g = nx.Graph()
    g.add_nodes_from(range(graph.n_nodes))
    for i, j in zip(graph.src.tolist(), graph.dst.tolist()):
        if i == j:
            continue
        if g.has_edge(i, j):
            g[i][j]["weight"] += 1
        else:
            g.add_edge(i, j, weight=1)
    return g


def _grow_region(g: nx.Graph, nodes: List[int], weight: Dict[int, float], target: float) -> Set[int]:
    """Greedy graph growing from the lowest-degree node, absorbing the frontier node with the
    best internal-minus-external edge weight until the region weight is closest to ``target``.
    """
    remaining = set(nodes)
    region: Set[int] = set()
    total = 0.0
    frontier: Dict[int, float] = {}
    candidate = int(min(nodes, key=lambda v: (g.degree(v), v)))
    while remaining:
        w = weight[candidate]
        if region and abs(total + w - target) >= abs(total - target):
            break
        region.add(candidate)
        remaining.discard(candidate)
        frontier.pop(candidate, None)
        total += w
        for nbr, data in g[candidate].items():
            if nbr in remaining:
                frontier[nbr] = frontier.get(nbr, 0.0) + 2 * data.get("weight", 1)
        if not remaining:
            break
        if frontier:
            candidate = max(frontier, key=lambda v: (frontier[v] - g.degree(v, weight="weight"), -v))
        else:
            candidate = min(remaining)
    return region


def mincut_partition(graph: AtomGraph, n_parts: int, seed: int = 0, max_iter: int = 10) -> PartitionAssignment:
    """Recursive bisection by greedy graph growing and Kernighan-Lin refinement.

    Nodes are weighted by in-degree; non-power-of-two part counts split proportionally.
    """
    if n_parts < 1:
        raise PartitionError("n_parts must be >= 1")
    if n_parts > graph.n_nodes:
        raise PartitionError(f"Cannot make {n_parts} parts from {graph.n_nodes} nodes")
    g = to_networkx(graph)
    degrees = node_degrees(graph)
    weight = {v: float(max(degrees[v], 1)) for v in range(graph.n_nodes)}
    rng = np.random.default_rng(seed)
    node_to_part = np.zeros(graph.n_nodes, dtype=np.int64)

    def bisect(nodes: List[int], parts: int, first: int):
        if parts == 1:
            node_to_part[nodes] = first
            return
        left_parts = parts // 2
        sub = g.subgraph(nodes)
        target = sum(weight[v] for v in nodes) * left_parts / parts
        left = _grow_region(sub, nodes, weight, target)
        right = set(nodes) - left
        if left and right and len(nodes) > 2:
            left, right = kernighan_lin_bisection(
                sub, partition=(left, right), max_iter=max_iter, weight="weight",
                seed=int(rng.integers(2 ** 31)),
            )
        left, right = sorted(left), sorted(right)
        if len(left) < left_parts or len(right) < parts - left_parts:
            raise PartitionError(f"Bisection of {len(nodes)} nodes left a side too small for its parts")
        bisect(left, left_parts, first)
        bisect(right, parts - left_parts, first + left_parts)

    bisect(list(range(graph.n_nodes)), n_parts, 0)
    return PartitionAssignment(n_parts, node_to_part, PartitionMethod.MINCUT)


# ---------------------------------------------------------------------------
# Metrics and exports
# ---------------------------------------------------------------------------

def _imbalance(counts: Sequence[int]) -> float:
    mean = float(np.mean(counts)) if len(counts) else 0.0
    return float(max(counts)) / mean if mean > 0 else 1.0


def compute_metrics(graph: AtomGraph, assignment: PartitionAssignment) -> PartitionMetrics:
    """Per-part load and the embeddings each part has to receive."""
    if assignment.n_nodes != graph.n_nodes:
        raise PartitionError("Assignment does not cover the graph")
    parts = assignment.node_to_part
    k = assignment.n_parts
    owner = assignment.edge_owner(graph)
    source_part = parts[graph.src]
    remote = owner != source_part
    # distinct (source node, receiving part) pairs
    pairs = np.unique(np.stack([graph.src[remote], owner[remote]], axis=1), axis=0) if remote.any() \
        else np.zeros((0, 2), dtype=np.int64)

    recv_volume = np.bincount(pairs[:, 1], minlength=k) if len(pairs) else np.zeros(k, dtype=np.int64)
    traffic: Dict[Tuple[int, int], int] = {}
    neighbors: List[Set[int]] = [set() for _ in range(k)]
    for node, q in pairs.tolist():
        p = int(parts[node])
        neighbors[q].add(p)
        traffic[(p, q)] = traffic.get((p, q), 0) + 1

    node_counts = np.bincount(parts, minlength=k).tolist()
    edge_counts = np.bincount(owner, minlength=k).tolist() if graph.n_edges else [0] * k
    return PartitionMetrics(
        method=assignment.method.value,
        n_parts=k,
        node_counts=[int(c) for c in node_counts],
        edge_counts=[int(c) for c in edge_counts],
        neighbor_counts=[len(s) for s in neighbors],
        recv_volume=[int(v) for v in recv_volume],
        neighbors=[sorted(s) for s in neighbors],
        traffic=traffic,
        node_imbalance=_imbalance(node_counts),
        edge_imbalance=_imbalance(edge_counts),
        total_communicated=int(recv_volume.sum()),
    )


def run_partition(method: str, structure: AtomicStructure, graph: AtomGraph, depth: int = 0,
                  n_parts: Optional[int] = None, seed: int = 0) -> Tuple[PartitionAssignment, PartitionMetrics]:
    start = time.perf_counter()
    if method == PartitionMethod.LOWNN.value:
        if n_parts is not None and n_parts != 2 ** depth:
            raise UsageError(f"Low-NN makes 2**depth parts; {n_parts} parts is not a power of two "
                             f"matching depth {depth}")
        assignment = lownn_partition(structure, graph, depth, graph.r_cut)
    elif method == PartitionMethod.MINCUT.value:
        assignment = mincut_partition(graph, n_parts if n_parts is not None else 2 ** depth, seed)
    else:
        raise UsageError(f"Unknown partition method: {method}")
    elapsed = time.perf_counter() - start
    metrics = compute_metrics(graph, assignment)
    metrics.wall_time = elapsed
    logger.info(
        f"{method}: {assignment.n_parts} parts in {elapsed:.3f}s, edge imbalance "
        f"{metrics.edge_imbalance:.3f}, mean neighbors {metrics.mean_neighbors:.2f}"
    )
    return assignment, metrics


def write_assignment(assignment: PartitionAssignment, path: str):
    with open(path, "w") as handle:
        for node, part in enumerate(assignment.node_to_part.tolist()):
            handle.write(f"{node} {part}\n")


def read_assignment(path: str, method: PartitionMethod = PartitionMethod.LOWNN) -> PartitionAssignment:
    pairs = np.loadtxt(path, dtype=np.int64, ndmin=2)
    order = np.argsort(pairs[:, 0])
    parts = pairs[order, 1]
    return PartitionAssignment(int(parts.max()) + 1, parts, method)


def write_metrics_json(metrics: PartitionMetrics, path: str):
    document = metrics.to_dict()
    validate(instance=document, schema=PARTITION_METRICS_SCHEMA)
    with open(path, "w") as handle:
        json.dump(document, handle, indent=2)


def write_topology_dot(metrics: PartitionMetrics, path: str):
    """Directed part graph; edge ``p -> q`` weighted by the embeddings ``q`` receives from ``p``."""
    lines = [f"digraph {metrics.method}_topology {{"]
    for q in range(metrics.n_parts):
        lines.append(
            f'  {q} [label="{q}", nodes={metrics.node_counts[q]}, edges={metrics.edge_counts[q]}];'
        )
    for (p, q), count in sorted(metrics.traffic.items()):
        lines.append(f"  {p} -> {q} [weight={count}, label={count}];")
    lines.append("}")
    with open(path, "w") as handle:
        handle.write("\n".join(lines) + "\n")
