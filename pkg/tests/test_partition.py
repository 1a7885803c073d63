import json
import re

import numpy as np
import pytest

from eqhamnet.core.exceptions import PartitionError, UsageError
from eqhamnet.models.partition import PartitionAssignment, PartitionMethod
from eqhamnet.models.structure import AtomGraph, AtomicStructure
from eqhamnet.services.partition_service import (
    _select_dimension,
    balanced_cut,
    compute_metrics,
    lownn_partition,
    mincut_partition,
    read_assignment,
    run_partition,
    write_assignment,
    write_metrics_json,
    write_topology_dot,
)
from eqhamnet.services.structure_service import build_graph, node_degrees, tile
from tests.conftest import cubic_lattice, random_structure


def chain(n: int = 8) -> AtomicStructure:
    positions = [[float(i), 0.0, 0.0] for i in range(n)]
    return AtomicStructure.create(positions, [1] * n)


def two_cliques() -> AtomGraph:
    """Two 4-cliques joined by the single pair 3 - 4."""
    pairs = [(i, j) for group in (range(4), range(4, 8)) for i in group for j in group if i != j]
    pairs += [(3, 4), (4, 3)]
    src, dst = zip(*pairs)
    rng = np.random.default_rng(0)
    displacement = rng.normal(size=(len(pairs), 3))
    return AtomGraph.canonical(8, src, dst, displacement, np.zeros((len(pairs), 3)), 2.0, [1] * 8)


# Balanced cuts

def test_balanced_cut_even_weights():
    assert balanced_cut(np.ones(4)) == 2


def test_balanced_cut_tie_takes_smallest_split():
    assert balanced_cut(np.array([1.0, 2.0, 1.0])) == 1


def test_balanced_cut_respects_min_side():
    assert balanced_cut(np.array([10.0, 1.0, 1.0, 1.0]), min_side=2) == 2
    with pytest.raises(PartitionError):
        balanced_cut(np.ones(3), min_side=2)


def test_dimension_preference():
    pbc = np.array([False, False, False])
    # every dimension cut: fewest expected neighbors wins, ties go to the highest index
    assert _select_dimension([1, 1, 1], np.array([2.0, 8.0, 8.0]), pbc, 3.0) == 2
    assert _select_dimension([1, 1, 1], np.array([8.0, 8.0, 2.0]), pbc, 3.0) == 1
    assert _select_dimension([1, 1, 1], np.array([8.0, 8.0, 0.0]), pbc, 3.0) == 1
    # uncut dimensions come first
    assert _select_dimension([1, 0, 0], np.array([8.0, 8.0, 8.0]), pbc, 3.0) == 1


# Low-NN

def test_depth_zero_is_one_part(lattice):
    graph = build_graph(lattice, 1.05)
    assignment = lownn_partition(lattice, graph, 0, 1.05)
    assert assignment.n_parts == 1
    assert assignment.method is PartitionMethod.LOWNN
    assert not assignment.node_to_part.any()


def test_chain_splits_into_contiguous_pairs():
    structure = chain(8)
    graph = build_graph(structure, 1.1)
    assignment = lownn_partition(structure, graph, 2, 1.1)
    assert assignment.node_to_part.tolist() == [0, 0, 1, 1, 2, 2, 3, 3]


@pytest.mark.parametrize("depth", [5, 6, 7])
def test_deep_bisection_of_uniform_lattice(depth):
    structure = cubic_lattice(8, 1.0)
    graph = build_graph(structure, 1.05)
    assignment = lownn_partition(structure, graph, depth, 1.05)
    counts = np.bincount(assignment.node_to_part, minlength=2 ** depth)
    assert assignment.n_parts == 2 ** depth
    assert set(counts.tolist()) == {512 // 2 ** depth}


@pytest.fixture(scope="module")
def tiled_lattice():
    """16 x 16 x 16 periodic lattice, 4096 atoms of degree six."""
    structure = tile(cubic_lattice(2, 1.0), 8, 8, 8)
    return structure, build_graph(structure, 1.05)


def test_first_cut_of_periodic_lattice_has_one_neighbor(tiled_lattice):
    structure, graph = tiled_lattice
    assert structure.n_atoms == 4096
    metrics = compute_metrics(graph, lownn_partition(structure, graph, 1, 1.05))
    assert metrics.neighbor_counts == [1, 1]
    assert metrics.neighbors == [[1], [0]]


@pytest.mark.parametrize("depth", [1, 2, 3, 4, 5])
def test_lownn_edge_balance_on_periodic_lattice(tiled_lattice, depth):
    structure, graph = tiled_lattice
    metrics = compute_metrics(graph, lownn_partition(structure, graph, depth, 1.05))
    assert metrics.n_parts == 2 ** depth
    assert 1.0 <= metrics.edge_imbalance <= 1.15
    assert 1.0 <= metrics.node_imbalance


@pytest.mark.slow
def test_lownn_needs_fewer_neighbors_than_mincut(tiled_lattice):
    structure, graph = tiled_lattice
    lownn = compute_metrics(graph, lownn_partition(structure, graph, 5, 1.05))
    mincut = compute_metrics(graph, mincut_partition(graph, 32, seed=0))
    assert lownn.mean_neighbors <= mincut.mean_neighbors


def test_every_bisection_balances_degree():
    structure = random_structure(96, seed=6, box=7.0)
    graph = build_graph(structure, 2.5)
    degrees = node_degrees(graph)
    depth = 3
    parts = lownn_partition(structure, graph, depth, 2.5).node_to_part
    # parts are numbered depth-first, so every subtree owns a contiguous id range
    for level in range(depth):
        width = 2 ** (depth - level)
        for first in range(0, 2 ** depth, width):
            left = (parts >= first) & (parts < first + width // 2)
            right = (parts >= first + width // 2) & (parts < first + width)
            domain = left | right
            assert abs(int(degrees[left].sum()) - int(degrees[right].sum())) <= degrees[domain].max()


def test_partitions_are_deterministic():
    structure = random_structure(60, seed=4, box=6.0)
    graph = build_graph(structure, 2.5)
    assert lownn_partition(structure, graph, 3, 2.5) == lownn_partition(structure, graph, 3, 2.5)
    assert mincut_partition(graph, 4, seed=5) == mincut_partition(graph, 4, seed=5)


def test_metrics_match_edge_by_edge_count():
    structure = random_structure(64, seed=3, box=6.0)
    graph = build_graph(structure, 2.5)
    assignment = lownn_partition(structure, graph, 3, 2.5)
    metrics = compute_metrics(graph, assignment)
    parts = assignment.node_to_part

    edges = [0] * 8
    sources = [set() for _ in range(8)]
    for src, dst, _ in graph.edge_keys():
        q = int(parts[dst])
        edges[q] += 1
        if parts[src] != q:
            sources[q].add(src)
    assert metrics.edge_counts == edges
    assert metrics.recv_volume == [len(s) for s in sources]
    assert metrics.neighbors == [sorted({int(parts[s]) for s in group}) for group in sources]
    assert metrics.total_communicated == sum(len(s) for s in sources)
    assert metrics.node_counts == np.bincount(parts, minlength=8).tolist()


def test_lownn_rejects_too_many_parts(triangle):
    structure = AtomicStructure.create([[0, 0, 0], [1, 0, 0], [0.5, 0.8, 0]], [1, 8, 1])
    with pytest.raises(PartitionError):
        lownn_partition(structure, triangle, 2, 1.5)


def test_initial_cuts_skip_thin_dimensions():
    structure = cubic_lattice(4, 1.0)
    graph = build_graph(structure, 1.05)
    plain = lownn_partition(structure, graph, 1, 1.05)
    slab = lownn_partition(structure, graph, 1, 1.05, initial_cuts=(1, 0, 0))
    # the first cut moves from x to y
    x_split = structure.positions[plain.node_to_part == 0][:, 0].max()
    y_split = structure.positions[slab.node_to_part == 0][:, 1].max()
    assert x_split == pytest.approx(1.0)
    assert y_split == pytest.approx(1.0)


# Min-cut

def test_two_cliques_separate():
    assignment = mincut_partition(two_cliques(), 2, seed=0)
    assert assignment.method is PartitionMethod.MINCUT
    assert assignment.node_to_part.tolist() == [0, 0, 0, 0, 1, 1, 1, 1]
    metrics = compute_metrics(two_cliques(), assignment)
    assert metrics.recv_volume == [1, 1]


def test_mincut_beats_random_bisections():
    structure = random_structure(60, seed=8, box=6.0)
    graph = build_graph(structure, 2.5)
    parts = mincut_partition(graph, 2, seed=0).node_to_part
    cut = int(np.sum(parts[graph.src] != parts[graph.dst]))

    rng = np.random.default_rng(1)
    best = graph.n_edges
    for _ in range(50):
        side = np.zeros(graph.n_nodes, dtype=np.int64)
        side[rng.permutation(graph.n_nodes)[:graph.n_nodes // 2]] = 1
        best = min(best, int(np.sum(side[graph.src] != side[graph.dst])))
    assert cut <= 2 * best


def test_mincut_non_power_of_two(lattice):
    graph = build_graph(lattice, 1.05)
    assignment = mincut_partition(graph, 3, seed=1)
    counts = np.bincount(assignment.node_to_part, minlength=3)
    assert counts.sum() == 27
    assert np.all(counts > 0)


def test_mincut_too_many_parts(triangle):
    with pytest.raises(PartitionError):
        mincut_partition(triangle, 4)


# Metrics and exports

def test_triangle_metrics_three_parts(triangle):
    metrics = compute_metrics(triangle, PartitionAssignment(3, np.array([0, 1, 2]), PartitionMethod.MINCUT))
    assert metrics.node_counts == [1, 1, 1]
    assert metrics.edge_counts == [2, 2, 2]
    assert metrics.neighbor_counts == [2, 2, 2]
    assert metrics.recv_volume == [2, 2, 2]
    assert metrics.total_communicated == 6
    assert metrics.neighbors == [[1, 2], [0, 2], [0, 1]]
    assert metrics.node_imbalance == pytest.approx(1.0)


def test_single_part_has_no_traffic(triangle):
    metrics = compute_metrics(triangle, PartitionAssignment(1, np.zeros(3), PartitionMethod.LOWNN))
    assert metrics.total_communicated == 0
    assert metrics.traffic == {}


def test_exports_agree(tmp_path, triangle):
    metrics = compute_metrics(triangle, PartitionAssignment(3, np.array([0, 1, 2]), PartitionMethod.MINCUT))
    json_path, dot_path = tmp_path / "metrics.json", tmp_path / "topology.dot"
    write_metrics_json(metrics, str(json_path))
    write_topology_dot(metrics, str(dot_path))

    document = json.loads(json_path.read_text())
    from_json = {(t["src"], t["dst"]): t["embeddings"] for t in document["traffic"]}
    from_dot = {
        (int(p), int(q)): int(n)
        for p, q, n in re.findall(r"(\d+) -> (\d+) \[weight=(\d+)", dot_path.read_text())
    }
    assert from_json == from_dot
    assert len(from_json) == 6
    assert [p["recv_volume"] for p in document["parts"]] == metrics.recv_volume


def test_assignment_file(tmp_path):
    assignment = PartitionAssignment(4, np.array([3, 0, 1, 2, 2]), PartitionMethod.LOWNN)
    path = str(tmp_path / "assignment.txt")
    write_assignment(assignment, path)
    assert read_assignment(path) == assignment


def test_run_partition_checks_arguments(lattice):
    graph = build_graph(lattice, 1.05)
    with pytest.raises(UsageError):
        run_partition("lownn", lattice, graph, depth=1, n_parts=3)
    with pytest.raises(UsageError):
        run_partition("spectral", lattice, graph)
    assignment, metrics = run_partition("lownn", lattice, graph, depth=1)
    assert assignment.n_parts == 2
    assert sum(metrics.node_counts) == 27
    assert metrics.wall_time >= 0.0
