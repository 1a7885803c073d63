import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from eqhamnet.core.exceptions import BasisError, StructureError
from eqhamnet.models.structure import AtomicStructure, BasisSpec, symbol_to_z
from eqhamnet.services.structure_service import (
    brute_force_edges,
    build_graph,
    graph_summary,
    load_structure,
    node_degrees,
    tile,
    write_extxyz,
)
from tests.conftest import cubic_lattice, random_structure, triangle_structure


def _write(tmp_path, text, name="s.xyz"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


# Loading

def test_load_single_atom(tmp_path):
    path = _write(tmp_path, '1\nLattice="10 0 0 0 10 0 0 0 10" pbc="T T T"\nH 0 0 0\n')
    structure = load_structure(path)
    assert structure.n_atoms == 1
    assert structure.species.tolist() == [1]
    assert structure.pbc.all()
    np.testing.assert_allclose(structure.cell, np.eye(3) * 10)


def test_load_count_mismatch_reports_line(tmp_path):
    path = _write(tmp_path, '3\nLattice="5 0 0 0 5 0 0 0 5"\nH 0 0 0\nO 1 0 0\n')
    with pytest.raises(StructureError) as excinfo:
        load_structure(path)
    assert excinfo.value.line == 5
    assert "line 5" in excinfo.value.message


def test_load_extra_atom_lines(tmp_path):
    path = _write(tmp_path, '1\nLattice="5 0 0 0 5 0 0 0 5"\nH 0 0 0\nO 1 0 0\n')
    with pytest.raises(StructureError) as excinfo:
        load_structure(path)
    assert excinfo.value.line == 4


def test_load_unknown_symbol(tmp_path):
    path = _write(tmp_path, '2\nLattice="5 0 0 0 5 0 0 0 5"\nH 0 0 0\nXx 1 0 0\n')
    with pytest.raises(StructureError) as excinfo:
        load_structure(path)
    assert excinfo.value.line == 4


def test_singular_periodic_cell_rejected():
    with pytest.raises(StructureError):
        AtomicStructure.create([[0, 0, 0]], [1], np.zeros((3, 3)), (True, False, False))


def test_positions_are_wrapped():
    structure = AtomicStructure.create([[11.0, -1.0, 5.0]], [1], np.eye(3) * 10, (True, True, True))
    frac = structure.fractional()
    assert np.all(frac >= 0.0) and np.all(frac < 1.0)
    np.testing.assert_allclose(structure.positions, [[1.0, 9.0, 5.0]], atol=1e-12)


def test_write_then_load_preserves_structure(tmp_path):
    structure = random_structure(7, seed=3)
    path = str(tmp_path / "out.xyz")
    write_extxyz(structure, path)
    loaded = load_structure(path)
    assert loaded.species.tolist() == structure.species.tolist()
    np.testing.assert_allclose(loaded.positions, structure.positions, atol=1e-9)


# Graph

def test_single_atom_large_cell_has_no_edges():
    structure = AtomicStructure.create([[0, 0, 0]], [1], np.eye(3) * 20, (True, True, True))
    graph = build_graph(structure, 5.0)
    assert graph.n_edges == 0
    assert node_degrees(graph).tolist() == [0]


def test_two_atoms_non_periodic():
    structure = AtomicStructure.create([[0, 0, 0], [1.0, 0, 0]], [1, 1])
    graph = build_graph(structure, 1.5)
    assert graph.n_edges == 2
    assert sorted(graph.edge_keys()) == [(0, 1, (0, 0, 0)), (1, 0, (0, 0, 0))]


def test_cubic_lattice_in_degree_six():
    graph = build_graph(cubic_lattice(3, 1.0), 1.05)
    assert node_degrees(graph).tolist() == [6] * 27


def test_graph_matches_brute_force():
    structure = random_structure(12, seed=5, box=4.0)
    graph = build_graph(structure, 2.5)
    assert sorted(graph.edge_keys()) == brute_force_edges(structure, 2.5)


def test_graph_invariants():
    structure = random_structure(15, seed=2, box=5.0)
    graph = build_graph(structure, 3.0)
    assert np.all(graph.distance > 0) and np.all(graph.distance <= 3.0)
    np.testing.assert_allclose(np.linalg.norm(graph.displacement, axis=1), graph.distance, rtol=1e-9)
    expected = structure.positions[graph.dst] + graph.image @ structure.cell - structure.positions[graph.src]
    np.testing.assert_allclose(graph.displacement, expected, atol=1e-9)
    # closed under reversal and canonically sorted by destination
    reverse = graph.reverse_index()
    np.testing.assert_allclose(graph.displacement[reverse], -graph.displacement, atol=1e-9)
    assert np.all(np.diff(graph.dst) >= 0)


def test_rotation_keeps_edges_and_distances():
    structure = random_structure(15, seed=2, box=5.0)
    R = Rotation.random(random_state=3).as_matrix()
    graph, rotated = build_graph(structure, 3.0), build_graph(structure.rotated(R), 3.0)
    assert sorted(rotated.edge_keys()) == sorted(graph.edge_keys())
    original = {key: k for k, key in enumerate(graph.edge_keys())}
    for k, key in enumerate(rotated.edge_keys()):
        assert rotated.distance[k] == pytest.approx(graph.distance[original[key]], abs=1e-12)
        np.testing.assert_allclose(rotated.displacement[k], graph.displacement[original[key]] @ R.T, atol=1e-12)


def test_small_cell_has_periodic_self_images():
    structure = AtomicStructure.create([[0, 0, 0]], [1], np.eye(3) * 2.0, (True, True, True))
    graph = build_graph(structure, 2.5)
    assert graph.n_edges == 6
    assert all(src == dst for src, dst, _ in graph.edge_keys())


def test_triangle_degrees(triangle):
    assert triangle.n_edges == 6
    assert node_degrees(triangle).tolist() == [2, 2, 2]


def test_graph_summary_counts(triangle):
    summary = graph_summary(triangle)
    assert summary["n_edges"] == 6
    assert summary["max_degree"] == 2
    assert sum(summary["distance_histogram"]["counts"]) == 6


# Tiling

def test_tile_identity_returns_same_structure(lattice):
    assert tile(lattice, 1, 1, 1) == lattice


def test_tile_counts_and_cell():
    structure = cubic_lattice(3, 1.0)
    tiled = tile(structure, 2, 2, 2)
    assert tiled.n_atoms == 27 * 8
    np.testing.assert_allclose(tiled.cell, np.eye(3) * 6.0)


def test_one_dimensional_tiling_keeps_other_rows():
    structure = random_structure(5, seed=1)
    tiled = tile(structure, 3, 1, 1)
    assert tiled.n_atoms == 15
    np.testing.assert_allclose(tiled.cell[0], structure.cell[0] * 3)
    np.testing.assert_allclose(tiled.cell[1:], structure.cell[1:])


def test_tiling_non_periodic_dimension_rejected():
    with pytest.raises(StructureError):
        tile(triangle_structure(), 2, 1, 1)


def test_tiled_lattice_keeps_uniform_degree():
    graph = build_graph(tile(cubic_lattice(3, 1.0), 2, 1, 1), 1.05)
    assert set(node_degrees(graph).tolist()) == {6}


def test_tiling_multiplies_edges_and_degrees():
    structure = random_structure(15, seed=2, box=5.0)
    graph = build_graph(structure, 3.0)
    tiled = build_graph(tile(structure, 2, 2, 2), 3.0)
    assert tiled.n_edges == 8 * graph.n_edges
    # replicas are ordered image-major, so the degree sequence repeats
    assert np.array_equal(node_degrees(tiled), np.tile(node_degrees(graph), 8))
    np.testing.assert_allclose(np.sort(tiled.distance), np.sort(np.repeat(graph.distance, 8)), atol=1e-9)


@pytest.mark.slow
def test_tiling_three_thousand_atoms():
    rng = np.random.default_rng(0)
    species = np.array([72] * 1000 + [8] * 2000)
    structure = AtomicStructure.create(rng.uniform(0, 30.0, size=(3000, 3)), species,
                                       np.eye(3) * 30.0, (True, True, True))
    assert tile(structure, 2, 2, 2).n_atoms == 24000


# Basis

def test_orbital_count_hafnia():
    # Hf: s, s, p, d = 10 orbitals; O: s, p = 4 orbitals
    basis = BasisSpec.from_mapping({"Hf": "0,0,1,2", "O": "0,1"})
    assert basis.n_orb(72) == 10 and basis.n_orb(8) == 4
    species = [symbol_to_z("Hf")] * 1000 + [symbol_to_z("O")] * 2000
    assert basis.n_orb_total(species) == 18000


def test_orbital_count_tiled_gst():
    # s, s, p, p, d = 13 orbitals per atom
    basis = BasisSpec.from_mapping({"Ge": "0,0,1,1,2", "Sb": "0,0,1,1,2", "Te": "0,0,1,1,2"})
    species = [symbol_to_z("Ge"), symbol_to_z("Sb"), symbol_to_z("Te")] * 2688
    assert basis.n_orb(32) == 13
    assert basis.n_orb_total(species) == 8064 * 13


def test_shell_slices_and_padding():
    basis = BasisSpec.from_mapping({"H": "0", "O": "0,1,1"})
    assert basis.shell_slices(8) == [(0, slice(0, 1)), (1, slice(1, 4)), (1, slice(4, 7))]
    assert basis.padded_shells() == [0, 1, 1]
    assert basis.slot_map(1) == [0]
    assert basis.slot_map(8) == [0, 1, 2]


def test_basis_file_and_missing_species(tmp_path):
    path = tmp_path / "basis.env"
    path.write_text("H=0\nO=0,1\n")
    basis = BasisSpec.from_file(str(path))
    assert basis.species == [1, 8]
    with pytest.raises(BasisError):
        basis.check_species([1, 6])
