"""Toy structures and analytic Hamiltonians for training and scaling runs.

On-site blocks are diagonal with one energy per shell. Off-site blocks are set in the coupled
basis: every allowed total degree ``L`` of a shell pair contributes
``c * exp(-d / decay) * Y^L(d_hat)``, so the blocks rotate exactly with the bond.
"""

import logging
import os
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from eqhamnet.core.exceptions import UsageError
from eqhamnet.core.harmonics import cg_transform, spherical_harmonics
from eqhamnet.models.blocks import BasisMode, BlockKey, BlockMatrix, write_blocks
from eqhamnet.models.structure import AtomGraph, AtomicStructure, BasisSpec, symbol_to_z
from eqhamnet.services.structure_service import build_graph, write_extxyz

logger = logging.getLogger(__name__)

DEFAULT_BASIS = {"Hf": "0,1", "O": "0,1"}


@dataclass(frozen=True)
class SyntheticSpec:
    shape: Tuple[int, int, int] = (5, 5, 2)
    spacing: float = 2.2
    jitter: float = 0.1
    species: Tuple[str, str] = ("Hf", "O")
    decay: float = 1.5
    seed: int = 0


def lattice_structure(spec: SyntheticSpec) -> AtomicStructure:
    """Jittered simple cubic lattice; the two species alternate on the checkerboard."""
    nx, ny, nz = spec.shape
    if min(spec.shape) < 1:
        raise UsageError(f"Lattice shape must be positive, got {spec.shape}")
    rng = np.random.default_rng(spec.seed)
    grid = np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"), axis=-1).reshape(-1, 3)
    positions = grid * spec.spacing + rng.uniform(-spec.jitter, spec.jitter, size=grid.shape)
    z_a, z_b = (symbol_to_z(s) for s in spec.species)
    species = np.where(grid.sum(axis=1) % 2 == 0, z_a, z_b)
    cell = np.diag([nx, ny, nz]).astype(np.float64) * spec.spacing
    return AtomicStructure.create(positions, species, cell, (True, True, True))


def _coefficient(seed: int, *key: int) -> float:
    return float(np.random.default_rng([seed, *key]).uniform(-1.0, 1.0))


def _onsite(basis: BasisSpec, z: int, seed: int) -> np.ndarray:
    energies = []
    for shell, (l, _) in enumerate(basis.shell_slices(z)):
        energies.extend([-2.0 + _coefficient(seed, 0, z, shell)] * (2 * l + 1))
    return np.diag(energies)


def _offsite(basis: BasisSpec, z_a: int, z_b: int, vector: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    distance = float(np.linalg.norm(vector))
    radial = np.exp(-distance / spec.decay)
    block = np.zeros((basis.n_orb(z_a), basis.n_orb(z_b)))
    for ia, (la, rows) in enumerate(basis.shell_slices(z_a)):
        for ib, (lb, cols) in enumerate(basis.shell_slices(z_b)):
            t = cg_transform(la, lb)
            coupled = np.zeros(t.size)
            for L in t.degrees:
                c = _coefficient(spec.seed, 1, z_a, z_b, ia, ib, L)
                coupled[t.offsets[L]] = c * radial * spherical_harmonics(L, vector)[0]
            block[rows, cols] = (t.matrix @ coupled).reshape(2 * la + 1, 2 * lb + 1)
    return block


def _is_canonical(src: int, dst: int, image: Tuple[int, int, int]) -> bool:
    return src < dst or (src == dst and image > (0, 0, 0))


def toy_hamiltonian(structure: AtomicStructure, graph: AtomGraph, basis: BasisSpec,
                    spec: SyntheticSpec) -> BlockMatrix:
    """Uncoupled target blocks for every node and edge; ``H(j, i, -n) = H(i, j, n)^T`` exactly."""
    basis.check_species(structure.species)
    blocks: Dict[BlockKey, np.ndarray] = {}
    for g, z in enumerate(structure.species):
        blocks[(g, g, (0, 0, 0))] = _onsite(basis, int(z), spec.seed)
    for k, (src, dst, image) in enumerate(graph.edge_keys()):
        z_src, z_dst = int(graph.species[src]), int(graph.species[dst])
        if _is_canonical(src, dst, image):
            blocks[(src, dst, image)] = _offsite(basis, z_src, z_dst, graph.displacement[k], spec)
        else:
            blocks[(src, dst, image)] = _offsite(basis, z_dst, z_src, -graph.displacement[k], spec).T
    return BlockMatrix(basis, BasisMode.UNCOUPLED, structure.species, blocks)


def write_basis(basis: BasisSpec, path: str):
    with open(path, "w") as handle:
        handle.write("\n".join(basis.to_lines()) + "\n")


def generate(output_dir: str, spec: SyntheticSpec, r_cut: float,
             basis: BasisSpec = None) -> Dict[str, str]:
    """Write ``structure.xyz``, ``basis.env`` and ``targets.txt``; returns their paths."""
    basis = basis or BasisSpec.from_mapping(DEFAULT_BASIS)
    structure = lattice_structure(spec)
    graph = build_graph(structure, r_cut)
    targets = toy_hamiltonian(structure, graph, basis, spec)
    os.makedirs(output_dir, exist_ok=True)
    paths = {
        "structure": os.path.join(output_dir, "structure.xyz"),
        "basis": os.path.join(output_dir, "basis.env"),
        "targets": os.path.join(output_dir, "targets.txt"),
    }
    write_extxyz(structure, paths["structure"])
    write_basis(basis, paths["basis"])
    write_blocks(targets, paths["targets"])
    logger.info(
        f"Generated {structure.n_atoms} atoms, {graph.n_edges} edges and {len(targets)} target blocks "
        f"in {output_dir}"
    )
    return paths
