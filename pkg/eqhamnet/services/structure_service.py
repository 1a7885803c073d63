import itertools
import logging
import shlex
from typing import Dict, List, Optional, Tuple

import numpy as np

from eqhamnet.core.exceptions import GraphError, StructureError
from eqhamnet.models.structure import AtomGraph, AtomicStructure, symbol_to_z, z_to_symbol

logger = logging.getLogger(__name__)

SUPPORTED_FORMATS = ("extxyz",)


def _parse_header(line: str) -> Dict[str, str]:
    try:
        tokens = shlex.split(line)
    except ValueError as e:
        raise StructureError(f"Unreadable header: {e}", line=2) from e
    header = {}
    for token in tokens:
        if "=" in token:
            key, value = token.split("=", 1)
            header[key.lower()] = value
    return header


def _parse_pbc(value: str) -> Tuple[bool, bool, bool]:
    flags = value.split()
    if len(flags) != 3:
        raise StructureError(f"pbc must hold three flags, got {value!r}", line=2)
    parsed = []
    for flag in flags:
        if flag.upper() in ("T", "TRUE", "1"):
            parsed.append(True)
        elif flag.upper() in ("F", "FALSE", "0"):
            parsed.append(False)
        else:
            raise StructureError(f"Bad pbc flag {flag!r}", line=2)
    return tuple(parsed)


def load_structure(path: str, fmt: str = "extxyz") -> AtomicStructure:
    """Read an extended-XYZ file into a canonically wrapped structure."""
    if fmt not in SUPPORTED_FORMATS:
        raise StructureError(f"Unsupported format: {fmt}")
    try:
        with open(path) as handle:
            lines = handle.read().splitlines()
    except OSError as e:
        raise StructureError(f"Cannot read {path}: {e}") from e

    if not lines:
        raise StructureError("Empty file", line=1)
    try:
        count = int(lines[0].split()[0])
    except (ValueError, IndexError):
        raise StructureError(f"Expected an atom count, got {lines[0]!r}", line=1) from None
    if count < 1:
        raise StructureError("Atom count must be positive", line=1)

    header = _parse_header(lines[1] if len(lines) > 1 else "")
    cell = np.zeros((3, 3))
    pbc = (False, False, False)
    if "lattice" in header:
        try:
            values = [float(v) for v in header["lattice"].split()]
        except ValueError:
            raise StructureError("Lattice must hold 9 numbers", line=2) from None
        if len(values) != 9:
            raise StructureError(f"Lattice must hold 9 numbers, got {len(values)}", line=2)
        cell = np.array(values).reshape(3, 3)
        pbc = (True, True, True)
    if "pbc" in header:
        pbc = _parse_pbc(header["pbc"])

    body = lines[2:]
    while body and not body[-1].strip():
        body.pop()
    if len(body) > count:
        raise StructureError(f"Found more atom lines than the declared count {count}", line=count + 3)
    if len(body) < count:
        raise StructureError(
            f"Declared {count} atoms but the file ends after {len(body)}", line=len(body) + 3
        )

    species, positions = [], []
    for offset, raw in enumerate(body):
        line_no = offset + 3
        parts = raw.split()
        if len(parts) < 4:
            raise StructureError(f"Expected 'Symbol x y z', got {raw!r}", line=line_no)
        try:
            z = symbol_to_z(parts[0])
        except StructureError as e:
            raise StructureError(e.message, line=line_no) from None
        try:
            positions.append([float(v) for v in parts[1:4]])
        except ValueError:
            raise StructureError(f"Bad coordinates in {raw!r}", line=line_no) from None
        species.append(z)

    structure = AtomicStructure.create(positions, species, cell, pbc)
    logger.info(f"Loaded {structure.n_atoms} atoms from {path} (pbc={list(map(bool, pbc))})")
    return structure


def write_extxyz(structure: AtomicStructure, path: str):
    lattice = " ".join(f"{v:.10f}" for v in structure.cell.reshape(-1))
    pbc = " ".join("T" if p else "F" for p in structure.pbc)
    with open(path, "w") as handle:
        handle.write(f"{structure.n_atoms}\n")
        handle.write(f'Lattice="{lattice}" Properties=species:S:1:pos:R:3 pbc="{pbc}"\n')
        for z, (x, y, zc) in zip(structure.species, structure.positions):
            handle.write(f"{z_to_symbol(int(z)):<2} {x:16.10f} {y:16.10f} {zc:16.10f}\n")


def _image_ranges(structure: AtomicStructure, r_cut: float) -> List[range]:
    ranges = []
    if structure.pbc.any():
        inverse = np.linalg.inv(structure.cell)
    for d in range(3):
        if not structure.pbc[d]:
            ranges.append(range(0, 1))
            continue
        # perpendicular height of the cell along d is 1 / |column d of inv(cell)|
        height = 1.0 / np.linalg.norm(inverse[:, d])
        n = int(np.ceil(r_cut / height)) + 1
        ranges.append(range(-n, n + 1))
    return ranges


def build_graph(structure: AtomicStructure, r_cut: float) -> AtomGraph:
    """All directed pairs (including periodic images) with 0 < distance <= r_cut.

    Cell-list search: source image points are binned on a grid of spacing ``r_cut`` and each
    destination atom scans its 27 neighboring bins.
    """
    if r_cut <= 0:
        raise GraphError(f"r_cut must be positive, got {r_cut}")
    pos = structure.positions
    n = structure.n_atoms

    shifts = np.array(list(itertools.product(*_image_ranges(structure, r_cut))), dtype=np.int64)
    offsets = shifts.astype(np.float64) @ structure.cell
    lo, hi = pos.min(axis=0) - r_cut, pos.max(axis=0) + r_cut

    # image point p = pos[atom] + offsets[shift]; it sits at -shift relative to the destination
    points = (pos[None, :, :] + offsets[:, None, :]).reshape(-1, 3)
    atom_of = np.tile(np.arange(n), len(shifts))
    shift_of = np.repeat(np.arange(len(shifts)), n)
    keep = np.all((points >= lo) & (points <= hi), axis=1)
    points, atom_of, shift_of = points[keep], atom_of[keep], shift_of[keep]

    bins = np.floor((points - lo) / r_cut).astype(np.int64)
    dims = bins.max(axis=0) + 1
    keys = (bins[:, 0] * dims[1] + bins[:, 1]) * dims[2] + bins[:, 2]
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]

    home_bins = np.floor((pos - lo) / r_cut).astype(np.int64)
    dst_parts, cand_parts = [], []
    for delta in itertools.product((-1, 0, 1), repeat=3):
        q = home_bins + np.asarray(delta)
        valid = np.all((q >= 0) & (q < dims), axis=1)
        if not valid.any():
            continue
        q_keys = (q[valid, 0] * dims[1] + q[valid, 1]) * dims[2] + q[valid, 2]
        start = np.searchsorted(sorted_keys, q_keys, side="left")
        stop = np.searchsorted(sorted_keys, q_keys, side="right")
        counts = stop - start
        total = int(counts.sum())
        if total == 0:
            continue
        dst_parts.append(np.repeat(np.nonzero(valid)[0], counts))
        first = np.repeat(start, counts)
        within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        cand_parts.append(order[first + within])

    if dst_parts:
        dst = np.concatenate(dst_parts)
        cand = np.concatenate(cand_parts)
    else:
        dst = cand = np.zeros(0, dtype=np.int64)

    displacement = pos[dst] - points[cand]
    distance = np.linalg.norm(displacement, axis=1)
    mask = (distance > 0.0) & (distance <= r_cut)
    dst, cand, displacement = dst[mask], cand[mask], displacement[mask]

    graph = AtomGraph.canonical(
        n_nodes=n,
        src=atom_of[cand],
        dst=dst,
        displacement=displacement,
        image=-shifts[shift_of[cand]],
        r_cut=r_cut,
        species=structure.species,
    )
    logger.info(f"Built radius graph: {graph.n_nodes} nodes, {graph.n_edges} edges, r_cut={r_cut}")
    return graph


def brute_force_edges(structure: AtomicStructure, r_cut: float) -> List[Tuple[int, int, Tuple[int, int, int]]]:
    """Reference neighbor search over every image pair; slow, used for cross-checks."""
    edges = []
    for shift in itertools.product(*_image_ranges(structure, r_cut)):
        offset = np.asarray(shift, dtype=np.float64) @ structure.cell
        for i in range(structure.n_atoms):
            for j in range(structure.n_atoms):
                d = structure.positions[j] + offset - structure.positions[i]
                dist = float(np.linalg.norm(d))
                if 0.0 < dist <= r_cut:
                    edges.append((i, j, tuple(int(s) for s in shift)))
    return sorted(edges)


def tile(structure: AtomicStructure, nx: int, ny: int, nz: int) -> AtomicStructure:
    """Replicate along the lattice vectors; replicas are ordered (ix, iy, iz, original index)."""
    reps = (nx, ny, nz)
    if any(r < 1 for r in reps):
        raise StructureError(f"Tiling counts must be >= 1, got {reps}")
    for d, r in enumerate(reps):
        if r > 1 and not structure.pbc[d]:
            raise StructureError(f"Cannot tile non-periodic dimension {d}")
    if reps == (1, 1, 1):
        return structure

    shifts = np.array(list(itertools.product(range(nx), range(ny), range(nz))), dtype=np.float64)
    positions = (structure.positions[None, :, :] + (shifts @ structure.cell)[:, None, :]).reshape(-1, 3)
    species = np.tile(structure.species, len(shifts))
    cell = structure.cell * np.asarray(reps, dtype=np.float64)[:, None]
    tiled = AtomicStructure.create(positions, species, cell, structure.pbc)
    logger.info(f"Tiled {structure.n_atoms} atoms {nx}x{ny}x{nz} -> {tiled.n_atoms} atoms")
    return tiled


def node_degrees(graph: AtomGraph) -> np.ndarray:
    """In-degree of every node."""
    return np.bincount(graph.dst, minlength=graph.n_nodes).astype(np.int64)


def graph_summary(graph: AtomGraph, n_bins: int = 20) -> Dict[str, object]:
    degrees = node_degrees(graph)
    hist, edges = np.histogram(graph.distance, bins=n_bins, range=(0.0, graph.r_cut))
    isolated = int((degrees == 0).sum())
    if isolated:
        logger.warning(f"{isolated} nodes have no incoming edges")
    return {
        "n_nodes": int(graph.n_nodes),
        "n_edges": int(graph.n_edges),
        "r_cut": float(graph.r_cut),
        "mean_degree": float(degrees.mean()) if graph.n_nodes else 0.0,
        "max_degree": int(degrees.max(initial=0)),
        "isolated_nodes": isolated,
        "distance_histogram": {
            "bin_edges": [float(e) for e in edges],
            "counts": [int(c) for c in hist],
        },
    }
