from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from ase.data import atomic_numbers, chemical_symbols
from dotenv import dotenv_values

from eqhamnet.core.exceptions import BasisError, GraphError, StructureError

MAX_ATOMIC_NUMBER = 103

SYMBOL_TO_Z: Dict[str, int] = {
    symbol: number for symbol, number in atomic_numbers.items()
    if 1 <= number <= MAX_ATOMIC_NUMBER and symbol == chemical_symbols[number]
}


def symbol_to_z(symbol: str) -> int:
    try:
        return SYMBOL_TO_Z[symbol]
    except KeyError:
        raise StructureError(f"Unknown element symbol: {symbol!r}") from None


def z_to_symbol(z: int) -> str:
    if not 1 <= z <= MAX_ATOMIC_NUMBER:
        raise StructureError(f"Atomic number out of range: {z}")
    return chemical_symbols[z]


@dataclass(frozen=True, eq=False)
class AtomicStructure:
    """Positions (Å), atomic numbers, lattice vectors as cell rows and periodic flags."""

    positions: np.ndarray
    species: np.ndarray
    cell: np.ndarray
    pbc: np.ndarray

    def __post_init__(self):
        positions = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        species = np.array(self.species, dtype=np.int64).reshape(-1)
        cell = np.array(self.cell, dtype=np.float64).reshape(3, 3)
        pbc = np.array(self.pbc, dtype=bool).reshape(3)
        if len(positions) == 0 or len(positions) != len(species):
            raise StructureError(
                f"Structure needs at least one atom and one species per position "
                f"({len(positions)} positions, {len(species)} species)"
            )
        if np.any(species < 1) or np.any(species > MAX_ATOMIC_NUMBER):
            raise StructureError("Atomic numbers must lie in 1..103")
        if pbc.any() and abs(np.linalg.det(cell)) <= 1e-10:
            raise StructureError("Cell is singular but periodic boundary conditions are set")
        for name, value in (("positions", positions), ("species", species), ("cell", cell), ("pbc", pbc)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def create(cls, positions, species, cell=None, pbc=(False, False, False)) -> "AtomicStructure":
        """Build a canonically wrapped structure."""
        cell = np.zeros((3, 3)) if cell is None else cell
        return cls(positions, species, cell, pbc).wrapped()

    @property
    def n_atoms(self) -> int:
        return len(self.species)

    def fractional(self) -> np.ndarray:
        return np.linalg.solve(self.cell.T, self.positions.T).T

    def wrapped(self) -> "AtomicStructure":
        """Map fractional coordinates of periodic dimensions into [0, 1)."""
        if not self.pbc.any():
            return self
        frac = self.fractional()
        for d in np.nonzero(self.pbc)[0]:
            col = frac[:, d] - np.floor(frac[:, d])
            col[col >= 1.0] = 0.0
            frac[:, d] = col
        return AtomicStructure(frac @ self.cell, self.species, self.cell, self.pbc)

    def translated(self, shift: Sequence[float]) -> "AtomicStructure":
        return AtomicStructure.create(self.positions + np.asarray(shift), self.species, self.cell, self.pbc)

    def rotated(self, R: np.ndarray) -> "AtomicStructure":
        """Rotate positions and lattice vectors together (cell rows are vectors)."""
        R = np.asarray(R, dtype=np.float64)
        return AtomicStructure(self.positions @ R.T, self.species, self.cell @ R.T, self.pbc)

    def permuted(self, order: Sequence[int]) -> "AtomicStructure":
        order = np.asarray(order)
        return AtomicStructure(self.positions[order], self.species[order], self.cell, self.pbc)

    def __eq__(self, other) -> bool:
        if not isinstance(other, AtomicStructure):
            return NotImplemented
        return (
            np.array_equal(self.positions, other.positions)
            and np.array_equal(self.species, other.species)
            and np.array_equal(self.cell, other.cell)
            and np.array_equal(self.pbc, other.pbc)
        )


class Edge(NamedTuple):
    src: int
    dst: int
    displacement: np.ndarray
    distance: float
    image: Tuple[int, int, int]


@dataclass(frozen=True, eq=False)
class AtomGraph:
    """Directed radius graph in canonical order (dst, src, displacement).

    ``displacement[k] = r[dst] + image[k] @ cell - r[src]``: ``image`` is the lattice shift of
    the destination atom relative to the source atom.
    """

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    displacement: np.ndarray
    distance: np.ndarray
    image: np.ndarray
    r_cut: float
    species: np.ndarray

    def __post_init__(self):
        src = np.asarray(self.src, dtype=np.int64).reshape(-1)
        dst = np.asarray(self.dst, dtype=np.int64).reshape(-1)
        displacement = np.asarray(self.displacement, dtype=np.float64).reshape(-1, 3)
        distance = np.asarray(self.distance, dtype=np.float64).reshape(-1)
        image = np.asarray(self.image, dtype=np.int64).reshape(-1, 3)
        species = np.asarray(self.species, dtype=np.int64).reshape(-1)
        k = len(src)
        if not (len(dst) == len(displacement) == len(distance) == len(image) == k):
            raise GraphError("Edge arrays must have equal length")
        if len(species) != self.n_nodes:
            raise GraphError("One species entry per node is required")
        if k and (src.min() < 0 or dst.min() < 0 or max(src.max(), dst.max()) >= self.n_nodes):
            raise GraphError("Edge endpoint out of range")
        for name, value in (("src", src), ("dst", dst), ("displacement", displacement),
                            ("distance", distance), ("image", image), ("species", species)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def canonical(cls, n_nodes, src, dst, displacement, image, r_cut, species) -> "AtomGraph":
        """Sort edges into canonical order and derive distances."""
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        displacement = np.asarray(displacement, dtype=np.float64).reshape(-1, 3)
        image = np.asarray(image, dtype=np.int64).reshape(-1, 3)
        order = np.lexsort((displacement[:, 2], displacement[:, 1], displacement[:, 0], src, dst))
        displacement = displacement[order]
        return cls(
            n_nodes=n_nodes,
            src=src[order],
            dst=dst[order],
            displacement=displacement,
            distance=np.linalg.norm(displacement, axis=1),
            image=image[order],
            r_cut=float(r_cut),
            species=species,
        )

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def edge(self, k: int) -> Edge:
        return Edge(int(self.src[k]), int(self.dst[k]), self.displacement[k],
                    float(self.distance[k]), tuple(int(v) for v in self.image[k]))

    def edges(self) -> Iterator[Edge]:
        for k in range(self.n_edges):
            yield self.edge(k)

    def edge_keys(self) -> List[Tuple[int, int, Tuple[int, int, int]]]:
        return [(int(i), int(j), tuple(int(v) for v in n))
                for i, j, n in zip(self.src, self.dst, self.image)]

    def reverse_index(self) -> np.ndarray:
        """Index of the reversed edge (j, i, -d) for every edge."""
        lookup = {key: k for k, key in enumerate(self.edge_keys())}
        try:
            return np.array([lookup[(j, i, (-n[0], -n[1], -n[2]))] for i, j, n in lookup], dtype=np.int64)
        except KeyError as e:
            raise GraphError(f"Graph is not closed under edge reversal: {e}") from None


@dataclass(frozen=True)
class BasisSpec:
    """Ordered shell degrees per atomic number."""

    shells: Mapping[int, Tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        normalized = {}
        for z, degrees in self.shells.items():
            degrees = tuple(int(l) for l in degrees)
            if not degrees:
                raise BasisError(f"Species Z={z} has no shells")
            if any(l < 0 for l in degrees):
                raise BasisError(f"Negative shell degree for Z={z}")
            normalized[int(z)] = degrees
        object.__setattr__(self, "shells", dict(sorted(normalized.items())))

    def __hash__(self) -> int:
        return hash(tuple(self.shells.items()))

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, str]) -> "BasisSpec":
        shells = {}
        for symbol, value in mapping.items():
            if value is None or not value.strip():
                raise BasisError(f"Empty shell list for {symbol}")
            try:
                shells[symbol_to_z(symbol.strip())] = tuple(int(v) for v in value.split(","))
            except (ValueError, StructureError) as e:
                raise BasisError(f"Bad basis entry {symbol}={value}: {e}") from e
        return cls(shells)

    @classmethod
    def from_file(cls, path: str) -> "BasisSpec":
        """Read ``Symbol=l1,l2,...`` lines."""
        return cls.from_mapping(dotenv_values(path))

    def to_lines(self) -> List[str]:
        return [f"{z_to_symbol(z)}={','.join(str(l) for l in degrees)}" for z, degrees in self.shells.items()]

    @property
    def species(self) -> List[int]:
        return list(self.shells)

    @property
    def max_degree(self) -> int:
        return max((max(d) for d in self.shells.values()), default=0)

    def shells_of(self, z: int) -> Tuple[int, ...]:
        try:
            return self.shells[int(z)]
        except KeyError:
            raise BasisError(f"No basis defined for Z={z}") from None

    def n_orb(self, z: int) -> int:
        return sum(2 * l + 1 for l in self.shells_of(z))

    def n_orb_total(self, species: Sequence[int]) -> int:
        z, counts = np.unique(np.asarray(species), return_counts=True)
        return int(sum(self.n_orb(int(a)) * int(c) for a, c in zip(z, counts)))

    def shell_slices(self, z: int) -> List[Tuple[int, slice]]:
        out, offset = [], 0
        for l in self.shells_of(z):
            out.append((l, slice(offset, offset + 2 * l + 1)))
            offset += 2 * l + 1
        return out

    def check_species(self, species: Sequence[int]):
        missing = sorted(set(int(z) for z in species) - set(self.shells))
        if missing:
            raise BasisError(f"No basis defined for species {missing}")

    def padded_shells(self) -> List[int]:
        """Global slot list: for each degree, the maximum multiplicity over species."""
        slots = []
        for l in range(self.max_degree + 1):
            count = max(d.count(l) for d in self.shells.values())
            slots.extend([l] * count)
        return slots

    def slot_map(self, z: int) -> List[int]:
        """Padded slot index of every shell of species ``z``."""
        slots = self.padded_shells()
        first = {}
        for index, l in enumerate(slots):
            first.setdefault(l, index)
        seen: Dict[int, int] = {}
        out = []
        for l in self.shells_of(z):
            out.append(first[l] + seen.get(l, 0))
            seen[l] = seen.get(l, 0) + 1
        return out
