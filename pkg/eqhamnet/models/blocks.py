import io
import logging
from dataclasses import dataclass, field
from enum import Enum as PyEnum
from functools import lru_cache
from typing import Dict, Iterator, List, Mapping, Sequence, Tuple

import numpy as np

from eqhamnet.core.exceptions import BasisError, ShapeError, TargetError
from eqhamnet.core.harmonics import cg_transform
from eqhamnet.models.structure import BasisSpec

logger = logging.getLogger(__name__)

BlockKey = Tuple[int, int, Tuple[int, int, int]]

ON_SITE_IMAGE = (0, 0, 0)


class BasisMode(PyEnum):
    COUPLED = "coupled"
    UNCOUPLED = "uncoupled"


def is_on_site(key: BlockKey) -> bool:
    return key[0] == key[1] and tuple(key[2]) == ON_SITE_IMAGE


@dataclass
class BlockMatrix:
    """Block-sparse Hamiltonian keyed by ``(i, j, image)``.

    Uncoupled blocks are ``n_orb(Z_i) x n_orb(Z_j)`` arrays; coupled blocks are flat vectors of
    length ``n_orb(Z_i) * n_orb(Z_j)`` ordered by shell pair, then ``L`` ascending, then ``M``.
    Values may be numpy arrays or torch tensors.
    """

    basis: BasisSpec
    mode: BasisMode
    species: np.ndarray
    blocks: Dict[BlockKey, object] = field(default_factory=dict)

    def __post_init__(self):
        self.species = np.asarray(self.species, dtype=np.int64)

    def expected_shape(self, key: BlockKey) -> Tuple[int, ...]:
        i, j, _ = key
        n_i = self.basis.n_orb(int(self.species[i]))
        n_j = self.basis.n_orb(int(self.species[j]))
        if self.mode is BasisMode.COUPLED:
            return (n_i * n_j,)
        return (n_i, n_j)

    def validate(self):
        for key, value in self.blocks.items():
            if tuple(value.shape) != self.expected_shape(key):
                raise ShapeError(
                    f"Block {key} has shape {tuple(value.shape)}, expected {self.expected_shape(key)}"
                )

    def __len__(self) -> int:
        return len(self.blocks)

    def __getitem__(self, key: BlockKey):
        return self.blocks[key]

    def __contains__(self, key) -> bool:
        return key in self.blocks

    def keys(self) -> List[BlockKey]:
        return list(self.blocks)

    def items(self) -> Iterator[Tuple[BlockKey, object]]:
        return iter(self.blocks.items())

    def with_blocks(self, blocks: Dict[BlockKey, object], mode: "BasisMode" = None) -> "BlockMatrix":
        return BlockMatrix(self.basis, mode or self.mode, self.species, blocks)

    def to_numpy(self) -> "BlockMatrix":
        blocks = {}
        for key, value in self.blocks.items():
            if hasattr(value, "detach"):
                value = value.detach().cpu().numpy()
            blocks[key] = np.asarray(value, dtype=np.float64)
        return self.with_blocks(blocks)

    def subset(self, keys: Sequence[BlockKey]) -> "BlockMatrix":
        return self.with_blocks({key: self.blocks[key] for key in keys if key in self.blocks})


@dataclass(frozen=True)
class PairLayout:
    """Coupled layout of one ordered species pair.

    ``transform`` maps a row-major flattened uncoupled block to its coupled vector.
    ``head_index[p]`` is the position of coupled component ``p`` in the padded head output.
    ``degree[p]`` is the total angular momentum ``L`` of component ``p``.
    """

    z_a: int
    z_b: int
    n_a: int
    n_b: int
    transform: np.ndarray
    head_index: np.ndarray
    degree: np.ndarray


class PaddedLayout:
    """Padded shell slots shared by all species and the per-species-pair truncation maps.

    The head output for a node or edge is laid out ``L``-major: for each ``L`` all ``M``
    components, and for each ``M`` every padded slot pair allowed to couple to ``L``.
    """

    def __init__(self, basis: BasisSpec):
        self.basis = basis
        self.slots = basis.padded_shells()
        self.l_max_required = 2 * basis.max_degree
        self.pairs: Dict[int, List[Tuple[int, int]]] = {}
        for L in range(self.l_max_required + 1):
            self.pairs[L] = [
                (a, b)
                for a, la in enumerate(self.slots)
                for b, lb in enumerate(self.slots)
                if abs(la - lb) <= L <= la + lb
            ]
        self.offsets: Dict[int, int] = {}
        offset = 0
        for L in range(self.l_max_required + 1):
            self.offsets[L] = offset
            offset += (2 * L + 1) * len(self.pairs[L])
        self.size = offset
        self._pair_position = {
            L: {pair: index for index, pair in enumerate(pairs)} for L, pairs in self.pairs.items()
        }
        self._layouts: Dict[Tuple[int, int], PairLayout] = {}

    def n_pairs(self, L: int) -> int:
        return len(self.pairs.get(L, []))

    def head_position(self, L: int, M: int, slot_a: int, slot_b: int) -> int:
        """``M`` runs over ``0..2L``."""
        return self.offsets[L] + M * self.n_pairs(L) + self._pair_position[L][(slot_a, slot_b)]

    def pair(self, z_a: int, z_b: int) -> PairLayout:
        key = (int(z_a), int(z_b))
        if key not in self._layouts:
            self._layouts[key] = self._build_pair(*key)
        return self._layouts[key]

    def _build_pair(self, z_a: int, z_b: int) -> PairLayout:
        shells_a, shells_b = self.basis.shell_slices(z_a), self.basis.shell_slices(z_b)
        slots_a, slots_b = self.basis.slot_map(z_a), self.basis.slot_map(z_b)
        n_a, n_b = self.basis.n_orb(z_a), self.basis.n_orb(z_b)
        transform = np.zeros((n_a * n_b, n_a * n_b))
        head_index = np.zeros(n_a * n_b, dtype=np.int64)
        degree = np.zeros(n_a * n_b, dtype=np.int64)
        row = 0
        for (la, sa), slot_a in zip(shells_a, slots_a):
            for (lb, sb), slot_b in zip(shells_b, slots_b):
                t = cg_transform(la, lb)
                rows_a = np.arange(sa.start, sa.stop)
                cols_b = np.arange(sb.start, sb.stop)
                flat = (rows_a[:, None] * n_b + cols_b[None, :]).reshape(-1)
                transform[row:row + t.size, flat] = t.matrix.T
                for L in t.degrees:
                    for M in range(2 * L + 1):
                        p = row + t.offsets[L].start + M
                        head_index[p] = self.head_position(L, M, slot_a, slot_b)
                        degree[p] = L
                row += t.size
        return PairLayout(z_a, z_b, n_a, n_b, transform, head_index, degree)


@lru_cache(maxsize=32)
def padded_layout(basis: BasisSpec) -> PaddedLayout:
    return PaddedLayout(basis)


def coupled_to_uncoupled_array(vector: np.ndarray, layout: PairLayout) -> np.ndarray:
    return (layout.transform.T @ vector).reshape(layout.n_a, layout.n_b)


def uncoupled_to_coupled_array(block: np.ndarray, layout: PairLayout) -> np.ndarray:
    if block.shape != (layout.n_a, layout.n_b):
        raise ShapeError(f"Block shape {block.shape} does not match ({layout.n_a}, {layout.n_b})")
    return layout.transform @ block.reshape(-1)


# ---------------------------------------------------------------------------
# Block-sparse files
# ---------------------------------------------------------------------------

def write_blocks(matrix: BlockMatrix, path: str):
    """Text lines ``i j ix iy iz rows cols v...`` (row-major), or ``.npz`` when the path says so."""
    matrix = matrix.to_numpy()
    if path.endswith(".npz"):
        keys = np.array([[i, j, *image] for i, j, image in matrix.keys()], dtype=np.int64).reshape(-1, 5)
        values = [np.asarray(v).reshape(-1) for _, v in matrix.items()]
        shapes = np.array([list(np.atleast_2d(v).shape) if v.ndim == 2 else [v.shape[0], 1]
                           for _, v in matrix.items()], dtype=np.int64).reshape(-1, 2)
        np.savez(
            path,
            keys=keys,
            shapes=shapes,
            values=np.concatenate(values) if values else np.zeros(0),
            mode=np.array(matrix.mode.value),
        )
        return
    with open(path, "w") as handle:
        for (i, j, image), value in matrix.items():
            value = np.asarray(value)
            rows, cols = (value.shape if value.ndim == 2 else (value.shape[0], 1))
            numbers = " ".join(f"{v:.12e}" for v in value.reshape(-1))
            handle.write(f"{i} {j} {image[0]} {image[1]} {image[2]} {rows} {cols} {numbers}\n")


def read_blocks(path: str, basis: BasisSpec, species: Sequence[int],
                mode: BasisMode = BasisMode.UNCOUPLED) -> BlockMatrix:
    blocks: Dict[BlockKey, np.ndarray] = {}
    if path.endswith(".npz"):
        with np.load(path) as data:
            keys, shapes, values = data["keys"], data["shapes"], data["values"]
            mode = BasisMode(str(data["mode"]))
        offset = 0
        for key, (rows, cols) in zip(keys, shapes):
            count = int(rows * cols)
            value = values[offset:offset + count]
            offset += count
            i, j, ix, iy, iz = (int(v) for v in key)
            blocks[(i, j, (ix, iy, iz))] = (
                value.reshape(rows, cols) if mode is BasisMode.UNCOUPLED else value.copy()
            )
    else:
        with open(path) as handle:
            for line_no, line in enumerate(handle, start=1):
                parts = line.split()
                if not parts:
                    continue
                try:
                    i, j, ix, iy, iz, rows, cols = (int(v) for v in parts[:7])
                    values = np.array([float(v) for v in parts[7:]])
                except ValueError:
                    raise TargetError(f"Malformed block line: {line.strip()[:60]}", line=line_no) from None
                if len(values) != rows * cols:
                    raise TargetError(
                        f"Block declares {rows}x{cols} but holds {len(values)} values", line=line_no
                    )
                blocks[(i, j, (ix, iy, iz))] = (
                    values.reshape(rows, cols) if mode is BasisMode.UNCOUPLED else values
                )
    matrix = BlockMatrix(basis, mode, species, blocks)
    try:
        matrix.validate()
    except ShapeError as e:
        raise BasisError(f"Blocks in {path} do not match the basis: {e}") from e
    logger.info(f"Read {len(blocks)} {mode.value} blocks from {path}")
    return matrix


def blocks_to_bytes(matrix: BlockMatrix) -> bytes:
    buffer = io.BytesIO()
    matrix = matrix.to_numpy()
    keys = np.array([[i, j, *image] for i, j, image in matrix.keys()], dtype=np.int64).reshape(-1, 5)
    sizes = np.array([np.asarray(v).size for _, v in matrix.items()], dtype=np.int64)
    values = np.concatenate([np.asarray(v).reshape(-1) for _, v in matrix.items()]) if len(matrix) else np.zeros(0)
    np.savez(buffer, keys=keys, sizes=sizes, values=values)
    return buffer.getvalue()


def blocks_from_bytes(payload: bytes, template: BlockMatrix) -> Dict[BlockKey, np.ndarray]:
    with np.load(io.BytesIO(payload)) as data:
        keys, sizes, values = data["keys"], data["sizes"], data["values"]
    out, offset = {}, 0
    for key, size in zip(keys, sizes):
        i, j, ix, iy, iz = (int(v) for v in key)
        k = (i, j, (ix, iy, iz))
        out[k] = values[offset:offset + size].reshape(template.expected_shape(k))
        offset += int(size)
    return out
