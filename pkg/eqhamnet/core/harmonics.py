"""Real spherical harmonics, Wigner-D matrices, edge alignment and Clebsch-Gordan transforms.

Conventions
-----------
* Real spherical harmonics with ``+y`` as the polar axis. Degree-1 harmonics are ordered
  ``(x, y, z)`` so that ``D^1(R) = R`` for every proper rotation ``R`` (active rotations,
  ``Y^l(R r) = D^l(R) Y^l(r)``).
* Degree-2 harmonics are ordered ``(xz, xy, 3y^2 - 1, yz, z^2 - x^2)`` up to normalization.
* Within a degree the index ``m = -l..l`` is stored at ``l + m``; flattened tensors use
  ``h = l^2 + l + m``.

Everything here is computed in double precision; results are read-only and cached.
"""

import logging
import threading
from dataclasses import dataclass
from fractions import Fraction
from math import factorial
from typing import Dict, List, Sequence, Tuple

import numpy as np

from eqhamnet.core.exceptions import HarmonicsError, ShapeError

logger = logging.getLogger(__name__)

L_MAX_SUPPORTED = 6
ROTATION_TOL = 1e-8

_cache_lock = threading.RLock()
_real_cg_tables: Dict[Tuple[int, int, int], np.ndarray] = {}
_cg_transforms: Dict[Tuple[int, int], "CGTransform"] = {}


def n_harmonics(l_max: int) -> int:
    return (l_max + 1) ** 2


def degree_slice(l: int) -> slice:
    return slice(l * l, (l + 1) * (l + 1))


def degree_index(l_max: int) -> np.ndarray:
    """Degree ``l`` of every flattened index ``h``."""
    return np.concatenate([np.full(2 * l + 1, l) for l in range(l_max + 1)])


def _check_degree(l: int):
    if not 0 <= l <= 2 * L_MAX_SUPPORTED:
        raise HarmonicsError(f"Degree out of range: {l}")


# ---------------------------------------------------------------------------
# Clebsch-Gordan coefficients
# ---------------------------------------------------------------------------

def _su2_cg(j1: int, m1: int, j2: int, m2: int, j3: int, m3: int) -> float:
    """Condon-Shortley Clebsch-Gordan coefficient <j1 m1 j2 m2 | j3 m3> (Racah formula)."""
    if m3 != m1 + m2:
        return 0.0
    vmin = max(-j1 + j2 + m3, -j1 + m1, 0)
    vmax = min(j2 + j3 + m1, j3 - j1 + j2, j3 + m3)

    f = factorial
    norm = Fraction(
        (2 * j3 + 1) * f(j3 + j1 - j2) * f(j3 - j1 + j2) * f(j1 + j2 - j3) * f(j3 + m3) * f(j3 - m3),
        f(j1 + j2 + j3 + 1) * f(j1 - m1) * f(j1 + m1) * f(j2 - m2) * f(j2 + m2),
    )
    total = Fraction(0)
    for v in range(vmin, vmax + 1):
        total += (-1) ** (v + j2 + m2) * Fraction(
            f(j2 + j3 + m1 - v) * f(j1 - m1 + v),
            f(v) * f(j3 - j1 + j2 - v) * f(j3 + m3 - v) * f(v + j1 - j2 - m3),
        )
    return float(norm) ** 0.5 * float(total)


def complex_clebsch_gordan(l1: int, l2: int, l3: int) -> np.ndarray:
    """Complex-basis coefficients, shape ``(2l1+1, 2l2+1, 2l3+1)`` indexed by ``l + m``."""
    out = np.zeros((2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1))
    if not abs(l1 - l2) <= l3 <= l1 + l2:
        return out
    for m1 in range(-l1, l1 + 1):
        for m2 in range(-l2, l2 + 1):
            m3 = m1 + m2
            if abs(m3) <= l3:
                out[l1 + m1, l2 + m2, l3 + m3] = _su2_cg(l1, m1, l2, m2, l3, m3)
    return out


def real_to_complex_basis(l: int) -> np.ndarray:
    """Unitary ``q`` with ``Y_complex = q @ Y_real`` (rows: complex ``m``, columns: real ``m``)."""
    q = np.zeros((2 * l + 1, 2 * l + 1), dtype=np.complex128)
    inv_sqrt2 = 1.0 / np.sqrt(2.0)
    for m in range(-l, 0):
        q[l + m, l + abs(m)] = inv_sqrt2
        q[l + m, l - abs(m)] = -1j * inv_sqrt2
    q[l, l] = 1.0
    for m in range(1, l + 1):
        q[l + m, l + abs(m)] = (-1) ** m * inv_sqrt2
        q[l + m, l - abs(m)] = 1j * (-1) ** m * inv_sqrt2
    # global phase making the coupling coefficients real
    return (-1j) ** l * q


def _compute_real_cg(l1: int, l2: int, l3: int) -> np.ndarray:
    q1, q2, q3 = (real_to_complex_basis(l) for l in (l1, l2, l3))
    c = complex_clebsch_gordan(l1, l2, l3).astype(np.complex128)
    c = np.einsum("ij,kl,ikn,nm->jlm", q1.conj(), q2.conj(), c, q3)
    re, im = np.abs(c.real).max(initial=0.0), np.abs(c.imag).max(initial=0.0)
    real = c.real if re >= im else c.imag
    if min(re, im) > 1e-10:
        raise HarmonicsError(f"Real coupling ({l1},{l2},{l3}) is not real-valued")
    return real


def real_clebsch_gordan(l1: int, l2: int, l3: int) -> np.ndarray:
    """Real-basis coupling tensor ``C[m1, m2, M]``; for fixed ``M`` the columns are orthonormal."""
    table = _real_cg_tables.get((l1, l2, l3))
    if table is not None:
        return table
    for l in (l1, l2, l3):
        _check_degree(l)
    with _cache_lock:
        table = _real_cg_tables.get((l1, l2, l3))
        if table is None:
            table = _compute_real_cg(l1, l2, l3)
            table.setflags(write=False)
            _real_cg_tables[(l1, l2, l3)] = table
    return table


def dump_cg_table(path: str, l_max: int):
    """Write every nonzero real coupling coefficient ``l1 l2 L m1 m2 M value`` for cross-checking."""
    with open(path, "w") as handle:
        for l1 in range(l_max + 1):
            for l2 in range(l_max + 1):
                for l3 in range(abs(l1 - l2), l1 + l2 + 1):
                    c = real_clebsch_gordan(l1, l2, l3)
                    for (a, b, k) in zip(*np.nonzero(np.abs(c) > 1e-14)):
                        handle.write(
                            f"{l1} {l2} {l3} {a - l1} {b - l2} {k - l3} {c[a, b, k]:.16e}\n"
                        )


# ---------------------------------------------------------------------------
# Wigner-D matrices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WignerBlock:
    l: int
    matrix: np.ndarray


def check_rotation(R: np.ndarray, tol: float = ROTATION_TOL) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        raise ShapeError(f"Rotation must be 3x3, got {R.shape}")
    eye = np.eye(3)
    err = np.abs(np.einsum("...ij,...kj->...ik", R, R) - eye).max(initial=0.0)
    if err > tol:
        raise HarmonicsError(f"Rotation is not orthogonal (error {err:.2e})")
    det = np.linalg.det(R)
    if np.any(np.abs(det - 1.0) > tol):
        raise HarmonicsError("Rotation must be proper (det = +1)")
    return R


def _coupling_matrix(l: int) -> np.ndarray:
    """``(l-1) x 1 -> l`` coupling as a ``(3(2l-1), 2l+1)`` matrix with orthonormal columns."""
    return real_clebsch_gordan(l - 1, 1, l).reshape(-1, 2 * l + 1)


def wigner_d_stack(l_max: int, rotations: np.ndarray) -> List[np.ndarray]:
    """Batched Wigner-D blocks ``[D^0, ..., D^l_max]`` each of shape ``(K, 2l+1, 2l+1)``.

    Built by the recursion ``D^l = C^T (D^{l-1} (x) R) C`` starting from ``D^1 = R``.
    """
    rotations = check_rotation(rotations)
    squeeze = rotations.ndim == 2
    rot = rotations[None] if squeeze else rotations
    k = rot.shape[0]
    blocks = [np.ones((k, 1, 1))]
    if l_max >= 1:
        blocks.append(rot.copy())
    for l in range(2, l_max + 1):
        prev = blocks[-1]
        n = prev.shape[-1]
        kron = np.einsum("kab,kcd->kacbd", prev, rot).reshape(k, 3 * n, 3 * n)
        c = _coupling_matrix(l)
        blocks.append(np.einsum("pi,kpq,qj->kij", c, kron, c))
    if squeeze:
        return [b[0] for b in blocks]
    return blocks


def wigner_d(l: int, R: np.ndarray) -> WignerBlock:
    if not 0 <= l <= L_MAX_SUPPORTED:
        raise HarmonicsError(f"Degree out of range: {l}")
    R = check_rotation(R)
    if R.ndim != 2:
        raise ShapeError("wigner_d expects a single 3x3 rotation")
    return WignerBlock(l=l, matrix=wigner_d_stack(l, R)[l])


def block_diagonal(blocks: Sequence[np.ndarray]) -> np.ndarray:
    """Assemble per-degree blocks of one rotation into the full ``H x H`` matrix."""
    size = sum(b.shape[-1] for b in blocks)
    out = np.zeros((size, size))
    offset = 0
    for b in blocks:
        n = b.shape[-1]
        out[offset:offset + n, offset:offset + n] = b
        offset += n
    return out


# ---------------------------------------------------------------------------
# Spherical harmonics
# ---------------------------------------------------------------------------

def spherical_harmonics(l: int, vectors: np.ndarray) -> np.ndarray:
    """Real spherical harmonics of degree ``l`` for the directions of ``vectors``, shape ``(K, 2l+1)``.

    Component normalization: ``|Y^l(r)|^2 = 2l + 1`` for every direction.
    """
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise HarmonicsError("Spherical harmonics of a zero vector are undefined")
    unit = vectors / norms
    y = np.ones((unit.shape[0], 1))
    for degree in range(1, l + 1):
        c = real_clebsch_gordan(degree - 1, 1, degree)
        y = np.einsum("ka,kb,abc->kc", y, unit, c)
        y /= np.linalg.norm(y, axis=-1, keepdims=True)
    return y * np.sqrt(2 * l + 1)


# ---------------------------------------------------------------------------
# Edge alignment
# ---------------------------------------------------------------------------

ALIGNMENT_AXIS = np.array([0.0, 1.0, 0.0])


def _rot_x(angle: np.ndarray) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    out = np.zeros(angle.shape + (3, 3))
    out[..., 0, 0] = 1.0
    out[..., 1, 1], out[..., 1, 2] = c, -s
    out[..., 2, 1], out[..., 2, 2] = s, c
    return out


def _rot_y(angle: np.ndarray) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    out = np.zeros(angle.shape + (3, 3))
    out[..., 1, 1] = 1.0
    out[..., 0, 0], out[..., 0, 2] = c, s
    out[..., 2, 0], out[..., 2, 2] = -s, c
    return out


def alignment_matrices(vectors: np.ndarray) -> np.ndarray:
    """3x3 rotations mapping each direction onto ``+y``.

    With azimuth ``a = atan2(x, z)`` and polar angle ``b = arccos(y)`` the rotation is
    ``R_x(-b) R_y(-a)``: first swing the direction into the y-z half plane, then tip it onto
    the axis. ``+y`` maps to the identity and ``-y`` to a half turn about x.
    """
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    norms = np.linalg.norm(vectors, axis=-1)
    if np.any(norms < 1e-12):
        raise HarmonicsError("Cannot align a zero vector")
    unit = vectors / norms[:, None]
    x, y, z = unit[:, 0], unit[:, 1], unit[:, 2]
    polar = np.arccos(np.clip(y, -1.0, 1.0))
    azimuth = np.arctan2(x, z)
    return np.einsum("kij,kjl->kil", _rot_x(-polar), _rot_y(-azimuth))


@dataclass(frozen=True)
class EdgeRotation:
    """Per-edge stacked Wigner blocks of the alignment rotation and their inverses.

    ``blocks[l]`` has shape ``(K, 2l+1, 2l+1)``.
    """

    matrices: np.ndarray
    blocks: Tuple[np.ndarray, ...]

    @property
    def l_max(self) -> int:
        return len(self.blocks) - 1

    @property
    def inverse_blocks(self) -> Tuple[np.ndarray, ...]:
        return tuple(np.swapaxes(b, -1, -2) for b in self.blocks)

    def apply(self, features: np.ndarray, inverse: bool = False) -> np.ndarray:
        """Rotate ``(K, H, ...)`` features degree by degree."""
        blocks = self.inverse_blocks if inverse else self.blocks
        out = np.empty_like(features)
        for l, d in enumerate(blocks):
            sl = degree_slice(l)
            out[:, sl] = np.einsum("kij,kj...->ki...", d, features[:, sl])
        return out


def align_rotations(vectors: np.ndarray, l_max: int) -> EdgeRotation:
    matrices = alignment_matrices(vectors)
    return EdgeRotation(matrices=matrices, blocks=tuple(wigner_d_stack(l_max, matrices)))


def align_rotation(r_hat: np.ndarray, l_max: int) -> EdgeRotation:
    r_hat = np.asarray(r_hat, dtype=np.float64)
    if r_hat.shape != (3,):
        raise ShapeError(f"Direction must be a 3-vector, got {r_hat.shape}")
    return align_rotations(r_hat[None], l_max)


# ---------------------------------------------------------------------------
# Coupled <-> uncoupled transforms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CGTransform:
    """Orthogonal change of basis from a ``(2l_a+1) x (2l_b+1)`` product block to coupled blocks.

    ``matrix`` columns are the coupled components, ``L`` ascending; ``offsets[L]`` is the
    slice of component ``L`` in the coupled vector.
    """

    l_a: int
    l_b: int
    matrix: np.ndarray
    offsets: Dict[int, slice]

    @property
    def degrees(self) -> List[int]:
        return list(range(abs(self.l_a - self.l_b), self.l_a + self.l_b + 1))

    @property
    def size(self) -> int:
        return (2 * self.l_a + 1) * (2 * self.l_b + 1)


def _build_cg_transform(l_a: int, l_b: int) -> CGTransform:
    columns = []
    offsets = {}
    offset = 0
    for L in range(abs(l_a - l_b), l_a + l_b + 1):
        c = real_clebsch_gordan(l_a, l_b, L).reshape(-1, 2 * L + 1)
        columns.append(c)
        offsets[L] = slice(offset, offset + 2 * L + 1)
        offset += 2 * L + 1
    matrix = np.concatenate(columns, axis=1)
    matrix.setflags(write=False)
    return CGTransform(l_a=l_a, l_b=l_b, matrix=matrix, offsets=offsets)


def cg_transform(l_a: int, l_b: int) -> CGTransform:
    transform = _cg_transforms.get((l_a, l_b))
    if transform is not None:
        return transform
    if l_a < 0 or l_b < 0:
        raise HarmonicsError("Degrees must be non-negative")
    _check_degree(l_a)
    _check_degree(l_b)
    with _cache_lock:
        transform = _cg_transforms.get((l_a, l_b))
        if transform is None:
            transform = _build_cg_transform(l_a, l_b)
            _cg_transforms[(l_a, l_b)] = transform
    return transform


def to_coupled(block: np.ndarray, t: CGTransform) -> np.ndarray:
    block = np.asarray(block)
    if block.shape != (2 * t.l_a + 1, 2 * t.l_b + 1):
        raise ShapeError(f"Block shape {block.shape} does not match {t.l_a}x{t.l_b}")
    return t.matrix.T @ block.reshape(-1)


def to_uncoupled(vector: np.ndarray, t: CGTransform) -> np.ndarray:
    vector = np.asarray(vector)
    if vector.shape != (t.size,):
        raise ShapeError(f"Coupled vector of length {vector.shape} does not match size {t.size}")
    return (t.matrix @ vector).reshape(2 * t.l_a + 1, 2 * t.l_b + 1)
