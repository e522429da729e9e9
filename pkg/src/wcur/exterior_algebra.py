"""Exterior algebra over R^m (2 <= m <= 8) with the metric extended to all grades.

Grade-k elements are stored as coefficient arrays over the canonical basis
{e_I : |I| = k}, one slot per k-subset I of {1..m}.  Subsets are encoded as
bitmasks and ordered by increasing mask value, so the component layout is
deterministic and cheap to index.

Operations: wedge, extended inner product (Gram determinant on simple
elements), Hodge star with the sign fixed by e_I ^ star(e_I) = +e_{1..m},
interior multiplication defined by adjointness <g _| b, a> = <g, b ^ a>,
and the bilinear "bullet" contraction built inductively from the interior
product (base case: grade-1 second argument).

Bilinear operations are also exposed as dense structure tensors so that
grid-shaped component arrays can be combined with einsum instead of
per-node object arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

M_MIN = 2
M_MAX = 8


class GradeError(ValueError):
    """Raised for grade/dimension combinations the algebra does not define."""


def _check_m(m: int) -> None:
    if not (M_MIN <= m <= M_MAX):
        raise GradeError(f"ambient dimension m={m} outside [{M_MIN}, {M_MAX}]")


@lru_cache(maxsize=None)
def _masks(m: int, k: int) -> tuple[int, ...]:
    """All k-subset bitmasks of {0..m-1}, ascending."""
    if k < 0 or k > m:
        raise GradeError(f"grade {k} invalid for m={m}")
    return tuple(p for p in range(1 << m) if bin(p).count("1") == k)


@lru_cache(maxsize=None)
def _mask_pos(m: int, k: int) -> dict[int, int]:
    return {p: i for i, p in enumerate(_masks(m, k))}


def grade_dim(m: int, k: int) -> int:
    """Dimension of the grade-k component space, C(m, k)."""
    _check_m(m)
    if k < 0 or k > m:
        raise GradeError(f"grade {k} invalid for m={m}")
    return math.comb(m, k)


def _merge_sign(a: int, b: int) -> int:
    # Sign of sorting the concatenation (sorted a, sorted b); a, b disjoint masks.
    sign = 1
    bb = b
    while bb:
        low = bb & -bb
        # bits of a strictly above this bit of b each contribute one swap
        if bin(a & ~(low | (low - 1))).count("1") % 2:
            sign = -sign
        bb ^= low
    return sign


@dataclass(frozen=True)
class MultiVec:
    """Immutable grade-k element of the exterior algebra over R^m."""

    m: int
    grade: int
    comps: np.ndarray

    def __post_init__(self):
        _check_m(self.m)
        want = grade_dim(self.m, self.grade)
        c = np.asarray(self.comps, dtype=float)
        if c.shape != (want,):
            raise GradeError(
                f"grade-{self.grade} element over R^{self.m} needs {want} components, got {c.shape}"
            )
        object.__setattr__(self, "comps", c)

    # -- constructors ---------------------------------------------------

    @staticmethod
    def zero(m: int, grade: int) -> "MultiVec":
        return MultiVec(m, grade, np.zeros(grade_dim(m, grade)))

    @staticmethod
    def scalar(m: int, value: float) -> "MultiVec":
        return MultiVec(m, 0, np.array([float(value)]))

    @staticmethod
    def from_vector(m: int, v) -> "MultiVec":
        return MultiVec(m, 1, np.asarray(v, dtype=float))

    @staticmethod
    def basis(m: int, indices: tuple[int, ...]) -> "MultiVec":
        """Basis element e_{i1} ^ ... ^ e_{ik} for strictly increasing 1-based indices."""
        if list(indices) != sorted(set(indices)):
            raise GradeError(f"basis indices must be strictly increasing, got {indices}")
        if indices and not (1 <= indices[0] and indices[-1] <= m):
            raise GradeError(f"basis indices out of range 1..{m}: {indices}")
        mask = 0
        for i in indices:
            mask |= 1 << (i - 1)
        k = len(indices)
        comps = np.zeros(grade_dim(m, k))
        comps[_mask_pos(m, k)[mask]] = 1.0
        return MultiVec(m, k, comps)

    # -- trivial algebra ------------------------------------------------

    def __add__(self, other: "MultiVec") -> "MultiVec":
        self._same_space(other)
        return MultiVec(self.m, self.grade, self.comps + other.comps)

    def __sub__(self, other: "MultiVec") -> "MultiVec":
        self._same_space(other)
        return MultiVec(self.m, self.grade, self.comps - other.comps)

    def __mul__(self, s: float) -> "MultiVec":
        return MultiVec(self.m, self.grade, self.comps * float(s))

    __rmul__ = __mul__

    def __neg__(self) -> "MultiVec":
        return MultiVec(self.m, self.grade, -self.comps)

    def _same_space(self, other: "MultiVec") -> None:
        if self.m != other.m or self.grade != other.grade:
            raise GradeError(
                f"mismatched spaces: (m={self.m}, k={self.grade}) vs (m={other.m}, k={other.grade})"
            )

    def as_vector(self) -> np.ndarray:
        if self.grade != 1:
            raise GradeError(f"as_vector on grade {self.grade}")
        return self.comps.copy()

    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.comps, self.comps)))


# -- structure tensors --------------------------------------------------
#
# wedge_tensor(m,p,q)[i,j,l]: coefficient of basis l in e_i^(p) ^ e_j^(q).
# The basis {e_I} is orthonormal for the extended inner product, so the
# inner product needs no tensor: it is the plain dot of component arrays.


@lru_cache(maxsize=None)
def wedge_tensor(m: int, p: int, q: int) -> np.ndarray:
    _check_m(m)
    if p + q > m:
        raise GradeError(f"wedge grades {p}+{q} exceed m={m}")
    A, B, out = _masks(m, p), _masks(m, q), _mask_pos(m, p + q)
    T = np.zeros((len(A), len(B), grade_dim(m, p + q)))
    for i, a in enumerate(A):
        for j, b in enumerate(B):
            if a & b:
                continue
            T[i, j, out[a | b]] = _merge_sign(a, b)
    return T


@lru_cache(maxsize=None)
def interior_tensor(m: int, q: int, p: int) -> np.ndarray:
    """T[i,j,l]: coefficient of basis l in e_i^(q) _| e_j^(p); requires p <= q."""
    _check_m(m)
    if p > q:
        raise GradeError(f"interior grade {p} exceeds {q}")
    G, B, out = _masks(m, q), _masks(m, p), _mask_pos(m, q - p)
    T = np.zeros((len(G), len(B), grade_dim(m, q - p)))
    for i, g in enumerate(G):
        for j, b in enumerate(B):
            if b & ~g:
                continue
            rest = g & ~b
            T[i, j, out[rest]] = _merge_sign(b, rest)
    return T


@lru_cache(maxsize=None)
def star_matrix(m: int, k: int) -> np.ndarray:
    """Matrix S with (star a).comps = S @ a.comps, grade k -> m-k."""
    _check_m(m)
    I, out = _masks(m, k), _mask_pos(m, m - k)
    full = (1 << m) - 1
    S = np.zeros((grade_dim(m, m - k), len(I)))
    for j, a in enumerate(I):
        comp = full & ~a
        S[out[comp], j] = _merge_sign(a, comp)
    return S


@lru_cache(maxsize=None)
def bullet_tensor(m: int, k: int, p: int) -> np.ndarray:
    """Structure tensor of the bullet contraction Lambda^k x Lambda^p -> Lambda^{k+p-2}.

    Base case p = 1 is the interior product; p >= 2 splits the second factor
    on its lowest basis index b, e_B = e_b ^ e_rest, and applies
    a * (beta ^ gamma) = (a * beta) ^ gamma + (-1)^{|beta||gamma|} (a * gamma) ^ beta.
    """
    _check_m(m)
    if k < 1 or p < 1:
        raise GradeError(f"bullet undefined for grades ({k}, {p})")
    r = k + p - 2
    if r < 0 or r > m:
        raise GradeError(f"bullet result grade {r} invalid for m={m}")
    if p == 1:
        return interior_tensor(m, k, 1)
    A, B = _masks(m, k), _masks(m, p)
    T = np.zeros((len(A), len(B), grade_dim(m, r)))
    t_b = bullet_tensor(m, k, 1)          # alpha * e_b      : grade k-1
    t_rest = bullet_tensor(m, k, p - 1)   # alpha * e_rest   : grade k+p-3
    w_first = wedge_tensor(m, k - 1, p - 1)
    w_second = wedge_tensor(m, k + p - 3, 1)
    pos1 = _mask_pos(m, 1)
    posrest = _mask_pos(m, p - 1)
    sgn = -1.0 if (p - 1) % 2 else 1.0
    for j, b in enumerate(B):
        low = b & -b
        rest = b ^ low
        jb, jr = pos1[low], posrest[rest]
        # (alpha * e_b) ^ e_rest
        term = np.einsum("il,lr->ir", t_b[:, jb, :], w_first[:, jr, :])
        # sign * (alpha * e_rest) ^ e_b
        term += sgn * np.einsum("il,lr->ir", t_rest[:, jr, :], w_second[:, jb, :])
        T[:, j, :] = term
    return T


# -- scalar operations --------------------------------------------------


def wedge(a: MultiVec, b: MultiVec) -> MultiVec:
    if a.m != b.m:
        raise GradeError("wedge across different ambient dimensions")
    T = wedge_tensor(a.m, a.grade, b.grade)
    return MultiVec(a.m, a.grade + b.grade, np.einsum("i,j,ijl->l", a.comps, b.comps, T))


def inner(a: MultiVec, b: MultiVec) -> float:
    a._same_space(b)
    return float(np.dot(a.comps, b.comps))


def hodge_star(a: MultiVec) -> MultiVec:
    return MultiVec(a.m, a.m - a.grade, star_matrix(a.m, a.grade) @ a.comps)


def interior(g: MultiVec, b: MultiVec) -> MultiVec:
    """g _| b, the adjoint of wedging by b: <g _| b, a> = <g, b ^ a>."""
    if g.m != b.m:
        raise GradeError("interior across different ambient dimensions")
    T = interior_tensor(g.m, g.grade, b.grade)
    return MultiVec(g.m, g.grade - b.grade, np.einsum("i,j,ijl->l", g.comps, b.comps, T))


def bullet(a: MultiVec, b: MultiVec) -> MultiVec:
    if a.m != b.m:
        raise GradeError("bullet across different ambient dimensions")
    T = bullet_tensor(a.m, a.grade, b.grade)
    return MultiVec(a.m, a.grade + b.grade - 2, np.einsum("i,j,ijl->l", a.comps, b.comps, T))


# -- field helpers ------------------------------------------------------
#
# Fields are arrays whose last axis holds grade components; leading axes
# (grid shape, coordinate indices, ...) broadcast through einsum.


def wedge_field(m: int, p: int, q: int, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...j,ijl->...l", A, B, wedge_tensor(m, p, q))

def bullet_field(m: int, k: int, p: int, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...j,ijl->...l", A, B, bullet_tensor(m, k, p))

def inner_field(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...i->...", A, B)

def star_field(m: int, k: int, A: np.ndarray) -> np.ndarray:
    return np.einsum("li,...i->...l", star_matrix(m, k), A)
