"""Dense complex-matrix kernel: Frobenius geometry, commutators, tensor
embeddings, and the operator Schmidt decomposition of 2-local terms.

Conventions fixed here and used by the whole package:

* One d-dimensional qudit sits on every vertex.  An operator supported
  on a vertex set acts on the tensor product of the vertex spaces with
  vertex ids in **ascending order**, in numpy ``kron`` order (the
  smallest vertex id is the slowest-varying index).
* The operator Schmidt decomposition of ``Q`` on ``C^d (x) C^d`` is the
  SVD of the realignment matrix ``R[(i,j),(k,l)] = Q[(i,k),(j,l)]``:
  rows are indexed by the (row, column) pair of the pivot factor,
  columns by the (row, column) pair of the other one.  Singular values
  below ``rank_cutoff * s_max`` are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import isqrt

import numpy as np

from .errors import DimensionMismatch, EmptyFamily

RANK_CUTOFF = 1e-12

Support = "tuple[int, ...] | None"


def _as_matrix(op) -> np.ndarray:
    if isinstance(op, Operator):
        return op.matrix
    m = np.asarray(op, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {m.shape}")
    return m


@dataclass
class Operator:
    """Dense complex square matrix with optional vertex-set support.

    ``support`` is a sorted tuple of vertex ids, or ``None`` for an
    abstract operator not tied to any graph location.
    """

    matrix: np.ndarray
    support: tuple[int, ...] | None = None

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
            raise DimensionMismatch(f"operator must be a square matrix, got shape {m.shape}")
        self.matrix = m
        if self.support is not None:
            sup = tuple(sorted(int(v) for v in self.support))
            if len(set(sup)) != len(sup):
                raise DimensionMismatch(f"support has repeated vertices: {sup}")
            self.support = sup

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def dagger(self) -> "Operator":
        return Operator(self.matrix.conj().T, self.support)


def frobenius_inner(a, b) -> complex:
    """Tr(A^dagger B), the natural inner product on matrices."""
    am, bm = _as_matrix(a), _as_matrix(b)
    if am.shape != bm.shape:
        raise DimensionMismatch(f"dimension mismatch: {am.shape[0]} vs {bm.shape[0]}")
    return complex(np.vdot(am, bm))


def frobenius_norm(a) -> float:
    return float(np.linalg.norm(_as_matrix(a)))


def operator_norm(a) -> float:
    """Largest singular value (the unadorned norm of the commutator bound)."""
    return float(np.linalg.norm(_as_matrix(a), 2))


def commutator(a, b) -> Operator:
    """AB - BA.  Operands on different supports must be embedded first."""
    am, bm = _as_matrix(a), _as_matrix(b)
    if am.shape != bm.shape:
        raise DimensionMismatch(f"dimension mismatch: {am.shape[0]} vs {bm.shape[0]}")
    sup_a = a.support if isinstance(a, Operator) else None
    sup_b = b.support if isinstance(b, Operator) else None
    if sup_a is not None and sup_b is not None and sup_a != sup_b:
        raise DimensionMismatch(
            f"operands live on different supports {sup_a} vs {sup_b}; "
            "embed both on the union support with tensor_embed first"
        )
    return Operator(am @ bm - bm @ am, sup_a if sup_a == sup_b else None)


def tensor_embed(op, source, target, d: int) -> Operator:
    """Pad ``op`` with identities from vertex set ``source`` to ``target``.

    Both supports are sorted internally; the result acts on the target
    vertices in ascending id order.
    """
    m = _as_matrix(op)
    if source is None and isinstance(op, Operator):
        source = op.support
    if source is None:
        raise DimensionMismatch("source support is required (operator carries none)")
    src = tuple(sorted(int(v) for v in source))
    tgt = tuple(sorted(int(v) for v in target))
    if not set(src) <= set(tgt):
        raise DimensionMismatch(f"source support {src} is not contained in target {tgt}")
    if m.shape[0] != d ** len(src):
        raise DimensionMismatch(
            f"operator dim {m.shape[0]} does not match d^|source| = {d ** len(src)}"
        )
    extra = [v for v in tgt if v not in src]
    big = np.kron(m, np.eye(d ** len(extra), dtype=complex))
    order = list(src) + extra
    perm = [order.index(v) for v in tgt]
    k = len(tgt)
    t = big.reshape((d,) * (2 * k))
    t = t.transpose(perm + [k + p for p in perm])
    return Operator(np.ascontiguousarray(t.reshape(d**k, d**k)), tgt)


@dataclass
class SchmidtDecomposition:
    """Q = sum_a A_a (x) B_a with the coefficients absorbed into the A side.

    ``a_ops`` act on the pivot factor and carry the Schmidt coefficients
    (pairwise Frobenius-orthogonal); ``b_ops`` are Frobenius-orthonormal.
    ``pivot`` records which tensor factor the A side acts on.
    """

    d: int
    pivot: str
    a_ops: np.ndarray  # (k, d, d), orthogonal, ||A_a||_F = lambda_a
    b_ops: np.ndarray  # (k, d, d), orthonormal

    @property
    def rank(self) -> int:
        return self.a_ops.shape[0]

    @property
    def coefficients(self) -> np.ndarray:
        return np.sqrt(np.einsum("aij,aij->a", self.a_ops.conj(), self.a_ops).real)

    def reconstruct(self) -> np.ndarray:
        d = self.d
        if self.rank == 0:
            return np.zeros((d * d, d * d), dtype=complex)
        if self.pivot == "left":
            out = np.einsum("aij,akl->ikjl", self.a_ops, self.b_ops)
        else:
            out = np.einsum("aij,akl->ikjl", self.b_ops, self.a_ops)
        return out.reshape(d * d, d * d)


def schmidt_decompose(q, pivot: str = "left", *, d: int | None = None,
                      rank_cutoff: float = RANK_CUTOFF) -> SchmidtDecomposition:
    """Operator Schmidt decomposition of a 2-local operator.

    ``pivot`` selects which factor carries the coefficients ("left" or
    "right").  Terms with singular value below ``rank_cutoff`` times the
    largest are dropped.
    """
    m = _as_matrix(q)
    n = m.shape[0]
    if d is None:
        d = isqrt(n)
    if d * d != n:
        raise DimensionMismatch(f"dim {n} is not the square of qudit dimension d={d}")
    if pivot not in ("left", "right"):
        raise ValueError(f"pivot must be 'left' or 'right', got {pivot!r}")
    t = m.reshape(d, d, d, d)
    r = t.transpose(0, 2, 1, 3) if pivot == "left" else t.transpose(1, 3, 0, 2)
    u, s, vh = np.linalg.svd(r.reshape(d * d, d * d), full_matrices=False)
    if s.size and s[0] > 0:
        keep = s > rank_cutoff * s[0]
    else:
        keep = np.zeros(s.shape, dtype=bool)
    a_ops = (s[keep, None, None] * u[:, keep].T.reshape(-1, d, d))
    b_ops = vh[keep].reshape(-1, d, d)
    return SchmidtDecomposition(d=d, pivot=pivot, a_ops=a_ops, b_ops=b_ops)


def span_orthonormal_basis(mats, tol: float = RANK_CUTOFF) -> np.ndarray:
    """Orthonormal (Frobenius) basis of the span of ``mats``, shape (r, d, d)."""
    stack = np.asarray([_as_matrix(m) for m in mats], dtype=complex)
    if stack.size == 0:
        return stack.reshape(0, 0, 0)
    k, d, _ = stack.shape
    vecs = stack.reshape(k, d * d)
    _, s, vh = np.linalg.svd(vecs, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros((0, d, d), dtype=complex)
    keep = s > tol * s[0]
    return vh[keep].reshape(-1, d, d)


def project_onto_span(basis: np.ndarray, m) -> tuple[np.ndarray, float]:
    """Orthogonal projection of ``m`` onto span(basis); returns (projection, residual)."""
    mat = _as_matrix(m)
    if basis.shape[0] == 0:
        return np.zeros_like(mat), float(np.linalg.norm(mat))
    b = basis.reshape(basis.shape[0], -1)
    v = mat.ravel()
    comps = b.conj() @ v
    proj = np.tensordot(comps, b, axes=1).reshape(mat.shape)
    return proj, float(np.linalg.norm(mat - proj))


def conjugation_closure_residual(family) -> float:
    """Max Frobenius distance from any member's dagger to the family's span.

    Zero exactly when the span is closed under conjugation.
    """
    mats = [_as_matrix(f) for f in family]
    if not mats:
        raise EmptyFamily("conjugation closure of an empty family is undefined")
    dims = {m.shape[0] for m in mats}
    if len(dims) > 1:
        raise DimensionMismatch(f"family members have mixed dims {sorted(dims)}")
    basis = span_orthonormal_basis(mats)
    worst = 0.0
    for m in mats:
        _, resid = project_onto_span(basis, m.conj().T)
        worst = max(worst, resid)
    return worst
