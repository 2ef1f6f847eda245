"""Matrix *-algebra machinery behind the commuting-Hamiltonian structure:
algebra closure, center computation, and the per-vertex common block
decomposition with tensor-factor extraction for each edge algebra.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import isqrt

import numpy as np

from .errors import EmptyFamily, PremiseError, StructureError
from .operators import _as_matrix, project_onto_span, span_orthonormal_basis
from .seeding import derive_rng


@dataclass
class MatrixAlgebra:
    """Linear span of matrices with measured closure residuals.

    ``basis`` is Frobenius-orthonormal.  The boolean flags report whether
    the corresponding residual is within 1e-10; internal callers that
    build algebras from noisy generators may carry flags set to False.
    """

    dim: int
    basis: np.ndarray  # (r, dim, dim)
    identity_residual: float = 0.0
    dagger_residual: float = 0.0
    product_residual: float = 0.0

    FLAG_TOL = 1e-10

    @property
    def rank(self) -> int:
        return self.basis.shape[0]

    @property
    def unital(self) -> bool:
        return self.identity_residual <= self.FLAG_TOL

    @property
    def dagger_closed(self) -> bool:
        return self.dagger_residual <= self.FLAG_TOL

    @property
    def product_closed(self) -> bool:
        return self.product_residual <= self.FLAG_TOL

    def contains_residual(self, m) -> float:
        _, resid = project_onto_span(self.basis, m)
        return resid

    def validate(self, tol: float = 1e-10):
        worst = max(self.identity_residual, self.dagger_residual, self.product_residual)
        if worst > tol:
            raise StructureError(
                f"algebra closure residual {worst:.3e} exceeds {tol:.1e}")


def _closure_residuals(basis: np.ndarray, dim: int) -> tuple[float, float, float]:
    ident = project_onto_span(basis, np.eye(dim, dtype=complex))[1]
    dag = 0.0
    prod = 0.0
    for i in range(basis.shape[0]):
        dag = max(dag, project_onto_span(basis, basis[i].conj().T)[1])
        for j in range(basis.shape[0]):
            prod = max(prod, project_onto_span(basis, basis[i] @ basis[j])[1])
    return ident, dag, prod


def close_algebra(generators, *, tol: float = 1e-10, max_rounds: int = 50) -> MatrixAlgebra:
    """Smallest unital, dagger- and product-closed span containing the generators.

    Iterates (span + pairwise products + daggers -> re-orthonormalize)
    until the dimension stabilizes.  New directions are kept when their
    residual against the current span exceeds ``tol`` times the family
    scale, which lets callers close noisy generator sets by passing a
    relaxed tolerance.
    """
    mats = [_as_matrix(g) for g in generators]
    if not mats:
        raise EmptyFamily("cannot close an empty generator set")
    d = mats[0].shape[0]
    for m in mats:
        if m.shape[0] != d:
            raise StructureError("generators have mixed dimensions")
    scale = max(max(float(np.linalg.norm(m)) for m in mats), 1.0)

    basis: list[np.ndarray] = []

    def try_add(m: np.ndarray) -> bool:
        v = m.copy()
        for _ in range(2):  # twice for numerical orthogonality
            for b in basis:
                v -= np.vdot(b, v) * b
        nv = float(np.linalg.norm(v))
        if nv > tol * scale:
            basis.append(v / nv)
            return True
        return False

    queue = [np.eye(d, dtype=complex)] + mats
    while queue and len(basis) < d * d:
        m = queue.pop(0)
        if try_add(m):
            queue.append(basis[-1].conj().T)

    for _ in range(max_rounds):
        if len(basis) >= d * d:
            break
        snapshot = list(basis)
        added = False
        for bi in snapshot:
            for bj in snapshot:
                if len(basis) >= d * d:
                    break
                if try_add(bi @ bj):
                    added = True
                    try_add(basis[-1].conj().T)
        if not added:
            break

    arr = np.asarray(basis)
    ident, dag, prod = _closure_residuals(arr, d)
    return MatrixAlgebra(dim=d, basis=arr, identity_residual=ident,
                         dagger_residual=dag, product_residual=prod)


def center_basis(algebra: MatrixAlgebra, *, tol: float = 1e-8) -> np.ndarray:
    """Orthonormal basis of {Z in algebra : [Z, A] = 0 for all A in algebra}.

    Computed from the null space of the stacked commutator map on the
    algebra's coordinates; always contains the normalized identity.
    """
    b = algebra.basis
    r, d, _ = b.shape
    comm = np.einsum("kab,jbc->kjac", b, b) - np.einsum("jab,kbc->kjac", b, b)
    m = comm.reshape(r, r * d * d).T  # columns indexed by coefficient k
    _, s, vh = np.linalg.svd(m, full_matrices=True)
    smax = s[0] if s.size else 0.0
    null = []
    for i in range(r):
        si = s[i] if i < s.size else 0.0
        if si <= tol * max(smax, 1.0):
            null.append(vh[i].conj())
    if not null:
        raise StructureError("algebra center came out empty (identity missing?)")
    elems = np.einsum("ck,kab->cab", np.asarray(null), b)
    return span_orthonormal_basis(elems)


# ---------------------------------------------------------------------------
# Vertex structure: common blocks plus per-edge tensor factors
# ---------------------------------------------------------------------------


@dataclass
class BlockStructure:
    """One common block of a vertex space.

    ``isometry`` maps the block coordinates into C^d with columns ordered
    as the tensor product of the edge factors (in ``factor_dims`` order)
    followed by the residual (multiplicity) factor.
    """

    isometry: np.ndarray            # (d, block_dim)
    factor_dims: list[tuple[int, int]]  # (edge_id, factor_dim), extraction order
    residual_dim: int

    @property
    def dim(self) -> int:
        return self.isometry.shape[1]

    def dims_list(self) -> list[int]:
        return [f for _, f in self.factor_dims] + [self.residual_dim]

    def slot(self, edge_id: int) -> int:
        for i, (e, _) in enumerate(self.factor_dims):
            if e == edge_id:
                return i
        raise KeyError(f"edge {edge_id} has no factor in this block")

    def factor_dim(self, edge_id: int) -> int:
        return self.factor_dims[self.slot(edge_id)][1]


@dataclass
class VertexStructure:
    vertex: int | None
    d: int
    blocks: list[BlockStructure]

    @property
    def block_dims(self) -> list[int]:
        return [b.dim for b in self.blocks]

    def validate(self, edge_algebras=None, edge_ids=None, *,
                 iso_tol: float = 1e-10, recon_tol: float = 1e-8):
        if sum(self.block_dims) != self.d:
            raise StructureError(
                f"block dims {self.block_dims} do not sum to d={self.d}")
        stacked = np.hstack([b.isometry for b in self.blocks])
        gram = stacked.conj().T @ stacked
        if float(np.linalg.norm(gram - np.eye(self.d))) > iso_tol:
            raise StructureError("block isometries are not jointly orthonormal")
        for b in self.blocks:
            if int(np.prod(b.dims_list())) != b.dim:
                raise StructureError(
                    f"factor dims {b.dims_list()} inconsistent with block dim {b.dim}")
        if edge_algebras is not None:
            ids = list(edge_ids) if edge_ids is not None else list(range(len(edge_algebras)))
            for alg, eid in zip(edge_algebras, ids):
                worst = 0.0
                for g in alg.basis:
                    worst = max(worst, faithful_action_residual(self, eid, g))
                if worst > recon_tol:
                    raise StructureError(
                        f"edge {eid} algebra is not (factor x identity) on the blocks "
                        f"(residual {worst:.3e} > {recon_tol:.1e})")


def _conditional_on_slot(msub: np.ndarray, dims: list[int], slot: int) -> tuple[np.ndarray, np.ndarray]:
    """Conditional expectation of ``msub`` onto (operator on slot) x identity.

    Returns the slot operator X and the lifted matrix X (x) I.
    """
    k = len(dims)
    t = msub.reshape(dims + dims)
    in_labels = list(range(k)) + [i + k if i == slot else i for i in range(k)]
    x = np.einsum(t, in_labels, [slot, slot + k])
    rest = int(np.prod(dims)) // dims[slot]
    x = x / rest
    before = int(np.prod(dims[:slot])) if slot > 0 else 1
    after = int(np.prod(dims[slot + 1:])) if slot + 1 < k else 1
    lifted = np.kron(np.kron(np.eye(before, dtype=complex), x),
                     np.eye(after, dtype=complex))
    return x, lifted


def faithful_action_residual(structure: VertexStructure, edge_id: int, m) -> float:
    """How far ``m`` is from acting as (factor operator) x identity per block."""
    mat = _as_matrix(m)
    worst = 0.0
    proj = project_to_edge_slot(structure, edge_id, mat)
    worst = float(np.linalg.norm(mat - proj))
    return worst


def project_to_edge_slot(structure: VertexStructure, edge_id: int, m) -> np.ndarray:
    """Orthogonal projection onto block-diagonal (slot operator) x identity form.

    This is the subspace in which the rounded replacements for the given
    edge live; operators projected for different edges commute exactly.
    """
    mat = _as_matrix(m)
    out = np.zeros_like(mat)
    for b in structure.blocks:
        msub = b.isometry.conj().T @ mat @ b.isometry
        _, lifted = _conditional_on_slot(msub, b.dims_list(), b.slot(edge_id))
        out += b.isometry @ lifted @ b.isometry.conj().T
    return out


def edge_slot_basis(structure: VertexStructure, edge_id: int) -> np.ndarray:
    """Orthonormal basis of the projection subspace of ``project_to_edge_slot``."""
    elems = []
    d = structure.d
    for b in structure.blocks:
        dims = b.dims_list()
        slot = b.slot(edge_id)
        f = dims[slot]
        rest = b.dim // f
        before = int(np.prod(dims[:slot])) if slot > 0 else 1
        after = int(np.prod(dims[slot + 1:])) if slot + 1 < len(dims) else 1
        for p in range(f):
            for q in range(f):
                e = np.zeros((f, f), dtype=complex)
                e[p, q] = 1.0
                lifted = np.kron(np.kron(np.eye(before, dtype=complex), e),
                                 np.eye(after, dtype=complex)) / np.sqrt(rest)
                elems.append(b.isometry @ lifted @ b.isometry.conj().T)
    return np.asarray(elems).reshape(-1, d, d)


def _hermitian_span(basis: np.ndarray) -> np.ndarray:
    herm = np.concatenate([(basis + basis.conj().transpose(0, 2, 1)) / 2,
                           (basis - basis.conj().transpose(0, 2, 1)) / 2j])
    return span_orthonormal_basis(herm, tol=1e-9)


def _cluster_sorted(w: np.ndarray, gap: float) -> list[np.ndarray]:
    clusters = []
    start = 0
    for i in range(1, len(w)):
        if w[i] - w[i - 1] > gap:
            clusters.append(np.arange(start, i))
            start = i
    clusters.append(np.arange(start, len(w)))
    return clusters


def _extract_factor(restricted: np.ndarray, m: int, rng: np.random.Generator, *,
                    cluster_gap: float, recon_tol: float,
                    attempts: int = 6) -> tuple[int, int, np.ndarray, float]:
    """Factorize C^m = C^f (x) C^mult so restricted ~ M_f (x) I_mult.

    Returns (f, mult, basis change W, worst reconstruction residual).
    """
    r = restricted.shape[0]
    f = isqrt(r)
    if f * f != r:
        raise StructureError(f"restricted algebra dim {r} is not a perfect square")
    if m % f != 0:
        raise StructureError(f"factor dim {f} does not divide block dim {m}")
    mult = m // f
    if f == 1:
        return 1, m, np.eye(m, dtype=complex), 0.0

    herm = _hermitian_span(restricted)
    last_error = None
    for _ in range(attempts):
        g = np.einsum("c,cab->ab", rng.standard_normal(herm.shape[0]), herm)
        w, vecs = np.linalg.eigh(g)
        clusters = _cluster_sorted(w, max(cluster_gap, 1e-9 * (w[-1] - w[0] + 1)))
        if len(clusters) != f or any(len(c) != mult for c in clusters):
            last_error = StructureError(
                f"eigenvalue clusters {[len(c) for c in clusters]} do not match "
                f"f={f}, multiplicity={mult}")
            continue
        cs = [vecs[:, c] for c in clusters]
        t = np.einsum("c,cab->ab", rng.standard_normal(herm.shape[0]), herm)
        cols = [cs[0]]
        ok = True
        for p in range(1, f):
            rp = cs[p].conj().T @ t @ cs[0]
            u, s, vh = np.linalg.svd(rp)
            if s[0] < 1e-12 or s[-1] < 1e-3 * s[0]:
                ok = False
                break
            cols.append(cs[p] @ (u @ vh))
        if not ok:
            last_error = StructureError("generic element does not connect the clusters")
            continue
        wfac = np.hstack(cols)
        u, _, vh = np.linalg.svd(wfac)
        wfac = u @ vh  # exact unitary cleanup
        worst = 0.0
        for grest in restricted:
            g2 = (wfac.conj().T @ grest @ wfac).reshape(f, mult, f, mult)
            x = np.einsum("psqs->pq", g2) / mult
            worst = max(worst, float(np.linalg.norm(
                g2 - np.einsum("pq,st->psqt", x, np.eye(mult)))))
        if worst > recon_tol:
            last_error = StructureError(
                f"factor reconstruction residual {worst:.3e} > {recon_tol:.1e}")
            continue
        return f, mult, wfac, worst
    raise last_error if last_error else StructureError("factor extraction failed")


def block_decompose_vertex(edge_algebras, *, edge_ids=None, vertex: int | None = None,
                           seed: int = 0, premise_tol: float = 1e-9,
                           cluster_gap: float = 1e-6, recon_tol: float = 1e-8,
                           closure_tol: float = 1e-10, center_tol: float = 1e-8,
                           trivial_tol: float = 1e-8, span_tol: float = 1e-10,
                           attempts: int = 6, validate: bool = True) -> VertexStructure:
    """Common block decomposition of pairwise commuting edge algebras.

    Blocks come from eigenvalue clustering of a random Hermitian element
    of the joint center; within each block every edge algebra is factored
    as (full algebra on its tensor factor) x identity, with leftover
    multiplicity assigned to a residual factor shared by no edge.
    """
    algebras = list(edge_algebras)
    if not algebras:
        raise EmptyFamily("no edge algebras to decompose")
    d = algebras[0].dim
    ids = list(edge_ids) if edge_ids is not None else list(range(len(algebras)))

    for i in range(len(algebras)):
        for j in range(i + 1, len(algebras)):
            worst = 0.0
            for g in algebras[i].basis:
                for h in algebras[j].basis:
                    worst = max(worst, float(np.linalg.norm(g @ h - h @ g)))
            if worst > premise_tol:
                raise PremiseError(
                    f"edge algebras {ids[i]} and {ids[j]} do not commute "
                    f"(residual {worst:.3e} > {premise_tol:.1e})")

    joint = close_algebra(np.concatenate([a.basis for a in algebras]), tol=closure_tol)
    center = center_basis(joint, tol=center_tol)
    herm_center = _hermitian_span(center)
    n_blocks = herm_center.shape[0]

    rng = derive_rng(seed, "block-decompose", -1 if vertex is None else vertex)
    blocks_iso = None
    for _ in range(attempts):
        z = np.einsum("c,cab->ab", rng.standard_normal(n_blocks), herm_center)
        w, vecs = np.linalg.eigh(z)
        clusters = _cluster_sorted(w, cluster_gap)
        if len(clusters) != n_blocks:
            continue
        candidate = [vecs[:, c] for c in clusters]
        ok = True
        for v in candidate:
            p = v @ v.conj().T
            for g in joint.basis:
                if float(np.linalg.norm(p @ g - g @ p)) > max(10 * premise_tol, recon_tol):
                    ok = False
                    break
            if not ok:
                break
        if ok:
            blocks_iso = candidate
            break
    if blocks_iso is None:
        raise StructureError(
            f"central eigenvalue clustering ambiguous (expected {n_blocks} blocks; "
            "gap below cluster threshold) - adjust cluster_gap or tolerances")

    blocks = []
    for vb in blocks_iso:
        m_cur = vb.shape[1]
        resid_iso = vb
        block_trans = np.eye(vb.shape[1], dtype=complex)
        fprod = 1
        factor_dims = []
        for alg, eid in zip(algebras, ids):
            restricted_raw = np.einsum("ia,kij,jb->kab", resid_iso.conj(), alg.basis, resid_iso)
            trivial = True
            for g in restricted_raw:
                scal = np.trace(g) / m_cur
                if float(np.linalg.norm(g - scal * np.eye(m_cur))) > trivial_tol:
                    trivial = False
                    break
            if trivial or m_cur == 1:
                factor_dims.append((eid, 1))
                continue
            restricted = span_orthonormal_basis(restricted_raw, tol=span_tol)
            f, mult, wfac, _ = _extract_factor(
                restricted, m_cur, rng, cluster_gap=cluster_gap,
                recon_tol=max(recon_tol, 10 * trivial_tol), attempts=attempts)
            block_trans = block_trans @ np.kron(np.eye(fprod, dtype=complex), wfac)
            e0 = np.zeros((f, 1), dtype=complex)
            e0[0, 0] = 1.0
            resid_iso = resid_iso @ wfac @ np.kron(e0, np.eye(mult, dtype=complex))
            fprod *= f
            m_cur = mult
            factor_dims.append((eid, f))
        blocks.append(BlockStructure(isometry=vb @ block_trans,
                                     factor_dims=factor_dims,
                                     residual_dim=m_cur))

    structure = VertexStructure(vertex=vertex, d=d, blocks=blocks)
    if validate:
        structure.validate(algebras, ids, recon_tol=max(recon_tol, 10 * trivial_tol))
    return structure
