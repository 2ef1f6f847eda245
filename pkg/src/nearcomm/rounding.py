"""Replace nearly-commuting per-vertex operator families with exactly
commuting ones at small Frobenius displacement, then sweep all vertices
to turn a nearly-commuting instance H into a commuting instance H-hat.

The primary ("structural") path extracts an approximate block/factor
structure from the family (via the algebra module), projects the
original operators orthogonally onto it, and restores within-group
orthogonality and norms by Gram-Schmidt + rescaling.  Because the
projected groups act on disjoint tensor factors inside common blocks,
their cross-group commutators vanish to machine precision.  A penalty
descent with mu-continuation supplies a reference structure whenever
the input is too noisy to read the structure off directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import algebra as alg
from .errors import SolverError, PremiseError
from .instance import QsatInstance, noncommutativity_profile
from .operators import Operator, schmidt_decompose, tensor_embed
from .seeding import derive_rng


@dataclass
class EdgeGroup:
    """A-side Schmidt operators of one incident edge at a vertex."""

    edge_id: int
    ops: np.ndarray  # (k, d, d)


@dataclass
class VertexFamily:
    vertex: int
    d: int
    groups: list[EdgeGroup]

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """All operators as one (K, d, d) array plus group index per row."""
        if not self.groups:
            return np.zeros((0, self.d, self.d), dtype=complex), np.zeros(0, dtype=int)
        ops = np.concatenate([g.ops for g in self.groups]) if any(
            g.ops.shape[0] for g in self.groups) else np.zeros((0, self.d, self.d), dtype=complex)
        gidx = np.concatenate([np.full(g.ops.shape[0], i, dtype=int)
                               for i, g in enumerate(self.groups)]) if ops.shape[0] else np.zeros(0, dtype=int)
        return ops, gidx


@dataclass
class RoundingConfig:
    mode: str = "structural"          # "structural" or "penalty"
    tol: float = 1e-10                # cross-group residual target (Frobenius)
    post_tol: float = 1e-9            # commutator target after hermitization
    max_iters: int = 4000
    norm_preserving: bool = True
    fixed_point_tol: float = 1e-10
    cluster_gap: float = 1e-6
    seed: int = 0
    penalty_restarts: int = 4
    penalty_mu0: float = 1.0
    penalty_rounds: int = 22
    penalty_inner_steps: int = 50
    penalty_noise: float = 0.05
    penalty_gtol: float = 1e-9


@dataclass
class VertexRoundReport:
    vertex: int
    mode: str
    displacement_max: float
    per_term_displacement: dict[int, np.ndarray]
    residual_before: float
    residual_after: float
    iterations: int
    block_dims: list[int] | None
    norm_restore_residual: float


@dataclass
class ReplacementRecord:
    """Snapshot of all current terms before/after one vertex replacement."""

    vertex: int
    incident: list[int]
    before: dict[int, np.ndarray]
    after: dict[int, np.ndarray]


@dataclass
class NormPreservationReport:
    max_deviation: float
    pair_count: int
    per_vertex_max: dict[int, float]


@dataclass
class RoundingReport:
    vertices: list[VertexRoundReport]
    eps_report: float
    per_term_distance_op: list[float]
    max_commutator_fro: float
    max_commutator_op: float
    norm_preservation: NormPreservationReport | None = None
    replacement_log: list[ReplacementRecord] = field(default_factory=list, repr=False)

    def to_json_dict(self) -> dict:
        return {
            "eps_report": self.eps_report,
            "per_term_distance_op": list(self.per_term_distance_op),
            "max_commutator_fro": self.max_commutator_fro,
            "max_commutator_op": self.max_commutator_op,
            "vertices": [
                {
                    "vertex": v.vertex,
                    "mode": v.mode,
                    "displacement_max": v.displacement_max,
                    "residual_before": v.residual_before,
                    "residual_after": v.residual_after,
                    "iterations": v.iterations,
                    "block_dims": v.block_dims,
                    "norm_restore_residual": v.norm_restore_residual,
                }
                for v in self.vertices
            ],
            "norm_preservation": None if self.norm_preservation is None else {
                "max_deviation": self.norm_preservation.max_deviation,
                "pair_count": self.norm_preservation.pair_count,
            },
        }


def cross_group_residual(family: VertexFamily) -> float:
    """Max Frobenius norm of a commutator between operators of different groups."""
    ops, gidx = family.stacked()
    worst = 0.0
    k = ops.shape[0]
    for p in range(k):
        for q in range(p + 1, k):
            if gidx[p] == gidx[q]:
                continue
            c = ops[p] @ ops[q] - ops[q] @ ops[p]
            worst = max(worst, float(np.linalg.norm(c)))
    return worst


# ---------------------------------------------------------------------------
# Penalty descent (mu-continuation, batched over restarts).  Also driven by
# the oracle module as its multi-restart nearest-commuting reference.
# ---------------------------------------------------------------------------


def penalty_descent(family: VertexFamily, rng: np.random.Generator, *,
                    restarts: int, mu0: float = 1.0, mu_rounds: int = 22,
                    inner_steps: int = 50, noise: float = 0.05,
                    gtol: float = 1e-9) -> tuple[list[np.ndarray], int]:
    """Minimize sum ||x - A||_F^2 + mu * sum ||[x_p, x_q]||_F^2 over cross pairs.

    Returns the final stacked operator sets, one (K, d, d) array per
    restart (restart 0 starts exactly at the input), and the number of
    gradient steps taken.
    """
    a, gidx = family.stacked()
    k = a.shape[0]
    if k == 0:
        return [a.copy() for _ in range(restarts)], 0
    p1, p2 = [], []
    for p in range(k):
        for q in range(p + 1, k):
            if gidx[p] != gidx[q]:
                p1.append(p)
                p2.append(q)
    if not p1:
        return [a.copy() for _ in range(restarts)], 0
    p1 = np.asarray(p1)
    p2 = np.asarray(p2)
    npairs = len(p1)
    s1 = np.zeros((k, npairs))
    s2 = np.zeros((k, npairs))
    s1[p1, np.arange(npairs)] = 1.0
    s2[p2, np.arange(npairs)] = 1.0

    scale = max(float(np.max(np.linalg.norm(a.reshape(k, -1), axis=1))), 1e-12)
    r = max(1, restarts)
    x = np.repeat(a[None], r, axis=0)
    if r > 1:
        d = a.shape[1]
        x[1:] += noise * scale * (rng.standard_normal((r - 1, k, d, d))
                                  + 1j * rng.standard_normal((r - 1, k, d, d)))

    def evaluate(y, mu):
        c = y[:, p1] @ y[:, p2] - y[:, p2] @ y[:, p1]
        diff = y - a[None]
        obj = (np.einsum("rkij,rkij->r", diff.conj(), diff).real
               + mu * np.einsum("rpij,rpij->r", c.conj(), c).real)
        return obj, c

    iterations = 0
    for rnd in range(mu_rounds):
        mu = mu0 * (2.0 ** rnd)
        step = np.full(r, 0.45 / (1.0 + 4.0 * mu * scale * scale))
        obj, c = evaluate(x, mu)
        for _ in range(inner_steps):
            xq_dag = x[:, p2].conj().transpose(0, 1, 3, 2)
            xp_dag = x[:, p1].conj().transpose(0, 1, 3, 2)
            gp = c @ xq_dag - xq_dag @ c
            gq = xp_dag @ c - c @ xp_dag
            grad = (x - a[None]) + mu * (np.einsum("kp,rpij->rkij", s1, gp)
                                         + np.einsum("kp,rpij->rkij", s2, gq))
            gnorm2 = np.einsum("rkij,rkij->r", grad.conj(), grad).real
            iterations += 1
            if np.all(np.sqrt(gnorm2) < gtol * scale):
                break
            cand = x - step[:, None, None, None] * grad
            obj_c, c_c = evaluate(cand, mu)
            improved = obj_c < obj
            if np.any(improved):
                x[improved] = cand[improved]
                c[improved] = c_c[improved]
                obj[improved] = obj_c[improved]
            step = np.where(improved, step * 1.15, step * 0.4)
            if np.all(step < 1e-18):
                break
    return [x[i] for i in range(r)], iterations


# ---------------------------------------------------------------------------
# Structure extraction + exact projection
# ---------------------------------------------------------------------------


def _family_from_stack(family: VertexFamily, stack: np.ndarray) -> VertexFamily:
    groups = []
    start = 0
    for g in family.groups:
        n = g.ops.shape[0]
        groups.append(EdgeGroup(g.edge_id, stack[start:start + n].copy()))
        start += n
    return VertexFamily(family.vertex, family.d, groups)


def extract_structure(family: VertexFamily, *, seed: int,
                      cluster_gap: float = 1e-6) -> alg.VertexStructure:
    """Approximate block/factor structure read off a (near-)commuting family.

    Tolerances are relaxed according to the family's measured residual, so
    the same routine serves both exactly commuting inputs and penalty-descent
    references.  The returned isometries are exactly orthonormal, which is
    what makes the subsequent projection exactly commuting.
    """
    eta = cross_group_residual(family)
    ops, _ = family.stacked()
    scale = max(float(np.max(np.linalg.norm(ops.reshape(ops.shape[0], -1), axis=1)))
                if ops.shape[0] else 1.0, 1e-12)
    rel = eta / scale
    closure_tol = float(np.clip(100 * rel, 1e-9, 0.2))
    center_tol = float(np.clip(30 * rel, 1e-8, 0.2))
    span_tol = float(np.clip(10 * rel, 1e-10, 0.1))
    trivial_tol = float(np.clip(30 * eta, 1e-8, 0.3))
    gap = float(np.clip(30 * eta, cluster_gap, 0.05))

    algebras = []
    ids = []
    for g in family.groups:
        if g.ops.shape[0] == 0:
            continue
        algebras.append(alg.close_algebra(g.ops, tol=closure_tol))
        ids.append(g.edge_id)
    if not algebras:
        return alg.VertexStructure(vertex=family.vertex, d=family.d, blocks=[
            alg.BlockStructure(isometry=np.eye(family.d, dtype=complex),
                               factor_dims=[(g.edge_id, 1) for g in family.groups],
                               residual_dim=family.d)])
    structure = alg.block_decompose_vertex(
        algebras, edge_ids=ids, vertex=family.vertex, seed=seed,
        premise_tol=max(3 * eta, 1e-8), cluster_gap=gap,
        recon_tol=max(10 * eta, 1e-8), closure_tol=closure_tol,
        center_tol=center_tol, trivial_tol=trivial_tol, span_tol=span_tol,
        validate=False)
    # groups that were empty still need a slot entry for bookkeeping
    present = {e for e, _ in structure.blocks[0].factor_dims} if structure.blocks else set()
    for g in family.groups:
        if g.edge_id not in present:
            for b in structure.blocks:
                b.factor_dims.append((g.edge_id, 1))
    return structure


def _project_family(family: VertexFamily, structure: alg.VertexStructure) -> VertexFamily:
    groups = []
    for g in family.groups:
        if g.ops.shape[0] == 0:
            groups.append(EdgeGroup(g.edge_id, g.ops.copy()))
            continue
        proj = np.stack([alg.project_to_edge_slot(structure, g.edge_id, op)
                         for op in g.ops])
        groups.append(EdgeGroup(g.edge_id, proj))
    return VertexFamily(family.vertex, family.d, groups)


def _restore_group(projected: np.ndarray, original: np.ndarray,
                   slot_basis: np.ndarray | None, norm_preserving: bool) -> np.ndarray:
    """Gram-Schmidt in the original term order; rescale to original norms.

    When a direction collapses under projection, a replacement direction is
    taken from the structure subspace orthogonal complement of what has
    been used so far; if the subspace is exhausted the restoration is
    infeasible and a SolverError is raised.
    """
    k = projected.shape[0]
    out = np.zeros_like(projected)
    kept: list[np.ndarray] = []  # orthonormal directions used so far
    for i in range(k):
        lam = float(np.linalg.norm(original[i]))
        v = projected[i].copy()
        for _ in range(2):
            for u in kept:
                v -= np.vdot(u, v) * u
        nv = float(np.linalg.norm(v))
        if nv <= 1e-8 * max(lam, 1e-300):
            if not norm_preserving or lam == 0.0:
                out[i] = 0.0
                continue
            if slot_basis is None:
                raise SolverError("norm-preserving restoration infeasible: "
                                  "no structure basis available")
            v = _fresh_direction(slot_basis, kept, original[i])
            if v is None:
                raise SolverError(
                    "norm-preserving restoration infeasible: structure subspace "
                    "smaller than the group rank")
            nv = float(np.linalg.norm(v))
        u = v / nv
        kept.append(u)
        out[i] = (lam * u) if norm_preserving else (nv * u)
    return out


def _fresh_direction(slot_basis: np.ndarray, kept: list[np.ndarray],
                     target: np.ndarray) -> np.ndarray | None:
    best = None
    best_overlap = -1.0
    for b in slot_basis:
        v = b.copy()
        for _ in range(2):
            for u in kept:
                v -= np.vdot(u, v) * u
        nv = float(np.linalg.norm(v))
        if nv < 1e-6:
            continue
        v /= nv
        ov = abs(np.vdot(v, target))
        if ov > best_overlap:
            best_overlap = ov
            phase = np.vdot(v, target)
            if abs(phase) > 1e-12:
                v = v * (phase / abs(phase))
            best = v
    return best


def _candidate_from_structure(family: VertexFamily, structure: alg.VertexStructure,
                              config: RoundingConfig) -> tuple[VertexFamily, float, float, float]:
    projected = _project_family(family, structure)
    groups = []
    restore_resid = 0.0
    for g_orig, g_proj in zip(family.groups, projected.groups):
        if g_orig.ops.shape[0] == 0:
            groups.append(EdgeGroup(g_orig.edge_id, g_orig.ops.copy()))
            continue
        basis = alg.edge_slot_basis(structure, g_orig.edge_id)
        restored = _restore_group(g_proj.ops, g_orig.ops, basis, config.norm_preserving)
        if config.norm_preserving:
            lam = np.linalg.norm(g_orig.ops.reshape(g_orig.ops.shape[0], -1), axis=1)
            got = np.linalg.norm(restored.reshape(restored.shape[0], -1), axis=1)
            restore_resid = max(restore_resid, float(np.max(np.abs(got - lam))))
        groups.append(EdgeGroup(g_orig.edge_id, restored))
    rounded = VertexFamily(family.vertex, family.d, groups)
    residual = cross_group_residual(rounded)
    disp = 0.0
    for g_orig, g_new in zip(family.groups, rounded.groups):
        if g_orig.ops.shape[0]:
            diffs = np.linalg.norm(
                (g_orig.ops - g_new.ops).reshape(g_orig.ops.shape[0], -1), axis=1)
            disp = max(disp, float(np.max(diffs)))
    return rounded, residual, disp, restore_resid


def round_vertex(family: VertexFamily,
                 config: RoundingConfig | None = None) -> tuple[VertexFamily, VertexRoundReport]:
    """Exactly commuting replacement for one vertex's edge families.

    Already-commuting input (within ``fixed_point_tol``) is returned
    unchanged.  Otherwise structural extraction is attempted both on the
    input directly and on a penalty-descent reference; the candidate with
    the smaller displacement that meets the residual target wins.
    """
    config = config or RoundingConfig()
    eta0 = cross_group_residual(family)
    if eta0 <= config.fixed_point_tol:
        report = VertexRoundReport(
            vertex=family.vertex, mode="fixed-point", displacement_max=0.0,
            per_term_displacement={g.edge_id: np.zeros(g.ops.shape[0]) for g in family.groups},
            residual_before=eta0, residual_after=eta0, iterations=0,
            block_dims=None, norm_restore_residual=0.0)
        return family, report

    rng = derive_rng(config.seed, "round-vertex", family.vertex)
    candidates = []  # (disp, name, rounded, residual, restore_resid, block_dims)
    iterations = 0

    def try_structure(name: str, source: VertexFamily, seed_tag: int):
        try:
            structure = extract_structure(source, seed=config.seed * 1000 + seed_tag,
                                          cluster_gap=config.cluster_gap)
            rounded, residual, disp, rres = _candidate_from_structure(family, structure, config)
        except (SolverError, PremiseError, alg.StructureError, np.linalg.LinAlgError):
            return
        if residual <= config.tol:
            candidates.append((disp, name, rounded, residual, rres,
                               structure.block_dims))

    if config.mode == "structural":
        try_structure("direct", family, family.vertex * 7 + 1)

    refs, its = penalty_descent(
        family, rng, restarts=config.penalty_restarts, mu0=config.penalty_mu0,
        mu_rounds=config.penalty_rounds, inner_steps=config.penalty_inner_steps,
        noise=config.penalty_noise, gtol=config.penalty_gtol)
    iterations += its
    order = np.argsort([cross_group_residual(_family_from_stack(family, ref))
                        for ref in refs])
    for rank, idx in enumerate(order[:2]):
        try_structure(f"penalty[{idx}]", _family_from_stack(family, refs[idx]),
                      family.vertex * 7 + 100 + rank)

    if not candidates:
        raise SolverError(
            f"vertex {family.vertex}: no commuting replacement reached the "
            f"residual target {config.tol:.1e}", best_residual=eta0)

    candidates.sort(key=lambda c: c[0])
    disp, name, rounded, residual, rres, block_dims = candidates[0]
    per_term = {}
    for g_orig, g_new in zip(family.groups, rounded.groups):
        if g_orig.ops.shape[0]:
            per_term[g_orig.edge_id] = np.linalg.norm(
                (g_orig.ops - g_new.ops).reshape(g_orig.ops.shape[0], -1), axis=1)
        else:
            per_term[g_orig.edge_id] = np.zeros(0)
    report = VertexRoundReport(
        vertex=family.vertex, mode=name, displacement_max=disp,
        per_term_displacement=per_term, residual_before=eta0,
        residual_after=residual, iterations=iterations,
        block_dims=block_dims, norm_restore_residual=rres)
    return rounded, report


# ---------------------------------------------------------------------------
# Hermitization and the full sweep
# ---------------------------------------------------------------------------


def hermitize_terms(terms: list[Operator], *, premise_tol: float = 1e-9,
                    d: int | None = None) -> list[Operator]:
    """Map every term Q to (Q + Q^dagger)/2 after checking the premise that
    both [Q_i, Q_j] and [Q_i^dagger, Q_j] vanish within tolerance for all
    intersecting pairs (the conjugation-closure consequence).
    """
    mats = [t.matrix if isinstance(t, Operator) else np.asarray(t, dtype=complex)
            for t in terms]
    sups = [t.support if isinstance(t, Operator) else None for t in terms]

    def joint(i, j):
        if sups[i] is None or sups[j] is None:
            if mats[i].shape != mats[j].shape:
                return None
            return mats[i], mats[j]
        shared = set(sups[i]) & set(sups[j])
        if not shared:
            return None
        union = tuple(sorted(set(sups[i]) | set(sups[j])))
        dd = d
        if dd is None:
            dd = round(mats[i].shape[0] ** (1.0 / len(sups[i])))
        qi = tensor_embed(mats[i], sups[i], union, dd).matrix
        qj = tensor_embed(mats[j], sups[j], union, dd).matrix
        return qi, qj

    for i in range(len(mats)):
        for j in range(i + 1, len(mats)):
            pair = joint(i, j)
            if pair is None:
                continue
            qi, qj = pair
            plain = float(np.linalg.norm(qi @ qj - qj @ qi))
            daggered = float(np.linalg.norm(qi.conj().T @ qj - qj @ qi.conj().T))
            worst = max(plain, daggered)
            if worst > premise_tol:
                raise PremiseError(
                    f"terms {i} and {j} violate the hermitization premise "
                    f"(residual {worst:.3e} > {premise_tol:.1e}); "
                    "conjugation closure failed upstream")
    return [Operator((m + m.conj().T) / 2, s) for m, s in zip(mats, sups)]


def vertex_family_from_terms(graph, terms, vertex: int) -> tuple[VertexFamily, list]:
    """Schmidt-decompose the incident terms with the pivot at ``vertex``.

    Returns the A-side family and, for reassembly, the list of
    (edge_id, pivot, b_ops).
    """
    groups = []
    parts = []
    for eid in graph.incident(vertex):
        u, _v = graph.edges[eid]
        pivot = "left" if vertex == u else "right"
        sd = schmidt_decompose(terms[eid], pivot=pivot, d=graph.d)
        groups.append(EdgeGroup(eid, sd.a_ops))
        parts.append((eid, pivot, sd.b_ops))
    return VertexFamily(vertex, graph.d, groups), parts


def _reassemble(d: int, pivot: str, a_ops: np.ndarray, b_ops: np.ndarray) -> np.ndarray:
    if a_ops.shape[0] == 0:
        return np.zeros((d * d, d * d), dtype=complex)
    if pivot == "left":
        out = np.einsum("aij,akl->ikjl", a_ops, b_ops)
    else:
        out = np.einsum("aij,akl->ikjl", b_ops, a_ops)
    return out.reshape(d * d, d * d)


def sweep_round(instance: QsatInstance,
                config: RoundingConfig | None = None) -> tuple[QsatInstance, RoundingReport]:
    """Round every vertex in ascending id order and hermitize the result.

    Each edge term is replaced twice (once per endpoint); the report
    carries per-term operator-norm distances and
    eps_report = 2 * max_i ||Q_i - Q_i_hat||.
    """
    config = config or RoundingConfig()
    graph = instance.graph
    current = [t.copy() for t in instance.terms]
    vreports = []
    log = []
    for v in range(graph.n):
        family, parts = vertex_family_from_terms(graph, current, v)
        try:
            rounded, rep = round_vertex(family, config)
        except SolverError as exc:
            raise SolverError(f"sweep failed at vertex {v}: {exc}",
                              best_residual=getattr(exc, "best_residual", None)) from exc
        before = {e: current[e].copy() for e in range(graph.m)}
        by_edge = {g.edge_id: g.ops for g in rounded.groups}
        for eid, pivot, b_ops in parts:
            current[eid] = _reassemble(graph.d, pivot, by_edge[eid], b_ops)
        after = {e: current[e].copy() for e in range(graph.m)}
        log.append(ReplacementRecord(vertex=v, incident=graph.incident(v),
                                     before=before, after=after))
        vreports.append(rep)

    ops = [Operator(current[e], graph.edges[e]) for e in range(graph.m)]
    hermitized = hermitize_terms(ops, premise_tol=config.post_tol, d=graph.d)
    final_terms = [h.matrix for h in hermitized]

    distances = [float(np.linalg.norm(final_terms[e] - instance.terms[e], 2))
                 for e in range(graph.m)]
    eps_report = 2.0 * max(distances) if distances else 0.0

    meta = dict(instance.metadata)
    meta.update({"projective": False, "rounded": True,
                 "epsilon_report": float(eps_report)})
    hat = QsatInstance(graph=graph, terms=final_terms, metadata=meta)

    profile = noncommutativity_profile(hat)
    if profile.max_fro > config.post_tol:
        raise SolverError(
            "rounded instance exceeds the post-hermitization commutator target",
            best_residual=profile.max_fro)

    report = RoundingReport(
        vertices=vreports, eps_report=eps_report,
        per_term_distance_op=distances,
        max_commutator_fro=profile.max_fro,
        max_commutator_op=profile.max,
        replacement_log=log)
    if config.norm_preserving:
        report.norm_preservation = norm_preservation_check(instance, hat, report)
    return hat, report


def norm_preservation_check(instance: QsatInstance, hat: QsatInstance,
                            report: RoundingReport) -> NormPreservationReport:
    """Recompute, for every single-vertex replacement, how much the rounded
    term changed its commutator norms with intersecting terms outside the
    replaced vertex's family.  Report-only; exact norm restoration makes the
    deviations vanish.
    """
    graph = instance.graph
    d = graph.d
    worst = 0.0
    count = 0
    per_vertex: dict[int, float] = {}
    for rec in report.replacement_log:
        v = rec.vertex
        vmax = 0.0
        for eid in rec.incident:
            other = graph.other_end(eid, v)
            for pid in graph.incident(other):
                if pid == eid or v in graph.edges[pid]:
                    continue
                support = tuple(sorted(set(graph.edges[eid]) | set(graph.edges[pid])))
                p = tensor_embed(rec.before[pid], graph.edges[pid], support, d).matrix
                qb = tensor_embed(rec.before[eid], graph.edges[eid], support, d).matrix
                qa = tensor_embed(rec.after[eid], graph.edges[eid], support, d).matrix
                nb = float(np.linalg.norm(qb @ p - p @ qb))
                na = float(np.linalg.norm(qa @ p - p @ qa))
                vmax = max(vmax, abs(na - nb))
                count += 1
        per_vertex[v] = vmax
        worst = max(worst, vmax)
    return NormPreservationReport(max_deviation=worst, pair_count=count,
                                  per_vertex_max=per_vertex)
