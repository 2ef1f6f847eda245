"""QSAT instances on D-regular qudit graphs.

Generation of commuting seed instances, controlled perturbation away
from commutativity, noncommutativity measurement, and the versioned
document format that ties the CLI stages together.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, GenerationError, SchemaError
from .operators import Operator, operator_norm, tensor_embed
from .seeding import derive_rng

DOCUMENT_VERSION = 1
HERMITICITY_TOL = 1e-10
PROJECTIVITY_TOL = 1e-10


@dataclass
class QuditGraph:
    """D-regular simple graph with a qudit of dimension d on each vertex.

    Edges are stored as sorted vertex pairs in lexicographic order; the
    position in the list is the stable edge id.
    """

    n: int
    d: int
    D: int
    edges: list[tuple[int, int]]

    def __post_init__(self):
        self.edges = [tuple(sorted((int(u), int(v)))) for (u, v) in self.edges]
        self.validate()

    def validate(self):
        if self.n < 1:
            raise SchemaError("vertex count must be positive", "n")
        if self.d < 1:
            raise SchemaError("qudit dimension must be positive", "d")
        if (self.n * self.D) % 2 != 0:
            raise SchemaError(f"n*D = {self.n * self.D} is odd", "edges")
        seen = set()
        degree = [0] * self.n
        for i, (u, v) in enumerate(self.edges):
            if u == v:
                raise SchemaError(f"self-loop at vertex {u}", f"edges[{i}]")
            if not (0 <= u < self.n and 0 <= v < self.n):
                raise SchemaError(f"vertex id out of range in ({u},{v})", f"edges[{i}]")
            if (u, v) in seen:
                raise SchemaError(f"duplicate edge ({u},{v})", f"edges[{i}]")
            seen.add((u, v))
            degree[u] += 1
            degree[v] += 1
        for v, deg in enumerate(degree):
            if deg != self.D:
                raise SchemaError(
                    f"vertex {v} has degree {deg}, expected D={self.D}", "edges")

    @property
    def m(self) -> int:
        return len(self.edges)

    def incident(self, v: int) -> list[int]:
        return [i for i, e in enumerate(self.edges) if v in e]

    def other_end(self, edge_id: int, v: int) -> int:
        u, w = self.edges[edge_id]
        return w if v == u else u


@dataclass
class QsatInstance:
    """H = sum of one 2-local term per edge, plus generation metadata."""

    graph: QuditGraph
    terms: list[np.ndarray]  # one (d^2, d^2) matrix per edge, by edge id
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        d2 = self.graph.d ** 2
        self.terms = [np.asarray(t, dtype=complex) for t in self.terms]
        if len(self.terms) != self.graph.m:
            raise SchemaError(
                f"expected {self.graph.m} terms, got {len(self.terms)}", "terms")
        for i, t in enumerate(self.terms):
            if t.shape != (d2, d2):
                raise SchemaError(f"term must be {d2}x{d2}, got {t.shape}", f"terms[{i}]")

    @property
    def m(self) -> int:
        return self.graph.m

    def term_operator(self, edge_id: int) -> Operator:
        return Operator(self.terms[edge_id], self.graph.edges[edge_id])

    def validate(self):
        """Hermiticity of every term; projectivity when flagged."""
        projective = bool(self.metadata.get("projective", False))
        for i, t in enumerate(self.terms):
            herm = float(np.linalg.norm(t - t.conj().T))
            if herm > HERMITICITY_TOL:
                raise SchemaError(
                    f"term on edge {i} is not Hermitian (residual {herm:.3e})",
                    f"terms[{i}]")
            if projective:
                proj = float(np.linalg.norm(t @ t - t))
                if proj > PROJECTIVITY_TOL:
                    raise SchemaError(
                        f"term on edge {i} flagged projective but Q^2 != Q "
                        f"(residual {proj:.3e})", f"terms[{i}]")


def generate_regular_graph(n: int, D: int, seed: int, *, d: int = 2,
                           max_attempts: int = 5000) -> QuditGraph:
    """D-regular simple graph via the pairing model with rejection.

    Deterministic per seed; raises GenerationError when n*D is odd,
    D >= n, or the rejection budget runs out.
    """
    if D < 1 or n < 2:
        raise GenerationError(f"need n >= 2 and D >= 1, got n={n}, D={D}")
    if (n * D) % 2 != 0:
        raise GenerationError(f"n*D = {n * D} is odd; no D-regular graph exists")
    if D >= n:
        raise GenerationError(f"D={D} >= n={n}; no simple D-regular graph exists")
    rng = derive_rng(seed, "regular-graph", n, D)
    stubs = np.repeat(np.arange(n), D)
    for _ in range(max_attempts):
        perm = rng.permutation(stubs)
        pairs = [tuple(sorted((int(perm[2 * i]), int(perm[2 * i + 1]))))
                 for i in range(len(stubs) // 2)]
        if any(u == v for u, v in pairs):
            continue
        if len(set(pairs)) != len(pairs):
            continue
        return QuditGraph(n=n, d=d, D=D, edges=sorted(pairs))
    raise GenerationError(
        f"pairing model rejected {max_attempts} samples for n={n}, D={D}")


# ---------------------------------------------------------------------------
# Commuting instance generator
#
# Each vertex space C^d splits into two blocks of dims (d//2, d-d//2),
# scrambled by a random vertex-local unitary.  Within each block exactly
# one incident edge is "hosted": its tensor factor is the whole block,
# every other edge acts as a scalar there.  Edge terms are direct sums
# over block sectors of projections on the hosted factors, which makes
# all terms at a vertex commute exactly.  For d = 2 both blocks are
# one-dimensional, so the instances are classical (diagonal up to the
# vertex scrambles); d >= 4 gives genuinely non-classical instances.
# ---------------------------------------------------------------------------


def _random_unitary(rng: np.random.Generator, d: int) -> np.ndarray:
    g = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    q, r = np.linalg.qr(g)
    return q * (np.diag(r) / np.abs(np.diag(r)))


def _random_projection(rng: np.random.Generator, dim: int, rank: int) -> np.ndarray:
    if rank <= 0:
        return np.zeros((dim, dim), dtype=complex)
    if rank >= dim:
        return np.eye(dim, dtype=complex)
    g = rng.standard_normal((dim, rank)) + 1j * rng.standard_normal((dim, rank))
    q, _ = np.linalg.qr(g)
    p = q @ q.conj().T
    return (p + p.conj().T) / 2


def generate_commuting_instance(graph: QuditGraph, seed: int,
                                satisfiable: bool = True) -> QsatInstance:
    """Exactly commuting projective instance; ground energy 0 when satisfiable."""
    d = graph.d
    if d < 2:
        raise GenerationError(f"qudit dimension d={d} too small for the block structure")
    rng = derive_rng(seed, "commuting-instance", graph.n, graph.D, d)
    block_dims = (d // 2, d - d // 2)

    scramble = [_random_unitary(rng, d) for _ in range(graph.n)]
    host = []          # host[v][b] = edge id whose factor is block b of vertex v
    for v in range(graph.n):
        inc = graph.incident(v)
        perm = rng.permutation(len(inc))
        host.append((inc[perm[0]], inc[perm[1 % len(inc)]]))
    designated = [int(rng.integers(0, 2)) for _ in range(graph.n)]

    offsets = (0, block_dims[0])
    isometries = []    # isometries[v][b]: (d, block_dim) map into C^d
    for v in range(graph.n):
        per_block = []
        for b in range(2):
            e = np.zeros((d, block_dims[b]), dtype=complex)
            e[offsets[b]:offsets[b] + block_dims[b], :] = np.eye(block_dims[b])
            per_block.append(scramble[v] @ e)
        isometries.append(per_block)

    terms = []
    for eid, (u, v) in enumerate(graph.edges):
        d2 = d * d
        term = np.zeros((d2, d2), dtype=complex)
        for bu in range(2):
            for bv in range(2):
                mu, mv = block_dims[bu], block_dims[bv]
                fu = mu if host[u][bu] == eid else 1
                fv = mv if host[v][bv] == eid else 1
                acting = fu * fv
                is_designated = (bu == designated[u] and bv == designated[v])
                if acting == 1:
                    if is_designated and satisfiable:
                        c = 0.0
                    else:
                        c = float(rng.integers(0, 2))
                    sector = c * np.eye(mu * mv, dtype=complex)
                else:
                    if is_designated and satisfiable:
                        rank = int(rng.integers(1, acting))
                    else:
                        rank = int(rng.integers(1, acting + 1))
                    q = _random_projection(rng, acting, rank)
                    if fu > 1 and fv > 1:
                        sector = q
                    elif fu > 1:
                        sector = np.kron(q, np.eye(mv, dtype=complex))
                    else:
                        sector = np.kron(np.eye(mu, dtype=complex), q)
                w = np.kron(isometries[u][bu], isometries[v][bv])
                term += w @ sector @ w.conj().T
        term = (term + term.conj().T) / 2
        terms.append(term)

    meta = {
        "kind": "commuting",
        "seed": int(seed),
        "delta_declared": 0.0,
        "delta_actual": 0.0,
        "projective": True,
        "satisfiable": bool(satisfiable),
        "designated_blocks": [int(b) for b in designated],
    }
    return QsatInstance(graph=graph, terms=terms, metadata=meta)


def generate_diagonal_no_instance(n: int, seed: int, *, d: int = 2,
                                  min_energy: int = 2,
                                  max_tries: int = 500) -> QsatInstance:
    """Diagonal (classical) cycle instance with ground energy >= min_energy.

    Terms are random diagonal 0/1 projections on the edges of the n-cycle;
    candidates are enumerated over all d^n classical assignments until the
    minimum number of violated edges reaches the target.
    """
    if n < 3:
        raise GenerationError("cycle instances need n >= 3")
    edges = sorted(tuple(sorted((i, (i + 1) % n))) for i in range(n))
    graph = QuditGraph(n=n, d=d, D=2, edges=edges)
    rng = derive_rng(seed, "diagonal-no", n, d)

    assignments = np.stack(np.meshgrid(*([np.arange(d)] * n), indexing="ij"),
                           axis=-1).reshape(-1, n)
    for _ in range(max_tries):
        diags = []
        for _e in range(graph.m):
            rank = int(rng.integers(1, d * d))
            pattern = np.zeros(d * d)
            pattern[rng.choice(d * d, size=rank, replace=False)] = 1.0
            diags.append(pattern)
        energy = np.zeros(len(assignments))
        for eid, (u, v) in enumerate(graph.edges):
            idx = assignments[:, u] * d + assignments[:, v]
            energy += diags[eid][idx]
        ground = float(energy.min())
        if ground >= min_energy:
            terms = [np.diag(p).astype(complex) for p in diags]
            meta = {
                "kind": "diagonal-no",
                "seed": int(seed),
                "delta_declared": 0.0,
                "delta_actual": 0.0,
                "projective": True,
                "satisfiable": False,
                "classical_min_energy": ground,
            }
            return QsatInstance(graph=graph, terms=terms, metadata=meta)
    raise GenerationError(
        f"no diagonal instance with ground energy >= {min_energy} in {max_tries} tries")


# ---------------------------------------------------------------------------
# Noncommutativity measurement and perturbation
# ---------------------------------------------------------------------------


@dataclass
class PairNoncommutativity:
    edge_i: int
    edge_j: int
    shared_vertex: int
    op_norm: float
    fro_norm: float


@dataclass
class NoncommutativityProfile:
    """Commutator norms for every pair of edge terms sharing a vertex."""

    pairs: list[PairNoncommutativity]

    @property
    def max(self) -> float:
        return max((p.op_norm for p in self.pairs), default=0.0)

    @property
    def mean(self) -> float:
        return float(np.mean([p.op_norm for p in self.pairs])) if self.pairs else 0.0

    @property
    def max_fro(self) -> float:
        return max((p.fro_norm for p in self.pairs), default=0.0)

    @property
    def mean_fro(self) -> float:
        return float(np.mean([p.fro_norm for p in self.pairs])) if self.pairs else 0.0


def _intersecting_pairs(graph: QuditGraph) -> list[tuple[int, int, int]]:
    out = []
    for v in range(graph.n):
        inc = graph.incident(v)
        for a in range(len(inc)):
            for b in range(a + 1, len(inc)):
                out.append((inc[a], inc[b], v))
    return sorted(out)


def _pair_commutator_norms(graph: QuditGraph, terms, i: int, j: int) -> tuple[float, float]:
    d = graph.d
    support = tuple(sorted(set(graph.edges[i]) | set(graph.edges[j])))
    qi = tensor_embed(terms[i], graph.edges[i], support, d).matrix
    qj = tensor_embed(terms[j], graph.edges[j], support, d).matrix
    c = qi @ qj - qj @ qi
    return float(np.linalg.norm(c, 2)), float(np.linalg.norm(c))


def noncommutativity_profile(instance: QsatInstance) -> NoncommutativityProfile:
    """Both commutator norms for every intersecting edge pair.

    Pairs with disjoint supports commute identically and are excluded.
    """
    graph = instance.graph
    pairs = []
    for i, j, v in _intersecting_pairs(graph):
        op, fro = _pair_commutator_norms(graph, instance.terms, i, j)
        pairs.append(PairNoncommutativity(i, j, v, op, fro))
    return NoncommutativityProfile(pairs)


def _max_pairwise_commutator(graph: QuditGraph, terms) -> float:
    worst = 0.0
    for i, j, _v in _intersecting_pairs(graph):
        op, _ = _pair_commutator_norms(graph, terms, i, j)
        worst = max(worst, op)
    return worst


def perturb_instance(instance: QsatInstance, delta: float, seed: int) -> QsatInstance:
    """Conjugate every term by a two-local product unitary exp(i*theta*K).

    K = K_u (x) I + I (x) K_v with random Hermitian single-qudit parts,
    normalized to operator norm 1; theta is calibrated by bisection so the
    measured max pairwise commutator lands in [0.9*delta, delta] (or below
    when unreachable).  Conjugation keeps every term an exact projection,
    and the product form keeps each term's operator Schmidt coefficients
    unchanged, so norm-preserving rounding stays attainable downstream.
    """
    if delta < 0:
        raise GenerationError(f"delta must be nonnegative, got {delta}")
    if delta > 2:
        raise GenerationError(f"delta must be <= 2, got {delta}")
    if not instance.metadata.get("projective", False):
        raise GenerationError("perturb_instance requires projective terms")
    if delta == 0:
        return QsatInstance(graph=instance.graph,
                            terms=[t.copy() for t in instance.terms],
                            metadata=dict(instance.metadata))

    graph = instance.graph
    d = graph.d
    rng = derive_rng(seed, "perturbation", graph.n, graph.m)
    gens = []
    for _ in range(graph.m):
        ku = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
        kv = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
        ku = (ku + ku.conj().T) / 2
        kv = (kv + kv.conj().T) / 2
        wu, pu = np.linalg.eigh(ku)
        wv, pv = np.linalg.eigh(kv)
        scale = float(np.abs(wu[:, None] + wv[None, :]).max())
        gens.append((wu / scale, pu, wv / scale, pv))

    def terms_at(theta: float) -> list[np.ndarray]:
        out = []
        for t, (wu, pu, wv, pv) in zip(instance.terms, gens):
            uu = (pu * np.exp(1j * theta * wu)) @ pu.conj().T
            uv = (pv * np.exp(1j * theta * wv)) @ pv.conj().T
            u = np.kron(uu, uv)
            q = u @ t @ u.conj().T
            out.append((q + q.conj().T) / 2)
        return out

    base = _max_pairwise_commutator(graph, instance.terms)
    if base > delta:
        raise GenerationError(
            f"input already has max commutator {base:.3e} > delta={delta}")
    if base >= 0.9 * delta:
        theta = 0.0
    else:
        theta_max = np.pi
        hi = max(delta, 1e-3)
        while hi < theta_max and _max_pairwise_commutator(graph, terms_at(hi)) < delta:
            hi *= 2
        hi = min(hi, theta_max)
        g_hi = _max_pairwise_commutator(graph, terms_at(hi))
        if g_hi < 0.9 * delta:
            theta = hi  # unreachable target; keep the largest admissible angle
        else:
            lo = 0.0
            theta = None
            for _ in range(80):
                mid = (lo + hi) / 2
                g = _max_pairwise_commutator(graph, terms_at(mid))
                if g > delta:
                    hi = mid
                elif g < 0.9 * delta:
                    lo = mid
                else:
                    theta = mid
                    break
            if theta is None:
                theta = lo

    new_terms = terms_at(theta) if theta > 0 else [t.copy() for t in instance.terms]
    actual = _max_pairwise_commutator(graph, new_terms)
    meta = dict(instance.metadata)
    meta.update({
        "delta_declared": float(delta),
        "delta_actual": float(actual),
        "perturbation_seed": int(seed),
        "perturbation_theta": float(theta),
    })
    return QsatInstance(graph=graph, terms=new_terms, metadata=meta)


# ---------------------------------------------------------------------------
# Versioned document format (the contract between CLI stages)
# ---------------------------------------------------------------------------


def _matrix_to_json(m: np.ndarray) -> list[list[float]]:
    flat = np.asarray(m, dtype=complex).ravel()
    return [[float(z.real), float(z.imag)] for z in flat]


def _matrix_from_json(data, dim: int, path: str) -> np.ndarray:
    if not isinstance(data, list) or len(data) != dim * dim:
        raise SchemaError(f"matrix must have {dim * dim} [re, im] entries", path)
    try:
        flat = np.array([complex(re, im) for re, im in data], dtype=complex)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"malformed [re, im] entry ({exc})", path) from None
    return flat.reshape(dim, dim)


def _jsonify(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def canonical_json(doc: dict) -> str:
    return json.dumps(_jsonify(doc), sort_keys=True, separators=(",", ":")) + "\n"


def serialize_instance(instance: QsatInstance) -> str:
    doc = {
        "version": DOCUMENT_VERSION,
        "kind": "qsat_instance",
        "n": instance.graph.n,
        "d": instance.graph.d,
        "D": instance.graph.D,
        "edges": [[u, v] for u, v in instance.graph.edges],
        "terms": [{"edge_id": i, "matrix": _matrix_to_json(t)}
                  for i, t in enumerate(instance.terms)],
        "metadata": instance.metadata,
    }
    return canonical_json(doc)


def deserialize_instance(text: str) -> QsatInstance:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError("document must be a JSON object")
    if doc.get("version") != DOCUMENT_VERSION:
        raise SchemaError(f"unsupported version {doc.get('version')!r}", "version")
    if doc.get("kind") != "qsat_instance":
        raise SchemaError(f"expected kind 'qsat_instance', got {doc.get('kind')!r}", "kind")
    for key in ("n", "d", "D", "edges", "terms"):
        if key not in doc:
            raise SchemaError("missing field", key)
    for key in ("n", "d", "D"):
        if not isinstance(doc[key], int):
            raise SchemaError(f"must be an integer, got {doc[key]!r}", key)
    edges = []
    for i, e in enumerate(doc["edges"]):
        if (not isinstance(e, list)) or len(e) != 2:
            raise SchemaError("edge must be a pair of vertex ids", f"edges[{i}]")
        edges.append((int(e[0]), int(e[1])))
    graph = QuditGraph(n=doc["n"], d=doc["d"], D=doc["D"], edges=edges)
    if sorted(graph.edges) != graph.edges:
        raise SchemaError("edges must be sorted lexicographically", "edges")
    d2 = doc["d"] ** 2
    terms: list[np.ndarray | None] = [None] * graph.m
    if not isinstance(doc["terms"], list) or len(doc["terms"]) != graph.m:
        raise SchemaError(f"expected {graph.m} terms", "terms")
    for i, entry in enumerate(doc["terms"]):
        if not isinstance(entry, dict) or "edge_id" not in entry or "matrix" not in entry:
            raise SchemaError("term entry needs edge_id and matrix", f"terms[{i}]")
        eid = entry["edge_id"]
        if not isinstance(eid, int) or not (0 <= eid < graph.m):
            raise SchemaError(f"edge_id {eid!r} out of range", f"terms[{i}].edge_id")
        if terms[eid] is not None:
            raise SchemaError(f"duplicate term for edge {eid}", f"terms[{i}].edge_id")
        terms[eid] = _matrix_from_json(entry["matrix"], d2, f"terms[{i}].matrix")
    metadata = doc.get("metadata", {})
    if not isinstance(metadata, dict):
        raise SchemaError("metadata must be an object", "metadata")
    inst = QsatInstance(graph=graph, terms=terms, metadata=metadata)
    inst.validate()
    return inst
