"""Structures on a data space and the balance calculus that refines them.

A structure is a complete set of mutually orthogonal projectors summing to
the span of its space.  Tier structures are built on the tier's own objects
and carried up to the observational units by an allocation; decompositions
of the unit space are then refined structure by structure, each refinement
gated by a structure-balance check.

The quantities in play, for a decomposition element P and a structure
element Q (all idempotents on the unit space):

* efficiency factor: the scalar lam with QPQ = lam*Q, when one exists.
  lam is trace(QPQ)/trace(Q); first-order balance holds when the residual
  QPQ - lam*Q vanishes.
* sweep: P onto its overlap with Q, namely (1/lam) PQP, an idempotent
  projecting onto the image of PQ.
* residual: P minus all its sweeps against one structure; what is left of
  P once every partly-confounded source is removed.

Refining every element of a decomposition this way yields the next, finer
decomposition, with each element remembering its lineage for table output.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .projlin import (
    DEFAULT_POLICY,
    EfficiencyValue,
    Projector,
    ProjectorError,
    TolerancePolicy,
    is_zero,
    max_abs,
    mul,
    snap_rational,
)

__all__ = [
    "Structure",
    "AllocationMap",
    "LiftingError",
    "lift",
    "BalanceResult",
    "efficiency",
    "EfficiencyMatrix",
    "Violation",
    "ViolationReport",
    "is_structure_balanced",
    "sweep",
    "residual",
    "LineageEntry",
    "DecompNode",
    "Decomposition",
    "refine",
    "is_compatible",
    "joint",
    "IncompatibilityError",
]


class LiftingError(ValueError):
    """The allocation cannot carry a tier structure onto the unit space."""


class IncompatibilityError(ValueError):
    """Joint refinement requested for non-commuting decompositions."""


class InternalInconsistencyError(RuntimeError):
    """A quantity that must be non-negative or idempotent came out otherwise."""


@dataclass
class Structure:
    """A complete orthogonal set of source projectors on one space."""

    elements: list
    total: Projector
    space_label: str = ""
    notices: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.total.n

    def validate(self, policy: TolerancePolicy = DEFAULT_POLICY) -> None:
        mean_count = 0
        n = self.n
        j = np.full((n, n), 1.0 / n)
        for p in self.elements:
            if p.n != n:
                raise ValueError(f"element {p.label} lives on the wrong space")
            if max_abs(p.matrix - j) <= policy.tol_zero:
                mean_count += 1
        if mean_count != 1:
            raise ValueError(
                f"structure {self.space_label!r} must contain exactly one Mean "
                f"element, found {mean_count}"
            )
        for a, b in itertools.combinations(self.elements, 2):
            gap = max_abs(mul(a.matrix, b.matrix))
            if gap > policy.tol_zero:
                raise ValueError(
                    f"elements {a.label} and {b.label} are not orthogonal "
                    f"(max product entry {gap:.3e})"
                )
        total_df = sum(p.df for p in self.elements)
        if total_df != self.total.df:
            raise ValueError(
                f"structure {self.space_label!r}: element df sum {total_df} "
                f"!= span df {self.total.df}"
            )

    def mean(self) -> Projector:
        n = self.n
        j = np.full((n, n), 1.0 / n)
        for p in self.elements:
            if max_abs(p.matrix - j) <= 1e-9:
                return p
        raise ValueError("structure has no Mean element")


@dataclass
class AllocationMap:
    """Assignment of each row of one space to an object of a tier.

    ``assignment[i]`` is the index into ``objects`` for row i.  The design
    matrix X is the 0/1 indicator (rows x objects); ``replication`` is the
    common column sum when the allocation is equireplicate, else None.
    """

    tier: str
    objects: list
    assignment: np.ndarray
    space_label: str = "units"

    def __post_init__(self) -> None:
        self.assignment = np.asarray(self.assignment, dtype=np.intp)
        if self.assignment.ndim != 1:
            raise ValueError("assignment must be a flat index vector")
        if len(self.objects) == 0:
            raise ValueError("allocation must target at least one object")
        if self.assignment.size and (
            self.assignment.min() < 0 or self.assignment.max() >= len(self.objects)
        ):
            raise ValueError("assignment index out of range")

    @property
    def n_rows(self) -> int:
        return self.assignment.size

    @property
    def design_matrix(self) -> np.ndarray:
        x = np.zeros((self.n_rows, len(self.objects)))
        x[np.arange(self.n_rows), self.assignment] = 1.0
        return x

    @property
    def replication(self) -> int | None:
        counts = np.bincount(self.assignment, minlength=len(self.objects))
        if counts.size and counts.min() == counts.max():
            return int(counts[0])
        return None


def _orth_columns(a: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of the column span of ``a`` (SVD rank cut)."""
    if a.size == 0:
        return np.zeros((a.shape[0], 0))
    u, s, _ = np.linalg.svd(a, full_matrices=False)
    rank = int(np.sum(s > tol * max(a.shape) * (s[0] if s.size else 1.0)))
    return u[:, :rank]


def lift(
    tier_structure: Structure,
    alloc: AllocationMap,
    policy: TolerancePolicy = DEFAULT_POLICY,
) -> Structure:
    """Carry a tier structure up to the allocation's row space.

    Equireplicate allocations conjugate each element: (1/r) X Q X'.  Anything
    else must satisfy Q_i X'X Q_j = 0 for distinct elements, in which case
    each lifted element is the orthogonal projector onto X.Im(Q); a notice
    marks the general route.  Degrees of freedom must survive the trip.
    """
    if len(tier_structure.elements) == 0:
        raise ValueError("cannot lift an empty structure")
    m = tier_structure.n
    if len(alloc.objects) != m:
        raise LiftingError(
            f"allocation targets {len(alloc.objects)} objects but the tier "
            f"structure lives on {m}"
        )
    x = alloc.design_matrix
    notices = []
    r = alloc.replication
    lifted = []
    if r is not None:
        for q in tier_structure.elements:
            mat = mul(mul(x, q.matrix), x.T) / r
            lifted.append(_lifted_projector(mat, q, policy))
        total = mul(mul(x, tier_structure.total.matrix), x.T) / r
    else:
        gram = mul(x.T, x)
        for qa, qb in itertools.combinations(tier_structure.elements, 2):
            gap = max_abs(mul(mul(qa.matrix, gram), qb.matrix))
            if gap > policy.tol_zero:
                raise LiftingError(
                    f"allocation to tier {alloc.tier!r} is not equireplicate and "
                    f"sources {qa.label} / {qb.label} fail the lifting condition "
                    f"(max entry {gap:.3e})"
                )
        notices.append(
            f"tier {alloc.tier!r}: unequal replication; general lifting applied"
        )
        for q in tier_structure.elements:
            basis = _orth_columns(mul(x, q.matrix))
            mat = mul(basis, basis.T)
            lifted.append(_lifted_projector(mat, q, policy))
        total_basis = _orth_columns(
            np.hstack([p.matrix for p in lifted]) if lifted else x
        )
        total = mul(total_basis, total_basis.T)

    out = Structure(
        elements=lifted,
        total=Projector.validated(total, f"{alloc.tier} span", policy),
        space_label=alloc.space_label,
        notices=notices + list(tier_structure.notices),
    )
    out.validate(policy)
    return out


def _lifted_projector(mat: np.ndarray, q: Projector, policy: TolerancePolicy) -> Projector:
    try:
        proj = Projector.validated(mat, q.label, policy)
    except ProjectorError as exc:
        raise LiftingError(f"lift of {q.label} failed: {exc}") from None
    if proj.df != q.df:
        raise LiftingError(
            f"lift of {q.label} changed its df from {q.df} to {proj.df}; "
            "some objects are unreplicated"
        )
    return proj


# --- first-order balance ----------------------------------------------------


@dataclass(frozen=True)
class BalanceResult:
    """Outcome of one (P, Q) first-order balance test.

    ``status`` is one of ``balanced``, ``orthogonal``, ``aliased`` (lam = 1
    with identical images) or ``unbalanced``; unbalanced results carry the
    distinct nonzero eigenvalues of QPQ with multiplicities.
    """

    status: str
    efficiency: EfficiencyValue | None = None
    eigenvalues: tuple = ()
    residual_norm: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status != "unbalanced"

    @property
    def lam(self) -> float:
        return self.efficiency.value if self.efficiency else 0.0


def _cluster_eigenvalues(values: np.ndarray, policy: TolerancePolicy) -> tuple:
    """Distinct nonzero eigenvalues with multiplicities, descending."""
    vals = np.sort(values)[::-1]
    groups: list[list[float]] = []
    for v in vals:
        if abs(v) <= policy.tol_eig:
            continue
        if groups and abs(groups[-1][-1] - v) <= policy.tol_eig:
            groups[-1].append(v)
        else:
            groups.append([v])
    return tuple((float(np.mean(g)), len(g)) for g in groups)


def efficiency(
    p: Projector,
    q: Projector,
    policy: TolerancePolicy = DEFAULT_POLICY,
) -> BalanceResult:
    """Test QPQ = lam*Q and report how P and Q sit relative to each other."""
    if q.df == 0:
        raise ValueError(f"source {q.label} has no degrees of freedom")
    pq = mul(p.matrix, q.matrix)
    qpq = mul(q.matrix, pq)
    return _classify(p, q, qpq, pq, policy)


def sweep(
    p: Projector,
    q: Projector,
    lam: float,
    policy: TolerancePolicy = DEFAULT_POLICY,
    label: str | None = None,
) -> Projector:
    """Projector onto Im(PQ): (1/lam) PQP, defined when balance holds."""
    if lam <= policy.tol_zero:
        raise ValueError(f"sweep of {p.label} by {q.label} needs a nonzero efficiency")
    mat = mul(mul(p.matrix, q.matrix), p.matrix) / lam
    return Projector.validated(mat, label or f"{p.label} ▷ {q.label}", policy)


def residual(
    p: Projector,
    swept: list,
    policy: TolerancePolicy = DEFAULT_POLICY,
    label: str | None = None,
) -> Projector | None:
    """P minus its sweeps against one structure; None when nothing is left."""
    mat = np.array(p.matrix)
    for s in swept:
        mat = mat - s.matrix
    trace = float(np.trace(mat))
    if trace < -1e-6:
        raise InternalInconsistencyError(
            f"residual of {p.label} has negative trace {trace:.3e}"
        )
    if trace < 0.5:
        if max_abs(mat) > 1e-6:
            raise InternalInconsistencyError(
                f"residual of {p.label} has trace {trace:.3e} but entries up to "
                f"{max_abs(mat):.3e}"
            )
        return None
    return Projector.validated(mat, label or f"{p.label} residual", policy)


# --- structure balance of a whole family -------------------------------------


@dataclass(frozen=True)
class Violation:
    kind: str  # "first-order" or "distinctness"
    row: str
    cols: tuple
    norm: float
    eigenvalues: tuple = ()


@dataclass
class ViolationReport:
    structure_label: str
    against_label: str
    violations: list

    def __bool__(self) -> bool:
        return bool(self.violations)

    def summary(self) -> str:
        lines = [
            f"structure {self.structure_label!r} is not structure balanced in "
            f"relation to {self.against_label!r}:"
        ]
        for v in self.violations:
            if v.kind == "first-order":
                eigs = ", ".join(f"{val:.6g} (x{m})" for val, m in v.eigenvalues)
                lines.append(
                    f"  {v.row} vs {v.cols[0]}: QPQ not proportional to Q "
                    f"(residual {v.norm:.3e}; nonzero eigenvalues {eigs})"
                )
            else:
                lines.append(
                    f"  {v.row}: {v.cols[0]} and {v.cols[1]} overlap inside it "
                    f"(max entry {v.norm:.3e})"
                )
        return "\n".join(lines)


@dataclass
class EfficiencyMatrix:
    """Balance results for every (decomposition element, structure element) pair."""

    rows: list  # labels
    cols: list  # labels
    results: dict  # (row_label, col_label) -> BalanceResult

    def value(self, row: str, col: str) -> EfficiencyValue:
        return self.results[(row, col)].efficiency

    def column_sums(self) -> dict:
        out = {}
        for col in self.cols:
            out[col] = sum(self.results[(row, col)].lam for row in self.rows)
        return out

    def validate_column_sums(self, policy: TolerancePolicy = DEFAULT_POLICY) -> None:
        for col, total in self.column_sums().items():
            if abs(total - 1.0) > policy.tol_zero * max(len(self.rows), 1) * 10:
                raise InternalInconsistencyError(
                    f"efficiency factors for {col} sum to {total!r}, not 1"
                )


def is_structure_balanced(
    s: Structure,
    against,
    policy: TolerancePolicy = DEFAULT_POLICY,
):
    """Check structure balance of ``s`` in relation to a decomposition.

    ``against`` is a Decomposition (or Structure) on the same space.  Every
    pair must be first-order balanced or orthogonal, and distinct elements of
    ``s`` must not meet inside any single element of ``against``.  Returns an
    EfficiencyMatrix on success, a ViolationReport on failure.
    """
    rows = _elements_of(against)
    violations = []
    results = {}
    for p in rows:
        pq = {q.label: mul(p.matrix, q.matrix) for q in s.elements}
        for q in s.elements:
            qpq = mul(q.matrix, pq[q.label])
            res = _classify(p, q, qpq, pq[q.label], policy)
            results[(p.label, q.label)] = res
            if not res.ok:
                violations.append(
                    Violation(
                        kind="first-order",
                        row=p.label,
                        cols=(q.label,),
                        norm=res.residual_norm,
                        eigenvalues=res.eigenvalues,
                    )
                )
        for qa, qb in itertools.combinations(s.elements, 2):
            gap = max_abs(mul(qa.matrix, pq[qb.label]))
            if gap > policy.tol_zero:
                violations.append(
                    Violation(
                        kind="distinctness",
                        row=p.label,
                        cols=(qa.label, qb.label),
                        norm=gap,
                    )
                )
    if violations:
        return ViolationReport(
            structure_label=s.space_label or "structure",
            against_label=_label_of(against),
            violations=violations,
        )
    em = EfficiencyMatrix(
        rows=[p.label for p in rows],
        cols=[q.label for q in s.elements],
        results=results,
    )
    em.validate_column_sums(policy)
    return em


def _classify(p, q, qpq, pq, policy) -> BalanceResult:
    lam = float(np.trace(qpq)) / q.df
    if abs(lam) <= policy.tol_zero:
        gap = max_abs(qpq)
        if gap <= policy.tol_idem:
            return BalanceResult(status="orthogonal", efficiency=EfficiencyValue(0.0, (0, 1)))
        # QPQ is positive semidefinite, so a vanishing trace alongside
        # non-vanishing entries signals numerical breakdown, not imbalance
        raise InternalInconsistencyError(
            f"QPQ for ({p.label}, {q.label}) has zero trace but entries up to {gap:.3e}"
        )
    gap = max_abs(qpq - lam * q.matrix)
    if gap <= policy.tol_idem:
        value = snap_rational(lam, policy)
        if 1.0 - lam <= policy.tol_zero:
            value = EfficiencyValue(1.0, (1, 1))
            if p.df == q.df:
                swept = mul(pq, p.matrix)
                if max_abs(swept - p.matrix) <= policy.tol_idem:
                    return BalanceResult(status="aliased", efficiency=value)
        return BalanceResult(status="balanced", efficiency=value, residual_norm=gap)
    eigs = np.linalg.eigvalsh(qpq)
    return BalanceResult(
        status="unbalanced",
        eigenvalues=_cluster_eigenvalues(eigs, policy),
        residual_norm=gap,
    )


def _elements_of(obj) -> list:
    if isinstance(obj, Structure):
        return list(obj.elements)
    if isinstance(obj, Decomposition):
        return [node.projector for node in obj.nodes]
    raise TypeError(f"expected Structure or Decomposition, got {type(obj).__name__}")


def _label_of(obj) -> str:
    if isinstance(obj, Structure):
        return obj.space_label or "structure"
    return obj.label or "decomposition"


# --- decompositions -----------------------------------------------------------


@dataclass(frozen=True)
class LineageEntry:
    """One refinement stage in a node's history.

    ``cells`` holds (tier, source label, df at this stage); the usual entry
    has one cell, a collapsed double-randomization sweep has two (the same
    node shows under both tiers).  Residual entries carry no efficiency.
    """

    op: str  # "sweep" or "residual"
    cells: tuple
    efficiency: EfficiencyValue | None = None


@dataclass(frozen=True)
class DecompNode:
    projector: Projector
    origin_tier: str
    origin_source: str
    origin_df: int
    lineage: tuple = ()

    @property
    def df(self) -> int:
        return self.projector.df

    @property
    def label(self) -> str:
        return self.projector.label


@dataclass
class Decomposition:
    """An ordered orthogonal decomposition of the unit space."""

    nodes: list
    n: int
    label: str = ""

    def validate(self, policy: TolerancePolicy = DEFAULT_POLICY) -> None:
        total_df = sum(node.df for node in self.nodes)
        if total_df != self.n:
            raise ValueError(
                f"decomposition df sum {total_df} != space dimension {self.n}"
            )
        mean_count = 0
        j = np.full((self.n, self.n), 1.0 / self.n)
        for node in self.nodes:
            if max_abs(node.projector.matrix - j) <= policy.tol_zero:
                mean_count += 1
        if mean_count != 1:
            raise ValueError(f"decomposition must have exactly one Mean node, found {mean_count}")
        for a, b in itertools.combinations(self.nodes, 2):
            gap = max_abs(mul(a.projector.matrix, b.projector.matrix))
            if gap > policy.tol_zero:
                raise ValueError(
                    f"nodes {a.label} and {b.label} are not orthogonal "
                    f"(max product entry {gap:.3e})"
                )

    @classmethod
    def from_structure(cls, s: Structure, tier: str) -> "Decomposition":
        nodes = [
            DecompNode(
                projector=p,
                origin_tier=tier,
                origin_source=p.label,
                origin_df=p.df,
                lineage=(),
            )
            for p in s.elements
        ]
        return cls(nodes=nodes, n=s.n, label=f"{tier} structure")


def refine(
    d: Decomposition,
    s: Structure,
    policy: TolerancePolicy = DEFAULT_POLICY,
    tier: str | None = None,
    cells_for: dict | None = None,
):
    """Refine every node of ``d`` by the structure ``s``.

    Returns the refined Decomposition, or the ViolationReport when ``s`` is
    not structure balanced in relation to ``d`` (nothing is refined then).
    Nodes completely orthogonal to ``s`` pass through untouched; a node that
    is partly swept gains a residual child for whatever is left.

    ``cells_for`` optionally maps a structure element's label to the lineage
    cells recorded for sweeps by that element (used when an element carries
    labels from two tiers after a collapsed double randomization).
    """
    tier = tier or s.space_label or "tier"
    check = is_structure_balanced(s, d, policy)
    if isinstance(check, ViolationReport):
        return check
    em: EfficiencyMatrix = check

    new_nodes = []
    for node in d.nodes:
        p = node.projector
        swept_children = []
        for q in s.elements:
            res = em.results[(p.label, q.label)]
            if res.efficiency is None or res.efficiency.is_zero():
                continue
            lam = res.efficiency.value
            if res.status == "aliased":
                # an aliased sweep is the node itself under a new name; keep
                # "Mean" reading as "Mean" instead of "Mean ▷ Mean"
                child_proj = p if q.label == p.label else p.relabel(f"{p.label} ▷ {q.label}")
            else:
                child_proj = sweep(p, q, lam, policy, label=f"{p.label} ▷ {q.label}")
            cells = None
            if cells_for and q.label in cells_for:
                cells = tuple(
                    (cell_tier, cell_label, child_proj.df)
                    for cell_tier, cell_label in cells_for[q.label]
                )
            if cells is None:
                cells = ((tier, q.label, child_proj.df),)
            entry = LineageEntry(op="sweep", cells=cells, efficiency=res.efficiency)
            swept_children.append(
                DecompNode(
                    projector=child_proj,
                    origin_tier=node.origin_tier,
                    origin_source=node.origin_source,
                    origin_df=node.origin_df,
                    lineage=node.lineage + (entry,),
                )
            )
        if not swept_children:
            new_nodes.append(node)
            continue
        new_nodes.extend(swept_children)
        rem = residual(
            p,
            [c.projector for c in swept_children],
            policy,
            label=f"{p.label} ⊢ {tier}",
        )
        if rem is not None:
            entry = LineageEntry(
                op="residual", cells=((tier, "Residual", rem.df),), efficiency=None
            )
            new_nodes.append(
                DecompNode(
                    projector=rem,
                    origin_tier=node.origin_tier,
                    origin_source=node.origin_source,
                    origin_df=node.origin_df,
                    lineage=node.lineage + (entry,),
                )
            )

    out = Decomposition(nodes=new_nodes, n=d.n, label=d.label)
    out.validate(policy)
    return out


def is_compatible(b, c, policy: TolerancePolicy = DEFAULT_POLICY) -> bool:
    """True when every element of ``b`` commutes with every element of ``c``."""
    for pb in _elements_of(b):
        for pc in _elements_of(c):
            gap = max_abs(mul(pb.matrix, pc.matrix) - mul(pc.matrix, pb.matrix))
            if gap > policy.tol_zero:
                return False
    return True


def joint(b, c, policy: TolerancePolicy = DEFAULT_POLICY) -> Decomposition:
    """Common refinement of two compatible decompositions: nonzero products BC."""
    if not is_compatible(b, c, policy):
        raise IncompatibilityError(
            "decompositions do not commute; no joint refinement exists"
        )
    b_nodes = b.nodes if isinstance(b, Decomposition) else Decomposition.from_structure(b, b.space_label).nodes
    c_nodes = c.nodes if isinstance(c, Decomposition) else Decomposition.from_structure(c, c.space_label).nodes
    n = b_nodes[0].projector.n if b_nodes else 0
    nodes = []
    for nb in b_nodes:
        for nc in c_nodes:
            prod = mul(nb.projector.matrix, nc.projector.matrix)
            if is_zero(prod, policy):
                continue
            proj = Projector.validated(
                prod, f"{nb.label} ⊓ {nc.label}", policy
            )
            extra = tuple(
                e for e in nc.lineage if e not in nb.lineage
            )
            nodes.append(
                DecompNode(
                    projector=proj,
                    origin_tier=nb.origin_tier,
                    origin_source=nb.origin_source,
                    origin_df=nb.origin_df,
                    lineage=nb.lineage + extra,
                )
            )
    out = Decomposition(nodes=nodes, n=n, label="joint")
    out.validate(policy)
    return out
