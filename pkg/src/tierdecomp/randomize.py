"""Randomization steps: per-kind coherence checks and the build loop.

Each step carries one tier's structure onto the observational units and
refines the running decomposition, gated by a structure-balance check.
The step kind decides which extra conditions are verified first:

* ``simple`` / ``composed`` / ``randomized_inclusive`` /
  ``unrandomized_inclusive``: plain gated refinement.  Inclusive steps need
  no special mechanics here because declared pseudofactors already sit in
  the tier's poset, and a chain of composed randomizations is handled by
  processing each step once its target tier has been incorporated.
* ``independent``: steps come in pairs aimed at the same tier.  After the
  first refinement, the adjusted-orthogonality conditions are verified for
  every non-Mean element of the prior decomposition; the three equivalent
  formulations are all evaluated and must agree.  Independence itself is a
  property of the randomization procedure, not of one outcome, so what is
  checked (and all that can be checked) is its algebraic footprint.
* ``coincident``: paired like independent steps.  When the special
  condition holds for the declared order (or the swapped one), refinement
  proceeds in that order; when only the general condition holds, the joint
  decomposition of the two one-sided refinements is emitted with a notice.
* ``double``: one tier randomized to two others at once.  The structure on
  the intermediate tier is collapsed onto the lifted from-tier structure
  (element by element, sizes equal), and the collapsed structure refines
  the decomposition from the right.

Any balance or condition failure aborts the build with an incoherence
report naming the step, the clashing sources, and the offending spectra.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .projlin import DEFAULT_POLICY, Projector, TolerancePolicy, max_abs, mul
from .structure import (
    AllocationMap,
    BalanceResult,
    Decomposition,
    EfficiencyMatrix,
    Structure,
    ViolationReport,
    efficiency,
    is_compatible,
    is_structure_balanced,
    joint,
    lift,
    refine,
)

__all__ = [
    "RandomizationStep",
    "STEP_KINDS",
    "ConditionReport",
    "CoincidentReport",
    "check_adjusted_orthogonality",
    "check_coincident",
    "check_double",
    "IncoherenceItem",
    "IncoherenceReport",
    "IncoherenceError",
    "BuildError",
    "BuildResult",
    "build_decomposition",
    "diagnose_incoherence",
]

STEP_KINDS = (
    "simple",
    "composed",
    "randomized_inclusive",
    "unrandomized_inclusive",
    "independent",
    "coincident",
    "double",
)

_PAIRED_KINDS = ("independent", "coincident")


@dataclass(frozen=True)
class RandomizationStep:
    kind: str
    from_tier: str
    to_tiers: tuple

    def __post_init__(self) -> None:
        if self.kind not in STEP_KINDS:
            raise ValueError(f"unknown randomization kind {self.kind!r}")
        want = 2 if self.kind == "double" else 1
        if len(self.to_tiers) != want:
            raise ValueError(
                f"{self.kind} step must name {want} target tier(s), "
                f"got {len(self.to_tiers)}"
            )

    def describe(self) -> str:
        return f"{self.from_tier} -> {','.join(self.to_tiers)} ({self.kind})"


@dataclass
class ConditionReport:
    condition: str
    holds: bool
    witnesses: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def summary(self) -> str:
        state = "holds" if self.holds else "FAILS"
        text = f"{self.condition}: {state}"
        for w in self.witnesses:
            text += f"\n  {w}"
        return text


@dataclass
class CoincidentReport:
    general: ConditionReport
    special_as_given: ConditionReport
    special_swapped: ConditionReport
    route: str = ""  # filled by the build: "left-to-right", "swapped", "joint"


class BuildError(RuntimeError):
    """The step plan cannot be executed (dangling target, missing partner...)."""


@dataclass(frozen=True)
class IncoherenceItem:
    step: str
    kind: str  # "first-order", "distinctness", "adjusted-orthogonality", "coincident", "double"
    node: str
    sources: tuple
    norm: float
    eigenvalues: tuple = ()
    destroyed_tier: str = ""
    suggestion: str = ""


@dataclass
class IncoherenceReport:
    items: list = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.items)

    def summary(self) -> str:
        if not self.items:
            return "no incoherence detected"
        lines = ["randomizations are incoherent:"]
        for it in self.items:
            line = f"  step {it.step}: {it.node} vs {' & '.join(it.sources)} [{it.kind}]"
            if it.eigenvalues:
                eigs = ", ".join(f"{v:.6g} (x{m})" for v, m in it.eigenvalues)
                line += f"; QPQ eigenvalues {eigs}"
            if it.destroyed_tier:
                line += f"; destroys part of the {it.destroyed_tier} decomposition"
            if it.suggestion:
                line += f"; suggestion: {it.suggestion}"
            lines.append(line)
        return "\n".join(lines)


class IncoherenceError(RuntimeError):
    def __init__(self, report: IncoherenceReport):
        super().__init__(report.summary())
        self.report = report


@dataclass
class BuildResult:
    decomposition: Decomposition
    diagnostics: list
    reports: list


def _sweep_equals(p: Projector, q: Projector, lam: float, policy: TolerancePolicy) -> bool:
    """Does P ▷ Q reproduce P itself?"""
    if p.df != q.df:
        return False
    swept = mul(mul(p.matrix, q.matrix), p.matrix) / lam
    return max_abs(swept - p.matrix) <= policy.tol_idem


def check_adjusted_orthogonality(
    p: Projector,
    qs: Structure,
    rs: Structure,
    policy: TolerancePolicy = DEFAULT_POLICY,
) -> ConditionReport:
    """Verify the three equivalent adjusted-orthogonality conditions inside P.

    (i) every sweep of P by a Q is orthogonal to the whole of rs,
    (ii) Q P R = 0 for every pair, and (iii) I_Q P I_R = 0.  They are
    provably equivalent, so the three verdicts must agree; disagreement can
    only mean numerical breakdown and is raised as such.
    """
    witnesses = []

    cond_i = True
    for q in qs.elements:
        res = efficiency(p, q, policy)
        if res.efficiency is None or res.efficiency.is_zero():
            continue
        if res.status == "unbalanced":
            cond_i = False
            witnesses.append(f"{p.label} is not balanced against {q.label}")
            continue
        swept = mul(mul(p.matrix, q.matrix), p.matrix) / res.lam
        gap = max_abs(mul(swept, rs.total.matrix))
        if gap > policy.tol_zero:
            cond_i = False
            witnesses.append(
                f"({p.label} ▷ {q.label}) meets the {rs.space_label} span "
                f"(max entry {gap:.3e})"
            )

    cond_ii = True
    for q in qs.elements:
        qp = mul(q.matrix, p.matrix)
        for r in rs.elements:
            gap = max_abs(mul(qp, r.matrix))
            if gap > policy.tol_zero:
                cond_ii = False
                witnesses.append(
                    f"{q.label} . {p.label} . {r.label} != 0 (max entry {gap:.3e})"
                )

    gap_iii = max_abs(mul(mul(qs.total.matrix, p.matrix), rs.total.matrix))
    cond_iii = gap_iii <= policy.tol_zero
    if not cond_iii:
        witnesses.append(f"I_Q . {p.label} . I_R != 0 (max entry {gap_iii:.3e})")

    if not (cond_i == cond_ii == cond_iii):
        raise RuntimeError(
            "adjusted-orthogonality formulations disagree for "
            f"{p.label} ({cond_i}/{cond_ii}/{cond_iii}); numerical instability"
        )
    return ConditionReport(
        condition=f"adjusted orthogonality within {p.label}",
        holds=cond_i,
        witnesses=witnesses,
        details={"i": cond_i, "ii": cond_ii, "iii": cond_iii},
    )


def check_coincident(
    against,
    qs: Structure,
    rs: Structure,
    policy: TolerancePolicy = DEFAULT_POLICY,
) -> CoincidentReport:
    """Evaluate the coincident-randomization conditions against ``against``.

    General condition: whenever an element P meets both a Q and an R, one of
    the sweeps must give back P whole.  Special condition (per assignment):
    whenever P meets a Q and the span of the other structure, the Q-sweep
    must give back P whole.  Both structures are assumed structure balanced
    in relation to ``against`` (checked by the caller).
    """
    if isinstance(against, Decomposition):
        ps = [node.projector for node in against.nodes]
    else:
        ps = list(against.elements)

    lam_cache: dict = {}

    def lam_of(p, q):
        key = (id(p), id(q))
        if key not in lam_cache:
            res = efficiency(p, q, policy)
            lam_cache[key] = (res.lam if res.efficiency else 0.0, res.status)
        return lam_cache[key]

    def meets(p, q) -> bool:
        lam, _ = lam_of(p, q)
        return lam > policy.tol_zero

    def full(p, q) -> bool:
        lam, status = lam_of(p, q)
        if lam <= policy.tol_zero or status == "unbalanced":
            return False
        return _sweep_equals(p, q, lam, policy)

    general = ConditionReport(condition="coincident general condition", holds=True)
    for p in ps:
        for q in qs.elements:
            if not meets(p, q):
                continue
            for r in rs.elements:
                if not meets(p, r):
                    continue
                if full(p, q) or full(p, r):
                    general.witnesses.append(
                        f"{p.label}: fully swept by {q.label} or {r.label}"
                    )
                    continue
                general.holds = False
                general.witnesses.append(
                    f"{p.label} meets {q.label} and {r.label} but neither sweep "
                    "returns it whole"
                )

    def special(first: Structure, second: Structure, name: str) -> ConditionReport:
        rep = ConditionReport(condition=name, holds=True)
        span = second.total.matrix
        for p in ps:
            touches_other = max_abs(mul(p.matrix, span)) > policy.tol_zero
            if not touches_other:
                continue
            for q in first.elements:
                if not meets(p, q):
                    continue
                if full(p, q):
                    rep.witnesses.append(f"{p.label} ▷ {q.label} = {p.label}")
                else:
                    rep.holds = False
                    rep.witnesses.append(
                        f"{p.label} meets {q.label} and the {second.space_label} "
                        "span, but the sweep does not return it whole"
                    )
        return rep

    return CoincidentReport(
        general=general,
        special_as_given=special(qs, rs, "coincident special case (as declared)"),
        special_swapped=special(rs, qs, "coincident special case (swapped)"),
    )


def check_double(
    qs: Structure,
    rs: Structure,
    g_alloc: AllocationMap,
    policy: TolerancePolicy = DEFAULT_POLICY,
):
    """Verify that the intermediate structure collapses onto the lifted one.

    ``qs`` lives on the intermediate tier's objects, ``rs`` on the from
    tier's objects, and ``g_alloc`` maps intermediate objects to from-tier
    objects.  Requires equal object counts; then every element of the lifted
    ``rs`` must sit inside exactly one element of ``qs`` and account for all
    of it, i.e. refining ``qs`` by the lifted structure reproduces the lifted
    structure element by element.

    Returns (report, placement) where placement maps each rs element label to
    the label of the qs element it sits in.
    """
    n_inter = qs.n
    n_from = rs.n
    if n_inter != n_from:
        raise BuildError(
            f"double randomization needs equally many objects on both target "
            f"tiers; got {n_inter} vs {n_from}"
        )
    lifted = lift(rs, g_alloc, policy)
    report = ConditionReport(condition="double-randomization collapse", holds=True)
    placement: dict = {}
    for r in lifted.elements:
        homes = []
        for q in qs.elements:
            gap = max_abs(mul(q.matrix, r.matrix) - r.matrix)
            if gap <= policy.tol_idem:
                homes.append(q.label)
        if len(homes) == 1:
            placement[r.label] = homes[0]
            report.witnesses.append(f"{homes[0]} ▷ {r.label} = {r.label}")
        else:
            report.holds = False
            report.witnesses.append(
                f"{r.label} does not sit inside a single intermediate source "
                f"(candidates: {homes or 'none'})"
            )
    if sum(r.df for r in lifted.elements) != sum(q.df for q in qs.elements):
        report.holds = False
        report.witnesses.append(
            "the lifted structure does not exhaust the intermediate tier"
        )
    return report, placement


# --- the build loop ---------------------------------------------------------


def build_decomposition(design) -> BuildResult:
    """Run every randomization step and return the final decomposition.

    ``design`` is a loaded design bundle exposing the unit structure, per-tier
    structures, and allocations (see speccli).  Steps are consumed in declared
    order except that a step whose target tier has not yet contributed waits
    for it.  Raises IncoherenceError as soon as a balance or coherence check
    fails, with the full report attached.
    """
    policy = design.policy
    diagnostics: list = []
    reports: list = []

    units_structure = design.units_structure()
    diagnostics.extend(units_structure.notices)
    d = Decomposition.from_structure(units_structure, design.units_tier)
    d.label = design.name

    pending = list(design.steps)
    incorporated = {design.units_tier}

    while pending:
        step = _next_ready(pending, incorporated)
        if step is None:
            names = ", ".join(s.describe() for s in pending)
            raise BuildError(f"steps can never run (dangling targets): {names}")
        pending.remove(step)

        if step.kind in _PAIRED_KINDS:
            partner = _find_partner(step, pending)
            if partner is None:
                raise BuildError(
                    f"{step.kind} step {step.describe()} has no partner step "
                    "aimed at the same tier"
                )
            pending.remove(partner)
            if step.kind == "independent":
                d = _run_independent_pair(design, d, step, partner, diagnostics, reports)
            else:
                d = _run_coincident_pair(design, d, step, partner, diagnostics, reports)
            incorporated |= {step.from_tier, partner.from_tier}
        elif step.kind == "double":
            d = _run_double(design, d, step, diagnostics, reports)
            incorporated |= {step.from_tier, *step.to_tiers}
        else:
            d = _run_plain(design, d, step, diagnostics)
            incorporated.add(step.from_tier)

    d.validate(policy)
    return BuildResult(decomposition=d, diagnostics=diagnostics, reports=reports)


def _next_ready(pending, incorporated):
    for step in pending:
        if step.to_tiers[0] in incorporated:
            return step
        if step.kind == "double" and step.to_tiers[1] in incorporated:
            return step
    return None


def _find_partner(step, pending):
    for other in pending:
        if other.kind == step.kind and other.to_tiers == step.to_tiers:
            return other
    return None


def _lift_tier(design, tier: str) -> Structure:
    structure = design.tier_structure(tier)
    alloc = design.allocation(tier)
    return lift(structure, alloc, design.policy)


def _refine_or_raise(design, d, s, step, diagnostics, tier=None, cells_for=None):
    out = refine(d, s, design.policy, tier=tier or step.from_tier, cells_for=cells_for)
    if isinstance(out, ViolationReport):
        raise IncoherenceError(_report_from_violations(design, d, out, step))
    return out


def _report_from_violations(design, d, vr: ViolationReport, step) -> IncoherenceReport:
    origin = {node.label: node.origin_tier for node in d.nodes}
    items = []
    first_order = [v for v in vr.violations if v.kind == "first-order"]
    by_source: dict = {}
    for v in first_order:
        by_source.setdefault(v.cols[0], []).append(v)

    suggestions = {}
    for source_label, viols in by_source.items():
        suggestions[source_label] = _merge_suggestion(design, d, step, source_label, viols)

    for v in vr.violations:
        items.append(
            IncoherenceItem(
                step=step.describe(),
                kind=v.kind,
                node=v.row,
                sources=v.cols,
                norm=v.norm,
                eigenvalues=v.eigenvalues,
                destroyed_tier=origin.get(v.row, ""),
                suggestion=suggestions.get(v.cols[0], "") if v.kind == "first-order" else "",
            )
        )
    return IncoherenceReport(items=items)


def _merge_suggestion(design, d, step, source_label, viols) -> str:
    """Would pooling the clashing decomposition elements restore balance?"""
    policy = design.policy
    try:
        lifted = _lift_tier(design, step.from_tier)
    except Exception:
        return "redesign the randomization"
    q = next((e for e in lifted.elements if e.label == source_label), None)
    if q is None:
        return "redesign the randomization"
    failing = {v.row for v in viols}
    mats = [node.projector.matrix for node in d.nodes if node.label in failing]
    # pooling only the failing elements rarely suffices; include every element
    # the source already leans on
    for node in d.nodes:
        if node.label in failing:
            continue
        res = efficiency(node.projector, q, policy)
        if res.efficiency is not None and not res.efficiency.is_zero():
            mats.append(node.projector.matrix)
            failing.add(node.label)
    merged = np.zeros((d.n, d.n))
    for m in mats:
        merged = merged + m
    try:
        pooled = Projector.validated(merged, "pooled", policy)
        res = efficiency(pooled, q, policy)
    except Exception:
        return "redesign the randomization"
    if res.ok:
        names = ", ".join(sorted(failing))
        return f"merge sources {names} into one stratum"
    return "redesign the randomization"


def _run_plain(design, d, step, diagnostics):
    lifted = _lift_tier(design, step.from_tier)
    diagnostics.extend(lifted.notices)
    return _refine_or_raise(design, d, lifted, step, diagnostics)


def _run_independent_pair(design, d, first, second, diagnostics, reports):
    q_lift = _lift_tier(design, first.from_tier)
    r_lift = _lift_tier(design, second.from_tier)
    diagnostics.extend(q_lift.notices)
    diagnostics.extend(r_lift.notices)

    mean = d.nodes[0].projector.matrix  # validated: exactly one Mean, first node
    pre_nodes = list(d.nodes)

    d1 = _refine_or_raise(design, d, q_lift, first, diagnostics)

    items = []
    n = d.n
    j = np.full((n, n), 1.0 / n)
    for node in pre_nodes:
        if max_abs(node.projector.matrix - j) <= design.policy.tol_zero:
            continue
        rep = check_adjusted_orthogonality(node.projector, q_lift, r_lift, design.policy)
        reports.append(rep)
        if not rep.holds:
            items.append(
                IncoherenceItem(
                    step=first.describe(),
                    kind="adjusted-orthogonality",
                    node=node.projector.label,
                    sources=(first.from_tier, second.from_tier),
                    norm=0.0,
                    destroyed_tier=node.origin_tier,
                    suggestion="the two randomizations are not independent",
                )
            )
    if items:
        raise IncoherenceError(IncoherenceReport(items=items))

    return _refine_or_raise(design, d1, r_lift, second, diagnostics)


def _run_coincident_pair(design, d, first, second, diagnostics, reports):
    policy = design.policy
    q_lift = _lift_tier(design, first.from_tier)
    r_lift = _lift_tier(design, second.from_tier)
    diagnostics.extend(q_lift.notices)
    diagnostics.extend(r_lift.notices)

    for lifted, step in ((q_lift, first), (r_lift, second)):
        chk = is_structure_balanced(lifted, d, policy)
        if isinstance(chk, ViolationReport):
            raise IncoherenceError(_report_from_violations(design, d, chk, step))

    rep = check_coincident(d, q_lift, r_lift, policy)
    reports.append(rep)

    if rep.special_as_given.holds:
        rep.route = "left-to-right"
        d1 = _refine_or_raise(design, d, q_lift, first, diagnostics)
        return _refine_or_raise(design, d1, r_lift, second, diagnostics)
    if rep.special_swapped.holds:
        rep.route = "swapped"
        diagnostics.append(
            f"coincident pair ({first.from_tier}, {second.from_tier}): special "
            "case holds after swapping; refined in swapped order"
        )
        d1 = _refine_or_raise(design, d, r_lift, second, diagnostics)
        return _refine_or_raise(design, d1, q_lift, first, diagnostics)
    if rep.general.holds:
        rep.route = "joint"
        diagnostics.append(
            f"coincident pair ({first.from_tier}, {second.from_tier}): special "
            "case fails in both orders; emitting the joint decomposition"
        )
        d_q = _refine_or_raise(design, d, q_lift, first, diagnostics)
        d_r = _refine_or_raise(design, d, r_lift, second, diagnostics)
        out = joint(d_q, d_r, policy)
        out.label = d.label
        return out

    items = [
        IncoherenceItem(
            step=f"{first.describe()} + {second.describe()}",
            kind="coincident",
            node=w,
            sources=(first.from_tier, second.from_tier),
            norm=0.0,
            suggestion="redesign the randomization",
        )
        for w in rep.general.witnesses
        if "neither sweep" in w
    ]
    raise IncoherenceError(IncoherenceReport(items=items))


def _run_double(design, d, step, diagnostics, reports):
    policy = design.policy
    incorporated_target, intermediate = step.to_tiers
    qs = design.intermediate_tier_structure(intermediate)
    rs = design.tier_structure(step.from_tier)
    g_alloc = design.intermediate_allocation(intermediate, step.from_tier)

    rep, placement = check_double(qs, rs, g_alloc, policy)
    reports.append(rep)
    if not rep.holds:
        raise IncoherenceError(
            IncoherenceReport(
                items=[
                    IncoherenceItem(
                        step=step.describe(),
                        kind="double",
                        node=w,
                        sources=(intermediate, step.from_tier),
                        norm=0.0,
                        suggestion="redesign the randomization",
                    )
                    for w in rep.witnesses
                ]
            )
        )

    lifted = lift(rs, design.allocation(step.from_tier), policy)
    diagnostics.extend(lifted.notices)
    cells_for = {
        r.label: ((intermediate, placement[r.label]), (step.from_tier, r.label))
        for r in lifted.elements
        if r.label in placement
    }
    return _refine_or_raise(
        design, d, lifted, step, diagnostics, tier=intermediate, cells_for=cells_for
    )


def diagnose_incoherence(design) -> IncoherenceReport:
    """Run the build and collect the incoherence report instead of raising."""
    try:
        build_decomposition(design)
    except IncoherenceError as exc:
        return exc.report
    return IncoherenceReport(items=[])
