"""Brute-force cross-check of the decomposition engine.

Everything here is rebuilt from raw indicator vectors: the span of each
source is the span of its class indicators minus the spans of every
coarser term, with coarseness decided by comparing observed partitions.
No projector averaging, no efficiency algebra, no poset bookkeeping is
borrowed from the engine; the only shared code is the spec parser and
plain numpy.

``cross_check`` replays each engine node's lineage using these bases:
sweeps become "project the swept source's basis into the current
subspace", residuals become "remove every such projection", and the
efficiency factor of a sweep is read off as the Rayleigh quotient of the
resulting vectors against the swept span.  The final subspace must
reproduce the engine's projector entrywise.

This is O(n^3) in the unit count, so designs are capped (default 64
units) and the check is never consulted by the production path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .formula import Cross, Leaf, Nest, parse_formula

__all__ = [
    "OracleError",
    "BruteSource",
    "orthonormal_basis",
    "brute_projectors",
    "brute_all",
    "NodeCheck",
    "MatchReport",
    "cross_check",
]

RANK_TOL = 1e-10
MEET_TOL = 1e-6


class OracleError(RuntimeError):
    """The cross-check cannot run (design too large, missing columns)."""


def orthonormal_basis(matrix: np.ndarray, rank_tol: float = RANK_TOL) -> np.ndarray:
    """Orthonormal basis of the column span of ``matrix``.

    Modified Gram-Schmidt with a second orthogonalization pass; columns
    whose remainder falls below ``rank_tol`` of their original size are
    dependent and dropped.
    """
    n = matrix.shape[0]
    basis: list = []
    for j in range(matrix.shape[1]):
        v = np.asarray(matrix[:, j], dtype=float).copy()
        scale = max(1.0, float(np.linalg.norm(v)))
        for _ in range(2):
            for b in basis:
                v -= (b @ v) * b
        norm = float(np.linalg.norm(v))
        if norm > rank_tol * scale:
            basis.append(v / norm)
    if not basis:
        return np.zeros((n, 0))
    return np.column_stack(basis)


# --- term spans from raw columns -------------------------------------------------


def _term_sets(node) -> list:
    """All generalized-factor constituent sets of a formula AST."""
    if isinstance(node, Leaf):
        return [frozenset((node.name,))]
    if isinstance(node, Cross):
        acc = _term_sets(node.parts[0])
        for part in node.parts[1:]:
            nxt = _term_sets(part)
            acc = acc + nxt + [a | b for a in acc for b in nxt]
        return acc
    if isinstance(node, Nest):
        outer = _term_sets(node.outer)
        inner = _term_sets(node.inner)
        outer_all = frozenset().union(*_collect(node.outer))
        return outer + [outer_all | t for t in inner]
    raise OracleError(f"unknown formula node {node!r}")


def _collect(node) -> list:
    if isinstance(node, Leaf):
        return [frozenset((node.name,))]
    if isinstance(node, Cross):
        out = []
        for part in node.parts:
            out.extend(_collect(part))
        return out
    return _collect(node.outer) + _collect(node.inner)


def _partition(columns: dict, names, n: int) -> np.ndarray:
    seen: dict = {}
    ids = np.empty(n, dtype=np.intp)
    cols = [columns[m] for m in sorted(names)]
    for i in range(n):
        key = tuple(c[i] for c in cols)
        ids[i] = seen.setdefault(key, len(seen))
    return ids


def _coarser(fine: np.ndarray, coarse: np.ndarray) -> bool:
    """Every class of ``fine`` sits inside one class of ``coarse``."""
    mapping: dict = {}
    for f, c in zip(fine.tolist(), coarse.tolist()):
        if mapping.setdefault(f, c) != c:
            return False
    return True


def _indicators(ids: np.ndarray) -> np.ndarray:
    k = int(ids.max()) + 1
    out = np.zeros((ids.shape[0], k))
    out[np.arange(ids.shape[0]), ids] = 1.0
    return out


@dataclass(frozen=True)
class BruteSource:
    tier: str
    constituents: frozenset
    basis: np.ndarray

    @property
    def name(self) -> str:
        if not self.constituents:
            return "Mean"
        return "^".join(sorted(self.constituents))

    @property
    def df(self) -> int:
        return self.basis.shape[1]


def brute_projectors(design, tier: str, rank_tol: float = RANK_TOL) -> list:
    """Source subspaces of ``tier`` spanned directly on the unit rows.

    Each term's basis is the span of its class indicators with the spans
    of every coarser term projected out.  Coarseness is decided from the
    observed partitions alone.  Terms whose span is exhausted by coarser
    ones disappear; a duplicated partition keeps its first term only.
    """
    decl = design.spec.tier(tier)
    columns = design.main.columns
    needed = [f.name for f in decl.factors] + [p.name for p in decl.pseudos]
    missing = [c for c in needed if c not in columns]
    if missing:
        raise OracleError(
            f"tier {tier!r}: no unit-level data column {missing[0]!r}"
        )
    n = design.n

    ast = parse_formula(decl.formula, {f.name for f in decl.factors})
    term_sets = [frozenset()]
    for t in _term_sets(ast):
        if t not in term_sets:
            term_sets.append(t)
    for p in decl.pseudos:
        term_sets.append(frozenset((p.name,)))

    parts = {t: _partition(columns, t, n) for t in term_sets}
    keys = {t: tuple(parts[t].tolist()) for t in term_sets}
    kept = []
    seen_keys = set()
    for t in term_sets:
        if keys[t] in seen_keys:
            continue
        seen_keys.add(keys[t])
        kept.append(t)

    out = []
    for t in kept:
        lower_cols = [
            _indicators(parts[s])
            for s in kept
            if s != t and _coarser(parts[t], parts[s])
        ]
        x = _indicators(parts[t])
        if lower_cols:
            low = orthonormal_basis(np.hstack(lower_cols), rank_tol)
            x = x - low @ (low.T @ x)
        basis = orthonormal_basis(x, rank_tol)
        if basis.shape[1] == 0:
            continue
        out.append(BruteSource(tier=tier, constituents=t, basis=basis))
    return out


def brute_all(design, rank_tol: float = RANK_TOL) -> dict:
    """Brute source subspaces for every tier whose columns reach the units."""
    out = {}
    for tier in design.tier_order:
        try:
            out[tier] = brute_projectors(design, tier, rank_tol)
        except OracleError:
            continue
    return out


# --- node-by-node comparison ------------------------------------------------------


@dataclass
class NodeCheck:
    node: str
    origin: str
    df_engine: int
    df_brute: int
    image_gap: float
    lambdas: list = field(default_factory=list)  # (source, engine, low, high)
    status: str = "ok"  # ok | routing | df | image | lambda
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "node": self.node,
            "origin": self.origin,
            "df_engine": self.df_engine,
            "df_brute": self.df_brute,
            "image_gap": self.image_gap,
            "lambdas": [
                {"source": s, "engine": e, "low": lo, "high": hi}
                for s, e, lo, hi in self.lambdas
            ],
            "status": self.status,
            "message": self.message,
        }


@dataclass
class MatchReport:
    design: str
    n: int
    tol: float
    checks: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.status == "ok" for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "design": self.design,
            "n": self.n,
            "tol": self.tol,
            "match": self.ok,
            "nodes": [c.to_dict() for c in self.checks],
        }

    def render_text(self) -> str:
        lines = [f"oracle check: {self.design} (n = {self.n}, tol = {self.tol:g})"]
        width = max((len(c.node) for c in self.checks), default=4)
        for c in self.checks:
            mark = "ok  " if c.status == "ok" else "FAIL"
            line = (
                f"  {mark} {c.node:<{width}}  df {c.df_engine}"
                f"  gap {c.image_gap:.3g}"
            )
            for source, eng, low, high in c.lambdas:
                line += f"  lambda[{source}] {eng:.6g} ~ [{low:.6g}, {high:.6g}]"
            if c.message:
                line += f"  ({c.message})"
            lines.append(line)
        verdict = "MATCH" if self.ok else "MISMATCH"
        lines.append(f"verdict: {verdict} ({len(self.checks)} nodes)")
        return "\n".join(lines) + "\n"

    def render_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _image_basis(matrix: np.ndarray, df: int) -> np.ndarray:
    values, vectors = np.linalg.eigh(matrix)
    cols = vectors[:, values > 0.5]
    if cols.shape[1] != df:
        raise OracleError(
            f"projector rank {cols.shape[1]} disagrees with its trace {df}"
        )
    return cols


def _overlap(e: np.ndarray, source: BruteSource) -> float:
    return float(np.sum((source.basis.T @ e) ** 2))


def _pick(e: np.ndarray, candidates: list):
    best, best_val = None, 0.0
    for cand in candidates:
        val = _overlap(e, cand)
        if val > best_val:
            best, best_val = cand, val
    if best is None or best_val < MEET_TOL:
        return None
    return best


def _check_node(node, brute: dict, tol: float) -> NodeCheck:
    label = node.label
    check = NodeCheck(
        node=label, origin="", df_engine=node.df, df_brute=-1, image_gap=float("inf")
    )
    try:
        e = _image_basis(node.projector.matrix, node.df)
    except OracleError as exc:
        check.status = "df"
        check.message = str(exc)
        return check

    origin_sources = brute.get(node.origin_tier)
    if not origin_sources:
        check.status = "routing"
        check.message = f"no brute spans for tier {node.origin_tier!r}"
        return check
    origin = _pick(e, origin_sources)
    if origin is None:
        check.status = "routing"
        check.message = f"no {node.origin_tier!r} span meets the node image"
        return check
    check.origin = f"{node.origin_tier}:{origin.name}"

    s = origin.basis
    for entry in node.lineage:
        cell = entry.cells[-1] if entry.op == "sweep" else entry.cells[0]
        tier = cell[0]
        candidates = brute.get(tier)
        if not candidates:
            check.status = "routing"
            check.message = f"no brute spans for tier {tier!r}"
            return check
        if entry.op == "sweep":
            q = _pick(e, candidates)
            if q is None:
                check.status = "routing"
                check.message = f"no {tier!r} span meets the node image"
                return check
            s = orthonormal_basis(s @ (s.T @ q.basis))
            if s.shape[1] == 0:
                check.status = "image"
                check.message = f"sweep by {tier}:{q.name} leaves nothing"
                return check
            rayleigh = np.sum((q.basis.T @ s) ** 2, axis=0)
            low, high = float(rayleigh.min()), float(rayleigh.max())
            engine = 1.0 if entry.efficiency is None else float(entry.efficiency.value)
            check.lambdas.append((f"{tier}:{q.name}", engine, low, high))
            if max(abs(low - engine), abs(high - engine)) > tol:
                check.status = "lambda"
                check.message = (
                    f"engine efficiency {engine:.9g} vs Rayleigh range "
                    f"[{low:.9g}, {high:.9g}]"
                )
                return check
        else:
            x = s.copy()
            for q in candidates:
                w = orthonormal_basis(s @ (s.T @ q.basis))
                if w.shape[1]:
                    x = x - w @ (w.T @ x)
            s = orthonormal_basis(x)
            if s.shape[1] == 0:
                check.status = "image"
                check.message = f"residual under {tier!r} leaves nothing"
                return check

    check.df_brute = s.shape[1]
    if check.df_brute != node.df:
        check.status = "df"
        check.message = f"brute span has {check.df_brute} dimensions, engine {node.df}"
        return check
    p_brute = s @ s.T
    check.image_gap = float(np.max(np.abs(node.projector.matrix - p_brute)))
    if check.image_gap > tol:
        check.status = "image"
        check.message = f"projector images differ by {check.image_gap:.3g}"
    return check


def cross_check(design, max_units: int = 64, tol: float = 1e-7) -> MatchReport:
    """Rebuild the design's decomposition from indicator spans and compare.

    Raises OracleError when the design exceeds ``max_units`` (the basis
    work is cubic in the unit count) or when a tier has no unit-level
    columns to span from.
    """
    if design.n > max_units:
        raise OracleError(
            f"design has {design.n} units; the oracle is capped at {max_units} "
            "(raise --max-units to run it anyway)"
        )
    from .randomize import build_decomposition

    result = build_decomposition(design)
    brute = brute_all(design)
    report = MatchReport(design=design.name, n=design.n, tol=tol)
    for node in result.decomposition.nodes:
        report.checks.append(_check_node(node, brute, tol))
    return report
