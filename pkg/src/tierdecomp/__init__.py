"""Orthogonal decomposition of multitiered experimental designs.

The package takes a design spec (tiers, factors, formulas, randomization
steps) plus its allocation table, builds a complete set of mutually
orthogonal projectors for each tier, and threads the randomized tiers
onto the observational units: balanced sources are swept out with their
efficiency factors, the rest settles into residual strata.  The result
renders as the familiar skeleton anova table of sources and degrees of
freedom, one column block per tier.

Entry points:

    load_design(path)        read a spec file and its CSV tables
    build_decomposition(d)   run every randomization step
    layout / render          turn the result into text, CSV, or JSON
    cross_check(d)           brute-force verification on small designs

The ``tierdecomp`` command line wraps the same four stages.
"""

from .formula import (
    Factor,
    FormulaError,
    PseudofactorDecl,
    SourcePoset,
    attach_data,
    expand_terms,
    parse_formula,
    render_label,
    source_projectors,
)
from .oracle import MatchReport, OracleError, brute_projectors, cross_check
from .projlin import (
    DEFAULT_POLICY,
    EfficiencyRangeError,
    EfficiencyValue,
    Projector,
    TolerancePolicy,
    snap_rational,
)
from .randomize import (
    BuildError,
    BuildResult,
    ConditionReport,
    IncoherenceError,
    IncoherenceReport,
    RandomizationStep,
    STEP_KINDS,
    build_decomposition,
    check_adjusted_orthogonality,
    check_coincident,
    check_double,
    diagnose_incoherence,
)
from .speccli import (
    Design,
    DesignSpec,
    SpecError,
    cli_main,
    load_design,
    parse_spec,
    render_spec,
)
from .structure import (
    AllocationMap,
    BalanceResult,
    Decomposition,
    DecompNode,
    EfficiencyMatrix,
    LiftingError,
    Structure,
    ViolationReport,
    efficiency,
    is_structure_balanced,
    joint,
    lift,
    refine,
    residual,
    sweep,
)
from .tabrender import RenderedTable, RenderError, layout, parse_table_json, render

__version__ = "0.1.0"

__all__ = [
    "AllocationMap",
    "BalanceResult",
    "BuildError",
    "BuildResult",
    "ConditionReport",
    "Decomposition",
    "DecompNode",
    "DEFAULT_POLICY",
    "Design",
    "DesignSpec",
    "EfficiencyMatrix",
    "EfficiencyRangeError",
    "EfficiencyValue",
    "Factor",
    "FormulaError",
    "IncoherenceError",
    "IncoherenceReport",
    "LiftingError",
    "MatchReport",
    "OracleError",
    "Projector",
    "PseudofactorDecl",
    "RandomizationStep",
    "RenderedTable",
    "RenderError",
    "SourcePoset",
    "SpecError",
    "STEP_KINDS",
    "Structure",
    "TolerancePolicy",
    "ViolationReport",
    "attach_data",
    "brute_projectors",
    "build_decomposition",
    "check_adjusted_orthogonality",
    "check_coincident",
    "check_double",
    "cli_main",
    "cross_check",
    "diagnose_incoherence",
    "efficiency",
    "expand_terms",
    "is_structure_balanced",
    "joint",
    "layout",
    "lift",
    "load_design",
    "parse_formula",
    "parse_spec",
    "parse_table_json",
    "refine",
    "render",
    "render_label",
    "render_spec",
    "residual",
    "snap_rational",
    "source_projectors",
    "sweep",
    "__version__",
]
