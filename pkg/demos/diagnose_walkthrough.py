"""Diagnose an incoherent pair of randomizations.

The 'uneven' bundle allocates treatments so unevenly across plots that
the second randomization destroys the decomposition established by the
first: some QPQ products stop being multiples of Q.  Decomposing such a
design is refused; this script shows the diagnosis that explains why,
listing the offending eigenvalue spreads.
"""

from pathlib import Path

from tierdecomp import IncoherenceError, build_decomposition, diagnose_incoherence, load_design

DESIGNS = Path(__file__).resolve().parents[1] / "designs"


def main():
    design = load_design(DESIGNS / "uneven.spec")
    print(f"loaded '{design.name}': {design.n} units")

    try:
        build_decomposition(design)
        print("unexpectedly built; the bundle must have been repaired")
    except IncoherenceError as exc:
        print("decompose refused, as it should be:")
        print(exc)

    print()
    print("the structured diagnosis:")
    report = diagnose_incoherence(design)
    for item in report.items:
        eigs = ", ".join(f"{v:g} (x{m})" for v, m in item.eigenvalues)
        print(f"  node {item.node}: QPQ eigenvalues {eigs}")
        if item.suggestion:
            print(f"    hint: {item.suggestion}")


if __name__ == "__main__":
    main()
