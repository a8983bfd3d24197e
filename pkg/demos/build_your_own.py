"""Write a design bundle from scratch and decompose it.

A randomized complete-block experiment is assembled in a temporary
directory: six blocks of three plots, three treatments, one treatment
per plot in every block.  The same files would normally live next to
your data; the spec format is plain text and the allocation is a CSV.
"""

import tempfile
from pathlib import Path

import numpy as np

from tierdecomp import build_decomposition, layout, load_design, render

SPEC = """\
# a randomized complete-block design, written by hand
design rcbd18
units field
tier field
  factor Blocks 6
  factor Plots 3
  formula Blocks/Plots
tier treatments
  factor Treatments 3
  formula Treatments
randomize treatments -> field type simple
allocation csv rcbd18.csv
"""


def main():
    rng = np.random.default_rng(18)
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        (root / "rcbd18.spec").write_text(SPEC)
        rows = ["Blocks,Plots,Treatments"]
        for b in range(6):
            for p, t in enumerate(rng.permutation(3)):
                rows.append(f"b{b + 1},p{p + 1},t{t + 1}")
        (root / "rcbd18.csv").write_text("\n".join(rows) + "\n")

        design = load_design(root / "rcbd18.spec")
        result = build_decomposition(design)
        table = layout(result.decomposition, design.tier_order)
        print(render(table, "text").decode())
        print("the same table as CSV:")
        print(render(table, "csv").decode())


if __name__ == "__main__":
    main()
