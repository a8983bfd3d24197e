"""Decomposition tables: fixed-width text, CSV, and JSON renderings.

A finished decomposition is a flat list of leaves, but what a reader wants
is hierarchy: each source of the observational-unit tier opens a block, and
the sweeps that carved it up sit to its right, one column group per tier.
``layout`` rebuilds that hierarchy from the nodes' lineage records and
``render`` serializes it as aligned text, CSV (one row per leaf), or a JSON
tree.  Rendering is pure and deterministic: same table, same flags, same
bytes.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from fractions import Fraction

from .projlin import EfficiencyValue
from .structure import Decomposition

__all__ = [
    "RenderError",
    "Cell",
    "LeafRow",
    "RenderedTable",
    "layout",
    "render",
    "parse_table_json",
]


class RenderError(ValueError):
    """The decomposition cannot be laid out or serialized as requested."""


_ASCII_MAP = {"∧": "^", "⊢": "-|", "▷": "|>", "⊓": "&"}


def _asciify(text: str, ascii_only: bool) -> str:
    if not ascii_only:
        return text
    for uni, plain in _ASCII_MAP.items():
        text = text.replace(uni, plain)
    return text


@dataclass(frozen=True)
class Cell:
    """One table cell: a source name shown under a tier's column group.

    ``efficiency`` is the factor of the sweep that created the cell; None
    for origin cells, residuals, and the placement half of a collapsed
    double-randomization entry.
    """

    tier: str
    source: str
    df: int
    efficiency: EfficiencyValue | None = None

    @property
    def show_efficiency(self) -> bool:
        return self.efficiency is not None and not self.efficiency.is_one()


@dataclass(frozen=True)
class LeafRow:
    """One leaf of the decomposition: its cell path and bookkeeping.

    ``cells`` runs in refinement order (origin first); ``efficiency`` is the
    product of the sweep factors along the path, exact when every factor
    snapped to a rational.
    """

    cells: tuple
    label: str
    df: int
    efficiency: EfficiencyValue

    def cell_in(self, tier: str) -> Cell | None:
        for c in self.cells:
            if c.tier == tier:
                return c
        return None


@dataclass(frozen=True)
class RenderedTable:
    label: str
    n: int
    tiers: tuple
    rows: tuple
    footnotes: tuple


def _path_efficiency(cells) -> EfficiencyValue:
    """Product of the sweep factors along a leaf's path."""
    value = 1.0
    frac = Fraction(1)
    exact = True
    for c in cells:
        if c.efficiency is None:
            continue
        value *= c.efficiency.value
        if c.efficiency.rational is None:
            exact = False
        else:
            frac *= Fraction(*c.efficiency.rational)
    if exact:
        return EfficiencyValue(value=float(frac), rational=(frac.numerator, frac.denominator))
    return EfficiencyValue(value=value, rational=None)


def layout(d: Decomposition, tier_order, footnotes=()) -> RenderedTable:
    """Arrange a decomposition's leaves into the multi-column tier table.

    ``tier_order`` gives the column groups left to right; the unit tier
    comes first by convention.  Leaves keep the decomposition's order, so
    they arrive grouped by originating unit source; the block structure is
    checked rather than re-sorted.
    """
    tiers = tuple(tier_order)
    if not tiers:
        raise RenderError("tier_order must name at least one tier")
    rows = []
    for node in d.nodes:
        cells = [Cell(node.origin_tier, node.origin_source, node.origin_df)]
        for entry in node.lineage:
            for k, (tier, source, df) in enumerate(entry.cells):
                last = k == len(entry.cells) - 1
                eff = entry.efficiency if (entry.op == "sweep" and last) else None
                cells.append(Cell(tier, source, df, eff))
        seen_tiers = set()
        for c in cells:
            if c.tier not in tiers:
                raise RenderError(
                    f"leaf {node.label!r} carries a cell for tier {c.tier!r}, "
                    f"which is not in the table's tier order {list(tiers)}"
                )
            if c.tier in seen_tiers:
                raise RenderError(
                    f"leaf {node.label!r} has two cells in tier {c.tier!r}; "
                    "its lineage is malformed"
                )
            seen_tiers.add(c.tier)
        rows.append(
            LeafRow(
                cells=tuple(cells),
                label=node.label,
                df=node.df,
                efficiency=_path_efficiency(cells),
            )
        )

    block_df = {}
    block_leaf_df = {}
    order = []
    prev = None
    for row in rows:
        head = row.cells[0]
        key = (head.tier, head.source, head.df)
        if key != prev:
            if key in block_df:
                raise RenderError(
                    f"unit source {head.source!r} appears in two separate blocks; "
                    "the decomposition is not grouped by origin"
                )
            block_df[key] = head.df
            block_leaf_df[key] = 0
            order.append(key)
            prev = key
        block_leaf_df[key] += row.df
    for key in order:
        if block_leaf_df[key] != block_df[key]:
            raise RenderError(
                f"block {key[1]!r}: leaf df sum {block_leaf_df[key]} != "
                f"source df {block_df[key]}"
            )
    total = sum(block_df[key] for key in order)
    if total != d.n:
        raise RenderError(f"unit-source df sum {total} != space dimension {d.n}")

    return RenderedTable(
        label=d.label or "decomposition",
        n=d.n,
        tiers=tiers,
        rows=tuple(rows),
        footnotes=tuple(footnotes),
    )


def render(table: RenderedTable, fmt: str = "text", ascii_only: bool = False) -> bytes:
    if fmt == "text":
        return _render_text(table, ascii_only)
    if fmt == "csv":
        return _render_csv(table, ascii_only)
    if fmt == "json":
        return _render_json(table, ascii_only)
    raise RenderError(f"unknown table format {fmt!r} (expected text, csv, or json)")


# --- text ---------------------------------------------------------------------


def _eff_text(cell: Cell) -> str:
    return cell.efficiency.render() if cell.show_efficiency else ""


def _render_text(table: RenderedTable, ascii_only: bool) -> bytes:
    # dedup: a cell is blanked when it repeats the previous row's cell and
    # every column group to its left was blanked too, which prints shared
    # path prefixes once per block
    grid = []
    prev: dict = {}
    for row in table.rows:
        cells = {c.tier: c for c in row.cells}
        out = {}
        deduping = True
        for tier in table.tiers:
            cell = cells.get(tier)
            if deduping and cell is not None and prev.get(tier) == cell:
                out[tier] = None
                continue
            deduping = False
            out[tier] = cell
        grid.append((row, out))
        prev = cells

    has_eff = {
        tier: any(
            c.tier == tier and c.show_efficiency for r in table.rows for c in r.cells
        )
        for tier in table.tiers
    }
    heads = {tier: _asciify(f"{tier} tier", ascii_only) for tier in table.tiers}
    w_eff, w_src, w_df = {}, {}, {}
    for tier in table.tiers:
        cells = [c for r in table.rows for c in r.cells if c.tier == tier]
        w_eff[tier] = (
            max([len("eff.")] + [len(_eff_text(c)) for c in cells]) if has_eff[tier] else 0
        )
        w_src[tier] = max(
            [len("source")] + [len(_asciify(c.source, ascii_only)) for c in cells]
        )
        w_df[tier] = max([len("df")] + [len(str(c.df)) for c in cells])
        group = w_eff[tier] + (2 if has_eff[tier] else 0) + w_src[tier] + 2 + w_df[tier]
        if len(heads[tier]) > group:
            w_src[tier] += len(heads[tier]) - group

    def group_width(tier):
        return w_eff[tier] + (2 if has_eff[tier] else 0) + w_src[tier] + 2 + w_df[tier]

    def fmt_cell(tier, cell):
        if cell is None:
            return " " * group_width(tier)
        eff = _eff_text(cell)
        src = _asciify(cell.source, ascii_only)
        body = f"{src:<{w_src[tier]}}  {cell.df:>{w_df[tier]}}"
        if has_eff[tier]:
            return f"{eff:>{w_eff[tier]}}  {body}"
        return body

    def fmt_header(tier):
        parts = []
        if has_eff[tier]:
            parts.append(f"{'eff.':>{w_eff[tier]}}")
        parts.append(f"{'source':<{w_src[tier]}}  {'df':>{w_df[tier]}}")
        return "  ".join(parts) if len(parts) > 1 else parts[0]

    sep = " | "
    width = sum(group_width(t) for t in table.tiers) + len(sep) * (len(table.tiers) - 1)
    lines = [f"{_asciify(table.label, ascii_only)}  (n = {table.n})", "=" * width]
    lines.append(sep.join(f"{heads[t]:<{group_width(t)}}" for t in table.tiers).rstrip())
    lines.append(sep.join(fmt_header(t) for t in table.tiers).rstrip())
    lines.append("=" * width)
    prev_block = None
    for row, out in grid:
        head = row.cells[0]
        key = (head.source, head.df)
        if prev_block is not None and key != prev_block:
            lines.append("-" * width)
        prev_block = key
        lines.append(sep.join(fmt_cell(t, out[t]) for t in table.tiers).rstrip())
    lines.append("=" * width)
    if table.footnotes:
        lines.append("notes:")
        for i, note in enumerate(table.footnotes, start=1):
            lines.append(f"  ({i}) {_asciify(note, ascii_only)}")
    return ("\n".join(lines) + "\n").encode("utf-8")


# --- csv ----------------------------------------------------------------------

CSV_COLUMNS = (
    "block_source",
    "lineage",
    "source",
    "tier",
    "df",
    "eff_num",
    "eff_den",
    "eff_float",
)


def _render_csv(table: RenderedTable, ascii_only: bool) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in table.rows:
        last = row.cells[-1]
        num, den = row.efficiency.rational or ("", "")
        writer.writerow(
            [
                _asciify(row.cells[0].source, ascii_only),
                _asciify(row.label, ascii_only),
                _asciify(last.source, ascii_only),
                last.tier,
                row.df,
                num,
                den,
                "%.12g" % row.efficiency.value,
            ]
        )
    return buf.getvalue().encode("utf-8")


# --- json ---------------------------------------------------------------------


def _efficiency_json(eff: EfficiencyValue | None):
    if eff is None:
        return None
    num, den = eff.rational or (None, None)
    return {"float": eff.value, "num": num, "den": den}


def _render_json(table: RenderedTable, ascii_only: bool) -> bytes:
    root = {
        "source": _asciify(table.label, ascii_only),
        "tier": "",
        "df": table.n,
        "efficiency": None,
        "children": [],
    }
    for row in table.rows:
        parent = root
        for cell in row.cells:
            node = {
                "source": _asciify(cell.source, ascii_only),
                "tier": cell.tier,
                "df": cell.df,
                "efficiency": _efficiency_json(cell.efficiency),
            }
            siblings = parent["children"]
            # merge into the previous sibling when the path prefix repeats;
            # only adjacent merging is safe, row order is part of the contract
            if siblings and all(
                siblings[-1][k] == node[k] for k in ("source", "tier", "df", "efficiency")
            ):
                parent = siblings[-1]
                continue
            node["children"] = []
            siblings.append(node)
            parent = node
    doc = {"table": root, "footnotes": [_asciify(f, ascii_only) for f in table.footnotes]}
    return (json.dumps(doc, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def parse_table_json(data) -> dict:
    """Parse ``render(..., "json")`` output back into its dict form.

    Validates the schema (every node carries source, tier, df, efficiency,
    children) so a round trip through bytes is an identity on the tree.
    """
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    doc = json.loads(data)
    if not isinstance(doc, dict) or "table" not in doc or "footnotes" not in doc:
        raise RenderError("table JSON must carry 'table' and 'footnotes'")

    def check(node, path):
        for key in ("source", "tier", "df", "efficiency", "children"):
            if key not in node:
                raise RenderError(f"table JSON node {path} is missing {key!r}")
        if not isinstance(node["df"], int):
            raise RenderError(f"table JSON node {path}: df must be an integer")
        for i, child in enumerate(node["children"]):
            check(child, f"{path}.children[{i}]")

    check(doc["table"], "table")
    return doc
