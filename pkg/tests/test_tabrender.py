"""Table layout and the text/csv/json renderers."""

import json

import pytest

from tierdecomp import RenderError, layout, parse_table_json, render

CHERRY_TEXT = """\
cherry  (n = 30)
========================================================
trees tier        | rootstocks tier | viruses tier
source         df | source       df | eff.  source    df
========================================================
Mean            1 | Mean          1 |       Mean       1
--------------------------------------------------------
Blocks          2 |                 |
--------------------------------------------------------
Trees[Blocks]  27 | Rootstocks    9 |  1/6  Viruses    4
                  |                 |       Residual   5
                  | Residual     18 |  5/6  Viruses    4
                  |                 |       Residual  14
========================================================
"""

CHERRY_CSV = """\
block_source,lineage,source,tier,df,eff_num,eff_den,eff_float
Mean,Mean,Mean,viruses,1,1,1,1
Blocks,Blocks,Blocks,trees,2,1,1,1
Trees[Blocks],Trees[Blocks] ▷ Rootstocks ▷ Viruses,Viruses,viruses,4,1,6,0.166666666667
Trees[Blocks],Trees[Blocks] ▷ Rootstocks ⊢ viruses,Residual,viruses,5,1,1,1
Trees[Blocks],Trees[Blocks] ⊢ rootstocks ▷ Viruses,Viruses,viruses,4,5,6,0.833333333333
Trees[Blocks],Trees[Blocks] ⊢ rootstocks ⊢ viruses,Residual,viruses,14,1,1,1
"""


@pytest.fixture(scope="module")
def cherry_table(design, built):
    d = design("cherry")
    return layout(built("cherry").decomposition, d.tier_order)


class TestLayout:
    def test_row_count_and_order(self, cherry_table):
        assert [row.df for row in cherry_table.rows] == [1, 2, 4, 5, 4, 14]
        assert cherry_table.tiers == ("trees", "rootstocks", "viruses")
        assert cherry_table.n == 30

    def test_cells_follow_refinement_order(self, cherry_table):
        row = cherry_table.rows[2]
        assert [(c.tier, c.source, c.df) for c in row.cells] == [
            ("trees", "Trees[Blocks]", 27),
            ("rootstocks", "Rootstocks", 9),
            ("viruses", "Viruses", 4),
        ]
        assert row.efficiency.rational == (1, 6)

    def test_cell_lookup_by_tier(self, cherry_table):
        row = cherry_table.rows[1]
        assert row.cell_in("trees").source == "Blocks"
        assert row.cell_in("viruses") is None

    def test_unknown_tier_rejected(self, design, built):
        with pytest.raises(RenderError, match="not in the table's tier order"):
            layout(built("cherry").decomposition, ("trees", "rootstocks"))

    def test_footnotes_carried(self, design, built):
        d = design("cherry")
        table = layout(built("cherry").decomposition, d.tier_order, footnotes=("a note",))
        assert table.footnotes == ("a note",)


class TestTextRender:
    def test_cherry_table_exact(self, cherry_table):
        assert render(cherry_table, "text").decode() == CHERRY_TEXT

    def test_ascii_mode_is_pure_ascii(self, design, built):
        d = design("semilatin")
        table = layout(built("semilatin").decomposition, d.tier_order)
        out = render(table, "text", ascii_only=True)
        out.decode("ascii")

    def test_ascii_substitutions(self, design, built):
        d = design("semilatin")
        table = layout(built("semilatin").decomposition, d.tier_order)
        text = render(table, "text", ascii_only=True).decode()
        assert "-|" in text  # residual-of marker
        assert "⊢" not in text

    def test_footnotes_rendered(self, design, built):
        d = design("cherry")
        table = layout(built("cherry").decomposition, d.tier_order, footnotes=("watch out",))
        assert "watch out" in render(table, "text").decode()


class TestCsvRender:
    def test_cherry_csv_exact(self, cherry_table):
        assert render(cherry_table, "csv").decode() == CHERRY_CSV

    def test_unsnapped_efficiency_leaves_rational_blank(self, design, built):
        # a denominator cap of 3 cannot hold 1/6, so only the float survives
        from tierdecomp import load_design, build_decomposition
        from conftest import spec_path

        d = load_design(spec_path("cherry"), snap_den=3)
        res = build_decomposition(d)
        table = layout(res.decomposition, d.tier_order)
        lines = render(table, "csv").decode().splitlines()
        virus_rows = [l for l in lines if l.endswith("0.166666666667")]
        assert virus_rows
        assert ",,," in virus_rows[0]


class TestJsonRender:
    def test_tree_shape(self, cherry_table):
        doc = json.loads(render(cherry_table, "json").decode())
        root = doc["table"]
        assert root["source"] == "cherry"
        assert root["df"] == 30
        assert root["efficiency"] is None
        assert [child["df"] for child in root["children"]] == [1, 2, 27]

    def test_efficiency_encoding(self, cherry_table):
        doc = json.loads(render(cherry_table, "json").decode())
        trees = doc["table"]["children"][2]
        rootstocks = trees["children"][0]
        viruses = rootstocks["children"][0]
        assert viruses["efficiency"]["num"] == 1
        assert viruses["efficiency"]["den"] == 6
        assert viruses["efficiency"]["float"] == pytest.approx(1 / 6, abs=1e-9)

    def test_round_trip_parses(self, cherry_table):
        raw = render(cherry_table, "json")
        parsed = parse_table_json(raw)
        assert parsed["table"]["df"] == 30
        assert parsed == json.loads(raw.decode())

    def test_parse_rejects_missing_footnotes(self):
        with pytest.raises(RenderError, match="footnotes"):
            parse_table_json(json.dumps({"table": {}}))

    def test_parse_rejects_incomplete_node(self):
        doc = {"table": {"source": "x", "tier": "", "df": 1, "efficiency": None}, "footnotes": []}
        with pytest.raises(RenderError, match="missing 'children'"):
            parse_table_json(json.dumps(doc))


class TestDeterminism:
    def test_renders_are_byte_stable(self, design, built):
        d = design("grazing")
        res = built("grazing")
        for fmt in ("text", "csv", "json"):
            one = render(layout(res.decomposition, d.tier_order), fmt)
            two = render(layout(res.decomposition, d.tier_order), fmt)
            assert one == two

    def test_rebuild_gives_identical_bytes(self, design):
        from tierdecomp import build_decomposition, load_design
        from conftest import spec_path

        outputs = []
        for _ in range(2):
            d = load_design(spec_path("semilatin"))
            res = build_decomposition(d)
            outputs.append(render(layout(res.decomposition, d.tier_order), "csv"))
        assert outputs[0] == outputs[1]

    def test_unknown_format_rejected(self, cherry_table):
        with pytest.raises(RenderError, match="format"):
            render(cherry_table, "xml")
