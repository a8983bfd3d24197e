"""Tests for the brute-force oracle: spans, cross-checks, tamper detection."""

import dataclasses
import json
import types

import numpy as np
import pytest

from conftest import spec_path
from tierdecomp.oracle import (
    MatchReport,
    OracleError,
    _check_node,
    brute_all,
    brute_projectors,
    cross_check,
    orthonormal_basis,
)
from tierdecomp.projlin import EfficiencyValue


class TestOrthonormalBasis:
    def test_columns_are_orthonormal(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(8, 5))
        b = orthonormal_basis(x)
        assert b.shape == (8, 5)
        assert np.allclose(b.T @ b, np.eye(5), atol=1e-12)

    def test_span_is_preserved(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(10, 4))
        b = orthonormal_basis(x)
        # projecting the original columns onto the basis recovers them
        assert np.allclose(b @ (b.T @ x), x, atol=1e-10)

    def test_dependent_columns_dropped(self):
        v = np.array([1.0, 2.0, 3.0, 4.0])
        w = np.array([0.0, 1.0, 0.0, -1.0])
        x = np.column_stack([v, 2.0 * v, w, v + w])
        b = orthonormal_basis(x)
        assert b.shape == (4, 2)

    def test_zero_matrix_gives_empty_basis(self):
        b = orthonormal_basis(np.zeros((6, 3)))
        assert b.shape == (6, 0)


class TestBruteProjectors:
    def test_cherry_trees_tier(self, design):
        sources = brute_projectors(design("cherry"), "trees")
        named = {s.name: s for s in sources}
        assert set(named) == {"Mean", "Blocks", "Blocks^Trees"}
        assert named["Mean"].df == 1
        assert named["Blocks"].df == 2
        assert named["Blocks^Trees"].df == 27

    def test_bases_are_mutually_orthogonal(self, design):
        sources = brute_projectors(design("cherry"), "trees")
        for a in sources:
            assert np.allclose(a.basis.T @ a.basis, np.eye(a.df), atol=1e-10)
        for i, a in enumerate(sources):
            for b in sources[i + 1 :]:
                assert np.max(np.abs(a.basis.T @ b.basis)) < 1e-10

    def test_per_tier_df_totals(self, design):
        spans = brute_all(design("cherry"))
        totals = {t: sum(s.df for s in srcs) for t, srcs in spans.items()}
        # each tier spans the classes of its finest term, embedded in the units
        assert totals == {"trees": 30, "rootstocks": 10, "viruses": 5}

    def test_missing_column_raises(self, design):
        d = design("cherry")
        cols = {k: v for k, v in d.main.columns.items() if k != "Rootstocks"}
        fake = types.SimpleNamespace(
            spec=d.spec, main=types.SimpleNamespace(columns=cols), n=d.n,
            tier_order=d.tier_order,
        )
        with pytest.raises(OracleError, match="no unit-level data column 'Rootstocks'"):
            brute_projectors(fake, "rootstocks")
        # brute_all skips the tier it cannot span instead of failing
        spans = brute_all(fake)
        assert set(spans) == {"trees", "viruses"}


class TestCrossCheck:
    def test_cherry_matches(self, design):
        report = cross_check(design("cherry"))
        assert report.ok
        assert report.n == 30
        assert all(c.status == "ok" for c in report.checks)
        text = report.render_text()
        assert text.startswith("oracle check: cherry (n = 30")
        assert "verdict: MATCH (6 nodes)" in text

    def test_cherry_efficiencies_recovered(self, design):
        report = cross_check(design("cherry"))
        lams = {
            (c.node, source): engine
            for c in report.checks
            for source, engine, low, high in c.lambdas
        }
        key = ("Trees[Blocks] ▷ Rootstocks ▷ Viruses", "viruses:Viruses")
        assert lams[key] == pytest.approx(1.0 / 6.0)
        key = ("Trees[Blocks] ⊢ rootstocks ▷ Viruses", "viruses:Viruses")
        assert lams[key] == pytest.approx(5.0 / 6.0)

    def test_json_round_trip(self, design):
        report = cross_check(design("ex2_small"))
        payload = json.loads(report.render_json())
        assert set(payload) == {"design", "n", "tol", "match", "nodes"}
        assert payload["match"] is True
        assert set(payload["nodes"][0]) == {
            "node", "origin", "df_engine", "df_brute",
            "image_gap", "lambdas", "status", "message",
        }

    def test_unit_cap_enforced(self, design):
        with pytest.raises(OracleError, match="capped at 64"):
            cross_check(design("corn"))
        with pytest.raises(OracleError, match="capped at 10"):
            cross_check(design("ex2"), max_units=10)

    def test_cap_can_be_raised(self, design):
        report = cross_check(design("ex2"), max_units=24)
        assert report.ok


class TestTamperDetection:
    """A doctored decomposition must not come back clean."""

    def _cherry_parts(self, design, built):
        d = design("cherry")
        nodes = {n.label: n for n in built("cherry").decomposition.nodes}
        return nodes, brute_all(d)

    def test_wrong_efficiency_is_flagged(self, design, built):
        nodes, brute = self._cherry_parts(design, built)
        node = nodes["Trees[Blocks] ▷ Rootstocks ▷ Viruses"]
        doctored = tuple(
            dataclasses.replace(
                entry, efficiency=EfficiencyValue(value=5.0 / 6.0, rational=(5, 6))
            )
            if entry.efficiency is not None and entry.efficiency.rational == (1, 6)
            else entry
            for entry in node.lineage
        )
        assert doctored != node.lineage
        bad = dataclasses.replace(node, lineage=doctored)
        check = _check_node(bad, brute, tol=1e-7)
        assert check.status == "lambda"
        assert "Rayleigh" in check.message

    def test_missing_lineage_shows_df_gap(self, design, built):
        nodes, brute = self._cherry_parts(design, built)
        node = nodes["Trees[Blocks] ⊢ rootstocks ⊢ viruses"]
        bad = dataclasses.replace(node, lineage=())
        check = _check_node(bad, brute, tol=1e-7)
        # without the residual steps the replay keeps the whole 27-dim origin
        assert check.status == "df"
        assert check.df_brute == 27
        assert check.df_engine == 14

    def test_missing_spans_report_routing(self, design, built):
        nodes, brute = self._cherry_parts(design, built)
        node = nodes["Blocks"]
        check = _check_node(node, {}, tol=1e-7)
        assert check.status == "routing"
        assert "no brute spans" in check.message

    def test_mismatch_renders_as_such(self, design, built):
        nodes, brute = self._cherry_parts(design, built)
        node = nodes["Trees[Blocks] ⊢ rootstocks ⊢ viruses"]
        bad = dataclasses.replace(node, lineage=())
        report = MatchReport(design="cherry", n=30, tol=1e-7)
        report.checks.append(_check_node(bad, brute, tol=1e-7))
        assert not report.ok
        text = report.render_text()
        assert "FAIL" in text
        assert "verdict: MISMATCH" in text
        assert json.loads(report.render_json())["match"] is False
