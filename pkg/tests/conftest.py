"""Shared fixtures: the shipped design bundles and their built decompositions."""

from pathlib import Path

import pytest

from tierdecomp import build_decomposition, load_design

DESIGNS = Path(__file__).resolve().parent.parent / "designs"

ALL_SPECS = sorted(p.stem for p in DESIGNS.glob("*.spec"))
# uneven is the engineered incoherent layout; everything else builds cleanly
COHERENT = [name for name in ALL_SPECS if name != "uneven"]
SMALL = [name for name in COHERENT if name != "corn"]  # n <= 64

_designs: dict = {}
_builds: dict = {}


def spec_path(name: str) -> Path:
    return DESIGNS / f"{name}.spec"


@pytest.fixture(scope="session")
def design():
    """Loader for a shipped design bundle, cached per session."""

    def inner(name):
        if name not in _designs:
            _designs[name] = load_design(spec_path(name))
        return _designs[name]

    return inner


@pytest.fixture(scope="session")
def built(design):
    """Built decomposition (BuildResult) for a shipped design, cached."""

    def inner(name):
        if name not in _builds:
            _builds[name] = build_decomposition(design(name))
        return _builds[name]

    return inner
