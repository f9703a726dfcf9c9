"""Shared fixtures and helpers for the test suite."""
from pathlib import Path

import pytest

from slidecouncil import Query, load_config
from slidecouncil.backends import make_scripted_backend

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"

GOLDEN_QUESTION = (
    "What is the histological classification based on your examination of the slide?"
)


def scripted(script, **kwargs):
    """Shorthand for an inline offline chat backend."""
    return make_scripted_backend(script, **kwargs)


def classifier(script, **kwargs):
    kwargs.setdefault("id", "clf")
    return make_scripted_backend(script, kind="classifier", **kwargs)


@pytest.fixture
def golden_config():
    return load_config(FIXTURES / "golden" / "config.yaml")


@pytest.fixture
def golden_query():
    return Query(slide_ref="slide-001", question=GOLDEN_QUESTION)


@pytest.fixture
def bench_config():
    return load_config(FIXTURES / "bench" / "config.yaml")
