import numpy as np
import pytest

from layeredsim import pipeline as pl
from layeredsim.config import example_config_text, parse_config


def parking_config(**overrides):
    cfg = parse_config(example_config_text("parking"), "parking.yaml")
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture(scope="session")
def parking():
    """Everything up to value iteration for the built-in parking setup."""
    cfg = parking_config()
    model = pl.build_model(cfg)
    abstract, _ = pl.abstraction(cfg, model)
    dfa = pl.build_dfa(cfg)
    labeling = pl.build_labeling(cfg)
    relation, certs = pl.certify(cfg, model, abstract.grid.deviation_vertices())
    runs = pl.synthesize(cfg, model, abstract, dfa, labeling, relation)
    return {"cfg": cfg, "model": model, "abstract": abstract, "dfa": dfa, "labeling": labeling,
            "relation": relation, "certs": certs, "runs": runs}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance lines are collected here and repeated in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
