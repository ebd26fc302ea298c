import math

import pytest
import torch

from survival_benchmarks.data.ehr_data import build_vocabulary
from survival_benchmarks.data.synth import SynthConfig, generate
from survival_benchmarks.transformer.model_core import ModelConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale acceptance test, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def float64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def small_synth_config():
    return SynthConfig(n_patients=120, seed=3, n_background_codes=6, background_prevalence=0.3,
                       mean_visits=3.0, risk_codes=[["D_R1", 0.5, math.log(4.0)], ["M_R2", 0.3, math.log(2.0)]])


@pytest.fixture
def small_cohort(small_synth_config):
    cohort, _ = generate(small_synth_config)
    return cohort


@pytest.fixture
def small_vocab(small_cohort):
    return build_vocabulary(small_cohort)


@pytest.fixture
def tiny_model_config(small_vocab):
    return ModelConfig(vocab_size=len(small_vocab), n_layers=2, hidden_size=12, n_heads=3, intermediate_size=10,
                       pooler_size=8, ode_hidden_size=6, max_age_months=1320, max_visits=64,
                       hidden_dropout=0.1, attention_dropout=0.1)
