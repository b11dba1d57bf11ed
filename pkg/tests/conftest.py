import time

import numpy as np
import pytest

from stable_gate.data import generate_dataset
from stable_gate.harness import RunConfig, pretrain_base, run_experiment, ungated_config
from stable_gate.lora import LoraAdapter, init_adapter
from stable_gate.model import ModelConfig, Vocabulary, init_params

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion():
    """Record one pass/fail line; printed immediately and again in the summary."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary.default()


@pytest.fixture(scope="session")
def small_config(vocab):
    return ModelConfig(vocab.size, d_model=16, n_layers=2, n_heads=2, context_len=32)


@pytest.fixture(scope="session")
def small_params(small_config):
    return init_params(small_config, seed=3, std=0.3)


def random_adapter(config, rng, rank=2, alpha=4.0, std_a=0.3, std_b=0.3, targets=None):
    ad = init_adapter(config, rank, alpha, seed=int(rng.integers(2**31)), targets=targets)
    factors = {l: (rng.normal(0, std_a, A.shape), rng.normal(0, std_b, B.shape)) for l, (A, B) in ad.factors.items()}
    return LoraAdapter(factors, rank, alpha)


# the 12-run x 8-edit experiment at seed 53, shared by acceptance tests

@pytest.fixture(scope="session")
def exp_config():
    return RunConfig()


@pytest.fixture(scope="session")
def exp_dataset(exp_config):
    return generate_dataset(64, 2, seed=exp_config.seed)


@pytest.fixture(scope="session")
def exp_base(exp_config, exp_dataset):
    return pretrain_base(exp_config, exp_dataset)


@pytest.fixture(scope="session")
def gated_run(exp_config, exp_dataset, exp_base):
    t0 = time.perf_counter()
    records = run_experiment(exp_config, exp_dataset, exp_base)
    return records, time.perf_counter() - t0


@pytest.fixture(scope="session")
def ungated_records(exp_config, exp_dataset, exp_base):
    return run_experiment(ungated_config(exp_config), exp_dataset, exp_base)
