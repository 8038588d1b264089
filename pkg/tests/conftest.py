import numpy as np
import pytest

from tor_rlvr import policy as pl
from tor_rlvr import synthtask as st


@pytest.fixture(scope="session")
def small_task():
    return st.TaskConfig(grid_height=2, grid_width=3, alphabet_size=3, max_answer=6)


@pytest.fixture(scope="session")
def small_policy_config():
    return pl.PolicyConfig(d_model=8, n_layers=2, n_heads=2, d_ff=16, max_len=8, init_scale=0.5)


@pytest.fixture()
def small_params(small_policy_config, small_task):
    return pl.init_params(small_policy_config, small_task, seed=3)


@pytest.fixture()
def small_samples(small_task):
    return [st.generate_sample(100 + k, small_task) for k in range(3)]


@pytest.fixture()
def small_batch(small_params, small_samples):
    return pl.sample_rollouts(small_params, small_samples, 4, top_p=1.0, rng_seed=11)


def random_distribution(rng, v, peaked=False):
    z = rng.normal(scale=4.0 if peaked else 1.0, size=v)
    p = np.exp(z - z.max())
    return p / p.sum()


# one line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
