import numpy as np
import pytest

from eventsleep.network import ModelConfig, init_params, is_buffer


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk():
    return ModelConfig.from_profile("desk")


def perturbed_params(cfg, seed=1, scale=0.1):
    """float64 params with non-trivial BN and bias values."""
    p = init_params(cfg, seed, np.float64)
    r = np.random.default_rng(seed)
    for k in p:
        if not is_buffer(k):
            p[k] = p[k] + scale * r.standard_normal(p[k].shape)
    return p


def random_rasters(rng, n, T, density=0.4):
    q = density / 2
    return rng.choice(np.array([-1, 0, 1], np.int8), size=(n, 2, T), p=[q, 1 - density, q])


# acceptance results, filled by tests/test_acceptance.py and printed once at the end
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}: {title} | {detail}")
