import numpy as np
import pytest

from ssmquant.model import ModelConfig, init_model


def random_gammas(model, seed=7):
    rng = np.random.default_rng(seed)
    m = model.copy()
    for p in m.blocks:
        p.norm_gamma = rng.uniform(0.5, 1.5, size=p.norm_gamma.shape)
    m.final_gamma = rng.uniform(0.5, 1.5, size=m.final_gamma.shape)
    return m


def random_orthogonal(m, seed):
    """Haar-distributed orthogonal matrix via QR with the sign convention fixed."""
    q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((m, m)))
    return q * np.sign(np.diag(r))


@pytest.fixture
def small_cfg():
    return ModelConfig(d_model=16, d_inner=32, d_state=8, d_conv=3, dt_rank=4, n_blocks=2, seed=3)


@pytest.fixture
def small_model(small_cfg):
    return init_model(small_cfg)


@pytest.fixture
def toy_cfg():
    return ModelConfig(d_model=64, d_inner=128, d_state=16, d_conv=4, dt_rank=4, n_blocks=4, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in RESULTS:
        terminalreporter.write_line(line)
