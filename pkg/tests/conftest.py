import numpy as np
import pytest

from tatu.dynamics import EnsembleConfig, train_ensemble
from tatu.envs import Dataset


def continuous_descriptor(state_dim, action_dim, action_bound=1.0):
    return {"env_id": "planted-v0", "kind": "continuous", "state_dim": state_dim, "action_dim": action_dim,
            "action_bound": action_bound, "params": {}}


def planted_linear_dataset(n=5000, seed=0, noise=0.0):
    """``s' = s + B a`` (plus optional Gaussian noise) on uniform (s, a)."""
    rng = np.random.default_rng(seed)
    B = np.array([[0.5, 0.0], [0.0, 0.3], [0.2, -0.1]])
    s = rng.uniform(-1, 1, size=(n, 3))
    a = rng.uniform(-1, 1, size=(n, 2))
    sn = s + a @ B.T + noise * rng.standard_normal((n, 3))
    return Dataset(s, a, np.zeros(n), sn, np.zeros(n, bool), continuous_descriptor(3, 2)), B


@pytest.fixture(scope="session")
def planted():
    return planted_linear_dataset()


@pytest.fixture(scope="session")
def planted_ensemble(planted):
    ds, _ = planted
    cfg = EnsembleConfig(hidden=(32, 32), epochs=30, validation_size=500)
    return train_ensemble(ds, cfg, seed=0)


ACCEPTANCE = {}


def record(criterion, ok, detail):
    """Store one acceptance verdict for the end-of-run summary."""
    ACCEPTANCE[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
