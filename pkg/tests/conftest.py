import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def numeric_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar ``f`` w.r.t. array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        lp = f()
        flat[i] = orig - eps
        lm = f()
        flat[i] = orig
        gflat[i] = (lp - lm) / (2 * eps)
    return g


def rel_err(a, n):
    a, n = np.asarray(a, dtype=float), np.asarray(n, dtype=float)
    return float(np.max(np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_synth():
    from gdpnet.data import SynthConfig
    return SynthConfig(subjects=4, sentences=4, frames=12, N=42, blendshapes=3, seed=3)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_synth):
    from gdpnet.data import generate_synthetic_dataset, in_memory_dataset
    return in_memory_dataset(generate_synthetic_dataset(tiny_synth))


@pytest.fixture(scope="session")
def tiny_model_cfg():
    from gdpnet.model import ModelConfig
    return ModelConfig(latent_dim=8, base_filters=4, hidden=16, pca_rank=6)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(verdicts, key=lambda k: (int(k.rstrip("b")), k)):
        terminalreporter.write_line(verdicts[key])
