import numpy as np
import pytest

from wflab.traffic import SampleSet


def toy_samples(n_per_class=32, classes=2, window=64, seed=0, env=0, shift=0.0):
    """Gaussian windows whose class shifts the mean packet size (linearly separable)."""
    g = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), n_per_class)
    jitter = g.exponential(100.0, (labels.size, window)) * (1.0 + shift)
    sizes = 200.0 + 400.0 * labels[:, None] + g.normal(0, 30, (labels.size, window)) + 300.0 * shift
    values = np.empty((labels.size, 2 * window), np.float32)
    values[:, 0::2] = jitter
    values[:, 1::2] = sizes
    return SampleSet(values, labels, np.full(labels.size, env))


@pytest.fixture
def toy():
    return toy_samples


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
