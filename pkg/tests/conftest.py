import numpy as np
import pytest

from disir.models import LinearGaussianProposal, PpcaModel


@pytest.fixture
def small_ppca():
    """Dz=3, Dx=4 PPCA instance, one observation and a matched proposal."""
    rng = np.random.default_rng(11)
    m = PpcaModel(rng.normal(size=4), rng.normal(scale=0.6, size=(3, 4)))
    x = m.sample(1, rng)[0]
    return m, x, LinearGaussianProposal.matched(m)


def central_diff(f, p, h=1e-6):
    p = np.asarray(p, dtype=float)
    g = np.empty_like(p)
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = h
        g[i] = (f(p + e) - f(p - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)
