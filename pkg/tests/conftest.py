import numpy as np
import pytest

from macv.losses import q_values
from macv.data import CandidateSpec, ClusteredDataset, Family, WorkingCorrelation
from macv.simgen import Design1Config, gen_binary_ar1, gen_count_ar1


def binary_data(n=60, beta=(0.2, 0.4, -0.3), rho=0.3, m=4, seed=0):
    cfg = Design1Config(n=n, beta=beta, rho=rho, response="binary", cluster_size=m, seed=seed)
    return gen_binary_ar1(cfg).dataset


def count_data(n=60, beta=(0.2, 0.4, -0.3), rho=0.3, m=4, seed=0):
    cfg = Design1Config(n=n, beta=beta, rho=rho, response="count", cluster_size=m, seed=seed)
    return gen_count_ar1(cfg).dataset


def linear_data(n=30, p=2, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, p))
    y = 1.0 + x @ np.linspace(0.5, -0.5, p) + rng.standard_normal(n)
    return ClusteredDataset.from_arrays(y, x)


def ols_spec(data, covariates=None):
    cov = tuple(range(data.p)) if covariates is None else covariates
    return CandidateSpec(Family.SAR, cov, spatial_weights=np.zeros((data.n, data.n)))


def gee_spec(family="gee_bernoulli", cov=(0, 1), wc="ar1"):
    return CandidateSpec(Family(family), cov, working_correlation=WorkingCorrelation(wc))


def hat_loo(data):
    """Leave-one-out OLS predictions from the hat-matrix identity."""
    x = np.column_stack([np.ones(data.n), data.x])
    h = x @ np.linalg.solve(x.T @ x, x.T)
    fitted = h @ data.y
    e = data.y - fitted
    hii = np.diag(h)
    return fitted - hii * e / (1.0 - hii)


def random_instance(loss, n, s, rng):
    """Targets and candidate columns valid for ``loss``."""
    if loss == "bernoulli":
        p = rng.uniform(0.05, 0.95, n)
        y = (rng.random(n) < p).astype(float)
        f = np.clip(p[:, None] + 0.25 * rng.standard_normal((n, s)), 0.02, 0.98)
    elif loss == "poisson":
        mu = rng.uniform(0.5, 4, n)
        y = rng.poisson(mu).astype(float)
        f = mu[:, None] * np.exp(0.4 * rng.standard_normal((n, s)))
    else:
        y = rng.standard_normal(n)
        f = y[:, None] + rng.standard_normal((n, s)) * rng.uniform(0.5, 2, s)
    return y, f


def simplex_grid(step=0.01):
    """All points of the 3-simplex with coordinates on a ``step`` lattice."""
    k = int(round(1 / step))
    a, b = np.meshgrid(np.arange(k + 1), np.arange(k + 1), indexing="ij")
    keep = a + b <= k
    a, b = a[keep], b[keep]
    return np.column_stack([a, b, k - a - b]) / k


def grid_min(y, f, loss, step=0.01):
    """Exhaustive grid minimum of -2 sum Q(y, F w) over the 3-simplex."""
    g = simplex_grid(step)
    pred = f @ g.T
    return float(np.min(-2.0 * np.sum(q_values(loss, y[:, None], pred), axis=0)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# acceptance report: one line per criterion at the end of the session

ACCEPTANCE_LINES = {}


def record_criterion(key, passed, detail):
    ACCEPTANCE_LINES[key] = f"[{'PASS' if passed else 'FAIL'}] {key}: {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k.split()[1])):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
