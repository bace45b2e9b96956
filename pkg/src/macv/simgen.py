"""Data generators with known truth and the evaluation metrics built on them.

Correlated binary clusters follow the conditional linear family: given the
previous response the next one is Bernoulli with mean

    lambda_j = p_j + rho sqrt(v_j / v_{j-1}) (Y_{j-1} - p_{j-1}),

which keeps the marginals at p_j and gives lag-k correlation rho^k.
Correlated counts use a Gaussian copula whose latent lag-one correlation is
calibrated per pair so the Pearson correlation of the counts equals rho.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .data import ClusteredDataset, Subject
from .errors import CalibrationFailure, DomainError, InfeasibleCorrelation, UnstableSystem, ZeroVariance
from .losses import LossKind, LossSpec, clip_probability

MAX_REJECTION_RATE = 0.01


class Response(str, enum.Enum):
    BINARY = "binary"
    COUNT = "count"


@dataclass(frozen=True)
class Design1Config:
    n: int
    beta: tuple
    rho: float = 0.0
    response: Response = Response.BINARY
    cluster_size: int = 4
    M: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "response", Response(self.response))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if len(self.beta) < 2:
            raise ValueError("beta needs an intercept and at least one slope")
        if self.n < 1 or self.cluster_size < 1 or self.M < 1:
            raise ValueError("n, cluster_size and M must be positive")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")

    @property
    def p(self) -> int:
        return len(self.beta) - 1


@dataclass(frozen=True, eq=False)
class TruthBundle:
    """A dataset with the true mean of every observation (stacked like ``dataset.y``).

    ``y0`` is an optional paired sample to be predicted and
    ``conditional_means`` its mean given the observed responses.
    """

    dataset: ClusteredDataset
    true_means: np.ndarray
    y0: np.ndarray | None = None
    conditional_means: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def per_subject(self):
        off = self.dataset.offsets
        return [self.true_means[off[i]:off[i + 1]] for i in range(self.dataset.n)]


def _rng(cfg, rng):
    return np.random.default_rng(cfg.seed) if rng is None else rng


def _to_dataset(y, x):
    n = y.shape[0]
    subjects = tuple(Subject(i, y[i], x[i]) for i in range(n))
    return ClusteredDataset(subjects, x.shape[2])


def _linear_predictor(cfg, x):
    beta = np.asarray(cfg.beta)
    return beta[0] + x @ beta[1:]


# ---------------------------------------------------------------------------
# binary

def binary_feasible(p: np.ndarray, rho: float) -> np.ndarray:
    """Clusters (rows of p) whose conditional means stay inside [0, 1]."""
    if rho == 0.0 or p.shape[1] < 2:
        return np.ones(p.shape[0], dtype=bool)
    v = p * (1.0 - p)
    ratio = rho * np.sqrt(v[:, 1:] / v[:, :-1])
    hi = p[:, 1:] + ratio * (1.0 - p[:, :-1])
    lo = p[:, 1:] - ratio * p[:, :-1]
    return np.all((hi <= 1.0) & (lo >= 0.0), axis=1)


def gen_binary_ar1(cfg: Design1Config, rng=None) -> TruthBundle:
    rng = _rng(cfg, rng)
    n, m, p = cfg.n, cfg.cluster_size, cfg.p
    x = rng.standard_normal((n, m, p))
    prob = special.expit(_linear_predictor(cfg, x))
    rejected = 0
    bad = ~binary_feasible(prob, cfg.rho)
    while bad.any():
        k = int(bad.sum())
        rejected += k
        # rate over all draws, with a floor so tiny designs are not judged on one cluster
        if rejected > MAX_REJECTION_RATE * max(n + rejected, 1000):
            raise InfeasibleCorrelation(
                f"{rejected} of {n + rejected} clusters violated the conditional mean bounds")
        idx = np.flatnonzero(bad)
        x[idx] = rng.standard_normal((k, m, p))
        prob[idx] = special.expit(_linear_predictor(cfg, x[idx]))
        bad[idx] = ~binary_feasible(prob[idx], cfg.rho)
    u = rng.random((n, m))
    y = np.zeros((n, m))
    y[:, 0] = u[:, 0] < prob[:, 0]
    v = prob * (1.0 - prob)
    for j in range(1, m):
        lam = prob[:, j] + cfg.rho * np.sqrt(v[:, j] / v[:, j - 1]) * (y[:, j - 1] - prob[:, j - 1])
        y[:, j] = u[:, j] < lam
    return TruthBundle(_to_dataset(y, x), prob.ravel(), info={"rejected_clusters": rejected})


# ---------------------------------------------------------------------------
# counts

def _hermite_coefficients(mu: np.ndarray, order: int) -> np.ndarray:
    """``a_k / sqrt(k!)`` for the Poisson(mu) quantile transform of N(0, 1).

    With ``Y = sum_m 1{Z > c_m}`` and ``c_m = Phi^{-1}(F(m))`` one has
    ``E[Y He_k(Z)] = sum_m phi(c_m) He_{k-1}(c_m)``. Returns shape
    ``(len(mu), order)`` for k = 1..order.
    """
    mu = np.asarray(mu, dtype=float)
    top = int(stats.poisson.ppf(1.0 - 1e-16, mu.max())) + 5
    grid = np.arange(top + 1)
    cdf = stats.poisson.cdf(grid[None, :], mu[:, None])
    c = stats.norm.ppf(np.clip(cdf, 0.0, 1.0 - 1e-16))
    phi = stats.norm.pdf(c)
    phi[cdf >= 1.0 - 1e-16] = 0.0
    c = np.where(np.isfinite(c), c, 0.0)
    out = np.zeros((mu.size, order))
    h_prev = np.zeros_like(c)
    h = np.ones_like(c)                  # normalised He_0
    for k in range(1, order + 1):
        out[:, k - 1] = np.sum(phi * h, axis=1) / math.sqrt(k)
        # normalised recurrence h_k = (c h_{k-1} - sqrt(k-1) h_{k-2}) / sqrt(k)
        h, h_prev = (c * h - math.sqrt(k - 1) * h_prev) / math.sqrt(k), h
    return out


def copula_correlation(r, mu1, mu2, order: int = 60) -> np.ndarray:
    """Pearson correlation of two Poisson margins under latent correlation r."""
    a = _hermite_coefficients(np.atleast_1d(mu1), order)
    b = _hermite_coefficients(np.atleast_1d(mu2), order)
    r = np.atleast_1d(np.asarray(r, dtype=float))
    powers = r[:, None] ** np.arange(1, order + 1)[None, :]
    cov = np.sum(powers * a * b, axis=1)
    return cov / np.sqrt(np.atleast_1d(mu1) * np.atleast_1d(mu2))


def calibrate_latent(rho: float, mu1, mu2, order: int = 30, iters: int = 50,
                     r_max: float = 0.95) -> np.ndarray:
    """Latent correlations giving count correlation ``rho`` by vectorised bisection.

    The search runs over ``[0, r_max]``; the truncated series is a lower bound
    on the correlation there, so a target it cannot reach raises
    CalibrationFailure rather than returning a wrong root.
    """
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=float))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=float))
    if rho == 0.0:
        return np.zeros(mu1.size)
    a = _hermite_coefficients(mu1, order)
    b = _hermite_coefficients(mu2, order)
    return _bisect_latent(rho, a * b / np.sqrt(mu1 * mu2)[:, None], iters, r_max)


def _bisect_latent(rho, coef, iters, r_max):
    k = np.arange(1, coef.shape[1] + 1)[None, :]

    def corr(r):
        return np.sum(r[:, None] ** k * coef, axis=1)

    hi = np.full(coef.shape[0], r_max)
    top = corr(hi)
    if np.any(top < rho):
        raise CalibrationFailure(f"count correlation {rho} unreachable (max {top.min():.3f})")
    lo = np.zeros(coef.shape[0])
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = corr(mid) < rho
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def gen_count_ar1(cfg: Design1Config, rng=None) -> TruthBundle:
    rng = _rng(cfg, rng)
    n, m, p = cfg.n, cfg.cluster_size, cfg.p
    x = rng.standard_normal((n, m, p))
    mu = np.exp(_linear_predictor(cfg, x))
    eps = rng.standard_normal((n, m))
    if cfg.rho == 0.0 or m == 1:
        z = eps
    else:
        # coefficients once per observation, shared by its two neighbouring pairs
        h = _hermite_coefficients(mu.ravel(), 30).reshape(n, m, -1)
        coef = h[:, :-1] * h[:, 1:] / np.sqrt(mu[:, :-1] * mu[:, 1:])[..., None]
        r = _bisect_latent(cfg.rho, coef.reshape(n * (m - 1), -1), 50, 0.95).reshape(n, m - 1)
        z = np.empty((n, m))
        z[:, 0] = eps[:, 0]
        for j in range(1, m):
            z[:, j] = r[:, j - 1] * z[:, j - 1] + np.sqrt(1.0 - r[:, j - 1] ** 2) * eps[:, j]
    u = stats.norm.cdf(z)
    y = stats.poisson.ppf(u, mu)
    return TruthBundle(_to_dataset(y, x), mu.ravel())


# ---------------------------------------------------------------------------
# spatial and quantile designs

def gen_sar(n, rho0, A0, eta0, sigma, seed, x=None) -> TruthBundle:
    """Draw ``Y = rho0 A0 Y + eta0 + V`` and ``Y0 = eta0 + rho0 A0 Y + V0``.

    ``true_means`` is ``eta0 + rho0 A0 E(Y)``; ``conditional_means`` is the
    BLUP ``E(Y0 | Y) = eta0 + rho0 A0 Y``. ``x`` supplies the covariates
    stored in the dataset (none by default).
    """
    a = np.asarray(A0, dtype=float)
    eta = np.asarray(eta0, dtype=float).ravel()
    if a.shape != (n, n) or eta.shape != (n,):
        raise ValueError("A0 must be n x n and eta0 length n")
    radius = float(np.max(np.abs(np.linalg.eigvals(rho0 * a)))) if n else 0.0
    if radius >= 1.0:
        raise UnstableSystem(f"spectral radius of rho0 A0 is {radius:.4f}")
    rng = np.random.default_rng(seed)
    system = np.eye(n) - rho0 * a
    v = sigma * rng.standard_normal(n)
    v0 = sigma * rng.standard_normal(n)
    y = np.linalg.solve(system, eta + v)
    ey = np.linalg.solve(system, eta)
    truth = eta + rho0 * (a @ ey)
    cond = eta + rho0 * (a @ y)
    x = np.zeros((n, 0)) if x is None else np.asarray(x, dtype=float).reshape(n, -1)
    data = ClusteredDataset.from_arrays(y, x)
    return TruthBundle(data, truth, y0=cond + v0, conditional_means=cond)


def gen_quantile(n, beta, alpha, seed, hetero=0.5) -> TruthBundle:
    """Linear location model with scale ``1 + hetero |x_1|`` and a paired Y0.

    ``true_means`` holds the true alpha-quantiles.
    """
    rng = np.random.default_rng(seed)
    beta = np.asarray(beta, dtype=float)
    x = rng.standard_normal((n, beta.size - 1))
    loc = beta[0] + x @ beta[1:]
    scale = 1.0 + hetero * np.abs(x[:, 0])
    y = loc + scale * rng.standard_normal(n)
    y0 = loc + scale * rng.standard_normal(n)
    q = loc + scale * stats.norm.ppf(alpha)
    return TruthBundle(ClusteredDataset.from_arrays(y, x), q, y0=y0)


# ---------------------------------------------------------------------------
# metrics

def metric_gamma_hat(losses) -> float:
    """Average pairwise covariance of candidate losses over the squared mean sd."""
    losses = np.asarray(losses, dtype=float)
    m, s = losses.shape
    if m < 2 or s < 2:
        raise ValueError("need at least two replications and two candidates")
    cov = np.cov(losses, rowvar=False, ddof=1)
    sd = np.sqrt(np.diag(cov))
    if np.all(sd == 0):
        raise ZeroVariance("every candidate loss is constant across replications")
    off = (np.sum(cov) - np.trace(cov)) / 2.0
    return float(2.0 * off / (s * (s - 1) * (sd.sum() / s) ** 2))


def metric_lbar(losses) -> float:
    losses = np.asarray(losses, dtype=float)
    if losses.size == 0:
        raise ValueError("empty loss matrix")
    return float(losses.mean())


def divergence(loss: LossSpec, truth, pred) -> np.ndarray:
    """Per-observation ``-2 {Q(f0, f) - Q(f0, f0)}`` against the true means."""
    f0 = np.asarray(truth, dtype=float)
    f = np.asarray(pred, dtype=float)
    kind = loss.kind
    if kind is LossKind.BERNOULLI:
        f = clip_probability(f)
        g = clip_probability(f0)
        return 2.0 * (g * (np.log(g) - np.log(f)) + (1 - g) * (np.log1p(-g) - np.log1p(-f)))
    if kind is LossKind.POISSON:
        if np.any(f <= 0):
            raise DomainError("Poisson predictions must be positive")
        return 2.0 * (special.xlogy(f0, f0) - special.xlogy(f0, f) + f - f0)
    if kind is LossKind.SQUARED:
        return (f0 - f) ** 2
    raise ValueError("the check loss has no closed-form truth divergence; use empirical_check_loss")


def scaled_loss(loss: LossSpec, truth: TruthBundle, predictions, per: str = "observation") -> float:
    """``10 L_n`` divided by the number of observations (``per="observation"``)
    or of subjects (``per="subject"``); the two agree when every n_i is one.
    """
    total = float(np.sum(divergence(loss, truth.true_means, predictions)))
    data = truth.dataset
    denom = data.n_obs if per == "observation" else data.n
    if per not in ("observation", "subject"):
        raise ValueError(f"unknown scaling {per!r}")
    return 10.0 * total / denom


def empirical_check_loss(y0, truth, pred, alpha, n=None) -> float:
    """Scaled empirical check-loss regret on a paired sample ``y0``."""
    y0 = np.asarray(y0, dtype=float)

    def rho(d):
        return d * (alpha - (d <= 0))

    n = y0.size if n is None else n
    return 10.0 * float(np.sum(rho(y0 - np.asarray(pred)) - rho(y0 - np.asarray(truth)))) / n


def _bernoulli_empirical(y, mu, n_test):
    mu = np.asarray(mu, dtype=float)
    if np.any((mu <= 0) | (mu >= 1)):
        raise DomainError("predicted probabilities must lie strictly inside (0, 1)")
    return float(-2.0 / n_test * np.sum(y * np.log(mu / (1 - mu)) + np.log1p(-mu)))


def empirical_loss_case_study(test, method_pred, candidate_preds) -> float:
    """Method's empirical Bernoulli loss on ``test`` minus the best candidate's.

    ``test`` is a ClusteredDataset (or a (y, n_subjects) pair);
    ``candidate_preds`` has one column per candidate.
    """
    if isinstance(test, ClusteredDataset):
        y, n_test = test.y, test.n
    else:
        y, n_test = np.asarray(test[0], dtype=float), int(test[1])
    cand = np.asarray(candidate_preds, dtype=float)
    if cand.ndim == 1:
        cand = cand[:, None]
    best = min(_bernoulli_empirical(y, cand[:, s], n_test) for s in range(cand.shape[1]))
    return _bernoulli_empirical(y, method_pred, n_test) - best
