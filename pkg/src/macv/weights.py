"""Cross-validation weight criterion and its minimisation over the simplex.

With ``F`` the stacked leave-subject-out prediction matrix (N x S), the
criterion is ``C(w) = -2 sum Q(y, F w)``. For the smooth kernels it is convex
and differentiable in w and is minimised by projected gradient descent with
Barzilai-Borwein trial steps and Armijo backtracking. The check-loss
criterion is piecewise linear and is solved exactly as a linear program.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize, sparse

from .data import WeightVector
from .errors import DomainError, MaxItersReached
from .losses import LossKind, LossSpec, q_derivative, q_values


class Method(str, enum.Enum):
    PROJECTED_GRADIENT = "projected_gradient"
    FRANK_WOLFE = "frank_wolfe"


@dataclass(frozen=True)
class OptimizerConfig:
    tol: float = 1e-9
    max_iters: int = 5000
    method: Method = Method.PROJECTED_GRADIENT

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass(frozen=True)
class WeightFit:
    weights: WeightVector
    value: float
    n_iter: int = 0
    converged: bool = True

    def __iter__(self):
        # unpacks as (weights, value)
        return iter((self.weights, self.value))


def _matrix(cv):
    """Accept a CvPredictionMatrix or a bare (y, F) pair."""
    if isinstance(cv, tuple):
        y, f = cv
        return np.asarray(y, dtype=float).ravel(), np.atleast_2d(np.asarray(f, dtype=float))
    return cv.y, cv.loo


def _blend(f, w, loss):
    pred = f @ w
    if loss.kind is LossKind.POISSON and np.any(pred <= 0):
        raise DomainError("blended Poisson prediction is not positive")
    return pred


def criterion_values(y, f, w, loss: LossSpec) -> float:
    return float(-2.0 * np.sum(q_values(loss, y, _blend(f, w, loss))))


def criterion_cn(w, cv, loss: LossSpec) -> float:
    """``C_n(w) = -2 sum_i sum_j Q(y_ij, (F w)_ij)``."""
    y, f = _matrix(cv)
    return criterion_values(y, f, np.asarray(w, dtype=float), loss)


def criterion_gradient(w, cv, loss: LossSpec) -> np.ndarray:
    """Gradient of C_n in w (a subgradient for the check loss)."""
    y, f = _matrix(cv)
    w = np.asarray(w, dtype=float)
    return -2.0 * (f.T @ q_derivative(loss, y, _blend(f, w, loss)))


def simplex_project(v) -> WeightVector:
    """Euclidean projection onto the probability simplex (sort and threshold)."""
    return WeightVector(_project(np.asarray(v, dtype=float).ravel()))


def _project(v):
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    k = ind[u - css / ind > 0][-1]
    w = np.maximum(v - css[k - 1] / k, 0.0)
    # float drift in the threshold; renormalise the support
    return w / w.sum()


def _pgd(fun, grad, s, cfg):
    w = np.full(s, 1.0 / s)
    val = fun(w)
    g = grad(w)
    step = 1.0 / max(np.linalg.norm(g), 1e-12)
    for it in range(1, cfg.max_iters + 1):
        gap = float(g @ w - g.min())
        if gap <= cfg.tol * max(1.0, abs(val)):
            return w, val, it, True
        while True:
            cand = _project(w - step * g)
            d = cand - w
            cval = fun(cand)
            if cval <= val + 1e-4 * float(g @ d) or np.max(np.abs(d)) < 1e-16:
                break
            step *= 0.5
        if np.max(np.abs(d)) < 1e-16:
            return w, val, it, True
        gnew = grad(cand)
        sy = float(d @ (gnew - g))
        step = float(d @ d) / sy if sy > 1e-300 else step * 2.0
        step = min(max(step, 1e-12), 1e12)
        w, val, g = cand, cval, gnew
    return w, val, cfg.max_iters, False


def _frank_wolfe(fun, grad, s, cfg):
    w = np.full(s, 1.0 / s)
    val = fun(w)
    for it in range(1, cfg.max_iters + 1):
        g = grad(w)
        k = int(np.argmin(g))
        d = -w.copy()
        d[k] += 1.0
        gap = float(-(g @ d))
        if gap <= cfg.tol * max(1.0, abs(val)):
            return w, val, it, True
        # exact line search on [0, 1] by bounded scalar minimisation
        res = optimize.minimize_scalar(lambda t: fun(w + t * d), bounds=(0.0, 1.0),
                                       method="bounded", options={"xatol": 1e-12})
        t = float(res.x)
        if fun(w + t * d) <= val:
            w = w + t * d
            w = np.maximum(w, 0.0)
            w /= w.sum()
            val = fun(w)
    return w, val, cfg.max_iters, False


def _check_lp(y, f, alpha):
    """min_w sum rho_alpha(y - F w) over the simplex as a linear program."""
    n, s = f.shape
    c = np.concatenate([np.zeros(s), np.full(n, alpha), np.full(n, 1.0 - alpha)])
    eye = sparse.identity(n, format="csr")
    a_eq = sparse.vstack([
        sparse.hstack([sparse.csr_matrix(f), eye, -eye]),
        sparse.hstack([sparse.csr_matrix(np.ones((1, s))), sparse.csr_matrix((1, 2 * n))]),
    ]).tocsr()
    b_eq = np.concatenate([y, [1.0]])
    res = optimize.linprog(c, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        return None, res.nit
    return _project(res.x[:s]), res.nit


def minimize_weights(cv, loss: LossSpec, cfg: OptimizerConfig = OptimizerConfig()) -> WeightFit:
    """Minimise C_n over the simplex starting from uniform weights.

    The returned weights never do worse than uniform weights or any vertex.
    When every vertex gives the same criterion value (to 1e-12 relative),
    the uniform vector is returned.
    """
    y, f = _matrix(cv)
    s = f.shape[1]

    def fun(w):
        return criterion_values(y, f, w, loss)

    def grad(w):
        return -2.0 * (f.T @ q_derivative(loss, y, _blend(f, w, loss)))

    vertex_vals = np.array([fun(np.eye(s)[k]) for k in range(s)])
    uniform = np.full(s, 1.0 / s)
    u_val = fun(uniform)
    spread = float(vertex_vals.max() - vertex_vals.min())
    if s == 1 or spread <= 1e-12 * max(1.0, float(np.abs(vertex_vals).max())):
        # by convexity uniform is no worse than the tied vertices
        return WeightFit(WeightVector(uniform), u_val, 0, True)
    n_iter, ok = 0, True
    if loss.kind is LossKind.CHECK:
        w, n_iter = _check_lp(y, f, loss.alpha)
        if w is None:
            w, ok = uniform, False
    elif cfg.method is Method.FRANK_WOLFE:
        w, _, n_iter, ok = _frank_wolfe(fun, grad, s, cfg)
    else:
        w, _, n_iter, ok = _pgd(fun, grad, s, cfg)
    if not ok:
        warnings.warn(f"weight optimisation stopped after {n_iter} iterations",
                      MaxItersReached, stacklevel=2)
    val = fun(w)
    # descent guard against the start point and every vertex
    k = int(np.argmin(vertex_vals))
    if vertex_vals[k] < val:
        w, val = np.eye(s)[k], float(vertex_vals[k])
    if u_val < val:
        w, val = uniform, u_val
    return WeightFit(WeightVector(w), float(val), n_iter, ok)
