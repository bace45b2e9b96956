"""Generalized estimating equations with canonical links.

The estimating function is the Liang-Zeger score

    U(beta) = sum_i D_i' V_i^{-1} (Y_i - mu_i),   V_i = A_i^{1/2} R(alpha) A_i^{1/2},

with the logit link for Bernoulli responses and the log link for counts. The
dispersion is left out of ``V_i``; it rescales U, J and H by a common factor
and so has no effect on the root or on leave-one-out corrections.

For a canonical link ``D_i = A_i X_i`` and the contribution of subject i is

    u_i = X_i' diag(s) R^{-1} r,   s_j = sqrt(v(mu_j)),  r_j = (y_j - mu_j) / s_j,

so every entry of u_i is a sum of products of a function of eta_j and a
function of eta_k. That structure gives closed forms for the first and second
derivatives used by the leave-subject-out approximation.
"""

from __future__ import annotations

import warnings

import numpy as np

from ..data import CandidateSpec, ClusteredDataset, Family, WorkingCorrelation
from ..errors import DomainError, NonConvergenceWarning, SeparationSuspected
from .state import FitState

ETA_LIMIT = 30.0
_EINSUM = dict(optimize=True)


def _link_terms(family: Family, eta):
    """Mean, sqrt-variance ``s``, ``a = dlog s/deta`` and ``da/deta``."""
    if family is Family.GEE_BERNOULLI:
        mu = 1.0 / (1.0 + np.exp(-eta))
        v = mu * (1.0 - mu)
        return mu, np.sqrt(v), 0.5 - mu, -v
    mu = np.exp(eta)
    return mu, np.sqrt(mu), np.full_like(eta, 0.5), np.zeros_like(eta)


def mean_function(family: Family, eta):
    if family is Family.GEE_BERNOULLI:
        return 1.0 / (1.0 + np.exp(-eta))
    return np.exp(eta)


def working_correlation_matrix(kind: WorkingCorrelation, alpha: float, m: int) -> np.ndarray:
    if kind is WorkingCorrelation.INDEPENDENCE or m == 1:
        return np.eye(m)
    if kind is WorkingCorrelation.EXCHANGEABLE:
        return (1.0 - alpha) * np.eye(m) + alpha * np.ones((m, m))
    lag = np.abs(np.subtract.outer(np.arange(m), np.arange(m)))
    return alpha ** lag


def check_responses(family: Family, y) -> None:
    y = np.asarray(y)
    if family is Family.GEE_BERNOULLI:
        if np.any((y != 0) & (y != 1)):
            raise DomainError("Bernoulli GEE needs responses in {0, 1}")
    elif np.any((y < 0) | (y != np.round(y))):
        raise DomainError("Poisson GEE needs non-negative integer responses")


class _Design:
    """Candidate design stacked by cluster size."""

    def __init__(self, spec: CandidateSpec, data: ClusteredDataset):
        self.n = data.n
        self.q = spec.n_regressors
        self.blocks = [(g.index, spec.design(g.x), g.y) for g in data.groups]
        self.n_obs = data.n_obs

    def rinvs(self, kind, alpha):
        return [np.linalg.inv(working_correlation_matrix(kind, alpha, x.shape[1]))
                for _, x, _ in self.blocks]


def _pearson(family, design, beta):
    out = []
    for _, x, y in design.blocks:
        mu, s, _, _ = _link_terms(family, x @ beta)
        out.append((y - mu) / s)
    return out


def estimate_nuisance(spec: CandidateSpec, design: _Design, beta):
    """Moment estimates of the working correlation parameter and dispersion."""
    resid = _pearson(spec.family, design, beta)
    phi = sum(float(np.sum(e * e)) for e in resid) / design.n_obs
    kind = spec.working_correlation
    if kind is WorkingCorrelation.INDEPENDENCE or phi <= 0:
        return 0.0, phi
    num, pairs = 0.0, 0
    m_max = 1
    for e in resid:
        m = e.shape[1]
        m_max = max(m_max, m)
        if m < 2:
            continue
        if kind is WorkingCorrelation.EXCHANGEABLE:
            tot = e.sum(axis=1)
            num += float(np.sum((tot * tot - np.sum(e * e, axis=1)) / 2.0))
            pairs += e.shape[0] * m * (m - 1) // 2
        else:
            num += float(np.sum(e[:, 1:] * e[:, :-1]))
            pairs += e.shape[0] * (m - 1)
    if pairs == 0:
        return 0.0, phi
    alpha = num / (pairs * phi)
    if kind is WorkingCorrelation.EXCHANGEABLE:
        lo = -1.0 / (m_max - 1) + 1e-3 if m_max > 1 else -0.99
        alpha = float(np.clip(alpha, lo, 0.99))
    else:
        alpha = float(np.clip(alpha, -0.99, 0.99))
    return alpha, phi


def _score_and_information(family, design, beta, rinvs):
    q = design.q
    score = np.zeros(q)
    info = np.zeros((q, q))
    eta_max = 0.0
    for (_, x, y), rinv in zip(design.blocks, rinvs):
        eta = x @ beta
        eta_max = max(eta_max, float(np.max(np.abs(eta))) if eta.size else 0.0)
        mu, s, _, _ = _link_terms(family, eta)
        r = (y - mu) / s
        rr = r @ rinv.T
        score += np.einsum("gjq,gj->q", x, s * rr)
        w = s[:, :, None] * rinv[None] * s[:, None, :]
        info += np.einsum("gjq,gjk,gkp->qp", x, w, x, **_EINSUM)
    return score, info, eta_max


def _solve_score(family, design, beta, rinvs, tol=1e-10, max_iter=50):
    """Fisher scoring for U(beta) = 0 at a fixed working correlation."""
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        score, info, eta_max = _score_and_information(family, design, beta, rinvs)
        if eta_max > ETA_LIMIT:
            raise SeparationSuspected(f"|linear predictor| reached {eta_max:.1f}")
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        # cap wild first steps from poor starts
        big = np.max(np.abs(step))
        if big > 5.0:
            step *= 5.0 / big
        beta = beta + step
        if big < tol:
            converged = True
            break
    return beta, converged, it


def initial_beta(spec: CandidateSpec, design: _Design) -> np.ndarray:
    ybar = np.mean(np.concatenate([y.ravel() for _, _, y in design.blocks]))
    beta = np.zeros(design.q)
    if spec.family is Family.GEE_BERNOULLI:
        ybar = np.clip(ybar, 1e-3, 1 - 1e-3)
        beta[0] = np.log(ybar / (1 - ybar))
    else:
        beta[0] = np.log(max(ybar, 1e-3))
    return beta


def subject_derivatives(spec: CandidateSpec, data: ClusteredDataset, beta, alpha, order=2):
    """Per-subject u_i, J_i = -du_i/dbeta and H_i = dJ_i/dbeta at fixed alpha.

    Returns arrays of shape (n, q), (n, q, q) and (n, q, q, q); the last is
    ``None`` when ``order < 2``; the second is ``None`` when ``order < 1``.
    """
    design = _Design(spec, data)
    n, q = design.n, design.q
    u = np.zeros((n, q))
    jac = np.zeros((n, q, q)) if order >= 1 else None
    hes = np.zeros((n, q, q, q)) if order >= 2 else None
    rinvs = design.rinvs(spec.working_correlation, alpha)
    for (idx, x, y), rinv in zip(design.blocks, rinvs):
        eta = x @ beta
        mu, s, a, da = _link_terms(spec.family, eta)
        r = (y - mu) / s
        s1 = a * s
        r1 = -s - a * r
        rr = r @ rinv.T
        u[idx] = np.einsum("gjq,gj->gq", x, s * rr)
        if jac is None:
            continue
        m1 = np.einsum("gja,gj,gjb->gab", x, s1 * rr, x, **_EINSUM)
        b1 = s[:, :, None] * rinv[None] * r1[:, None, :]
        m2 = np.einsum("gja,gjk,gkb->gab", x, b1, x, **_EINSUM)
        jac[idx] = -(m1 + m2)
        if hes is None:
            continue
        s2 = (da + a * a) * s
        r2 = r * (a * a - da)
        t1 = np.einsum("gja,gjb,gjc,gj->gabc", x, x, x, s2 * rr, **_EINSUM)
        b2 = s1[:, :, None] * rinv[None] * r1[:, None, :]
        t2 = np.einsum("gja,gjb,gjk,gkc->gabc", x, x, b2, x, **_EINSUM)
        t2 = t2 + np.swapaxes(t2, 2, 3)
        b3 = s[:, :, None] * rinv[None] * r2[:, None, :]
        t3 = np.einsum("gja,gjk,gkb,gkc->gabc", x, b3, x, x, **_EINSUM)
        hes[idx] = -(t1 + t2 + t3)
    return u, jac, hes


def gee_score(spec: CandidateSpec, data: ClusteredDataset, beta, alpha) -> np.ndarray:
    """U(beta) at fixed working correlation; used by derivative checks."""
    design = _Design(spec, data)
    score, _, _ = _score_and_information(
        spec.family, design, np.asarray(beta, float), design.rinvs(spec.working_correlation, alpha))
    return score


def gee_fit(spec: CandidateSpec, data: ClusteredDataset, init=None,
            max_outer: int = 100, tol: float = 1e-8,
            nuisance: dict | None = None, derivatives: bool = True) -> FitState:
    """Fit a GEE candidate.

    Moment updates of the working correlation alternate with Fisher scoring
    for beta until successive betas differ by less than ``tol``. Derivatives
    are evaluated at the final beta with the working correlation frozen at
    the value used in the last scoring solve, so ``sum_i u_i`` vanishes to
    solver precision. Passing ``nuisance`` holds the working correlation
    fixed instead of re-estimating it. With ``derivatives=False`` only the
    per-subject scores are kept, which is all a refit needs.
    """
    if not spec.family.is_gee:
        raise ValueError(f"gee_fit cannot fit {spec.family}")
    check_responses(spec.family, data.y)
    design = _Design(spec, data)
    beta = initial_beta(spec, design) if init is None else np.array(init, dtype=float)
    kind = spec.working_correlation
    fixed = nuisance is not None
    if fixed:
        alpha = float(nuisance.get("alpha", 0.0))
        phi = float(nuisance.get("phi", 1.0))
    else:
        alpha, phi = 0.0, 1.0
        # independence solve gives the starting beta for the moment updates
        beta, _, _ = _solve_score(spec.family, design, beta, design.rinvs(kind, 0.0))
    converged = False
    n_iter = 0
    for n_iter in range(1, max_outer + 1):
        if not fixed:
            alpha, phi = estimate_nuisance(spec, design, beta)
        new, inner_ok, _ = _solve_score(spec.family, design, beta, design.rinvs(kind, alpha))
        delta = np.max(np.abs(new - beta)) if beta.size else 0.0
        beta = new
        if inner_ok and (delta < tol or fixed or kind is WorkingCorrelation.INDEPENDENCE):
            converged = True
            break
    if not converged:
        warnings.warn(f"GEE {spec.label} did not converge in {max_outer} outer iterations",
                      NonConvergenceWarning, stacklevel=2)
    if fixed:
        _, phi = estimate_nuisance(spec, design, beta)
    u, jac, hes = subject_derivatives(spec, data, beta, alpha, order=2 if derivatives else 0)
    return FitState(
        spec=spec,
        theta=beta,
        u_subject=u,
        j_subject=jac,
        h_subject=hes,
        jacobian=None if jac is None else jac.sum(axis=0),
        hessian_tensor=None if hes is None else hes.sum(axis=0),
        converged=converged,
        n_iter=n_iter,
        nuisance={"alpha": alpha, "phi": phi},
        flags=() if converged else ("nonconvergence",),
    )


def gee_predict(fit: FitState, x_new) -> np.ndarray:
    """Mean predictions ``m(x_j' beta)`` for covariate rows ``x_new``."""
    x_new = np.atleast_2d(np.asarray(x_new, dtype=float))
    return mean_function(fit.spec.family, fit.spec.design(x_new) @ fit.theta)


def sandwich_parts(fit: FitState, data: ClusteredDataset):
    """Model-based information, robust meat and independence information.

    Returns ``(info, meat, omega_indep)`` where the robust covariance is
    ``info^{-1} meat info^{-1}``; the dispersion is fixed at one.
    """
    spec = fit.spec
    design = _Design(spec, data)
    q = design.q
    info = np.zeros((q, q))
    omega = np.zeros((q, q))
    rinvs = design.rinvs(spec.working_correlation, fit.nuisance.get("alpha", 0.0))
    for (_, x, _), rinv in zip(design.blocks, rinvs):
        _, s, _, _ = _link_terms(spec.family, x @ fit.theta)
        w = s[:, :, None] * rinv[None] * s[:, None, :]
        info += np.einsum("gjq,gjk,gkp->qp", x, w, x, **_EINSUM)
        omega += np.einsum("gjq,gj,gjp->qp", x, s * s, x, **_EINSUM)
    meat = fit.u_subject.T @ fit.u_subject
    return info, meat, omega
