"""Spatial autoregression ``Y = X beta + rho A Y + V`` by two-stage least squares.

Regressors are ``Z = [X, A Y]`` and instruments ``[X, A X, A^2 X]`` with
collinear columns removed. Writing ``Zhat = P_H Z`` for the projection onto
the instrument space, the normal equations are additive over units,

    U(theta) = sum_i zhat_i (y_i - z_i' theta),

so ``J = Zhat' Z`` and the second-derivative tensor vanishes.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy import linalg

from ..data import CandidateSpec, ClusteredDataset, Family
from ..errors import RankDeficientInstruments, UnstableRhoWarning
from .state import FitState

RHO_MARGIN = 1e-6


def _check(spec: CandidateSpec, data: ClusteredDataset):
    if spec.family is not Family.SAR:
        raise ValueError(f"sar_fit cannot fit {spec.family}")
    if np.any(data.sizes != 1):
        raise ValueError("SAR candidates need one observation per unit")
    if spec.spatial_weights.shape != (data.n, data.n):
        raise ValueError(
            f"spatial_weights is {spec.spatial_weights.shape}, dataset has {data.n} units")


def rho_interval(a: np.ndarray):
    """Open interval of rho keeping ``I - rho A`` invertible, shrunk by a margin."""
    eig = np.linalg.eigvals(a)
    real = eig.real[np.abs(eig.imag) < 1e-9 * max(1.0, np.max(np.abs(eig)))]
    lo_eig = real.min() if real.size else 0.0
    hi_eig = real.max() if real.size else 0.0
    lo = 1.0 / lo_eig + RHO_MARGIN if lo_eig < -1e-12 else -np.inf
    hi = 1.0 / hi_eig - RHO_MARGIN if hi_eig > 1e-12 else np.inf
    return lo, hi


def _instrument_basis(h: np.ndarray, need: int) -> np.ndarray:
    """Orthonormal basis for the column space of ``h``."""
    q, r, _ = linalg.qr(h, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0:
        rank = 0
    else:
        rank = int(np.sum(diag > diag[0] * 1e-10 * max(h.shape)))
    if rank < need:
        raise RankDeficientInstruments(f"instrument rank {rank} < {need} regressors")
    return q[:, :rank]


def _pinned(spatial_y: np.ndarray, y: np.ndarray) -> bool:
    return not np.any(spatial_y) or np.linalg.norm(spatial_y) <= 1e-13 * max(np.linalg.norm(y), 1.0)


def sar_fit(spec: CandidateSpec, data: ClusteredDataset) -> FitState:
    """2SLS fit; theta is ``(beta, rho)``.

    When ``A Y`` is identically zero rho is not identified; it is pinned at
    zero through the per-unit equation ``-rho``, which keeps J invertible and
    makes leave-one-out corrections leave it at zero.
    """
    _check(spec, data)
    a = spec.spatial_weights
    y = data.y
    x = spec.design(data.x)
    ay = a @ y
    p = x.shape[1]
    pinned = _pinned(ay, y)
    if pinned:
        z = x
        inst = x
    else:
        z = np.column_stack([x, ay])
        ax = a @ x
        inst = np.column_stack([x, ax, a @ ax])
    basis = _instrument_basis(inst, z.shape[1])
    zhat = basis @ (basis.T @ z)
    gram = zhat.T @ z
    try:
        coef = np.linalg.solve(gram, zhat.T @ y)
    except np.linalg.LinAlgError as exc:
        raise RankDeficientInstruments(str(exc)) from exc
    flags = []
    if pinned:
        beta, rho = coef, 0.0
    else:
        beta, rho = coef[:p], float(coef[p])
        lo, hi = rho_interval(a)
        if not lo < rho < hi:
            rho = float(np.clip(rho, lo, hi))
            # re-solve beta with rho held at the boundary
            xhat = zhat[:, :p]
            beta = np.linalg.solve(xhat.T @ x, xhat.T @ (y - rho * ay))
            flags.append("unstable_rho")
            warnings.warn(f"rho estimate clamped to {rho:.6g} for {spec.label}",
                          UnstableRhoWarning, stacklevel=2)
    theta = np.append(beta, rho)
    q = p + 1
    n = data.n
    u = np.zeros((n, q))
    jac = np.zeros((n, q, q))
    if pinned:
        resid = y - x @ beta
        u[:, :p] = zhat * resid[:, None]
        jac[:, :p, :p] = zhat[:, :, None] * x[:, None, :]
        u[:, p] = -rho
        jac[:, p, p] = 1.0
    else:
        resid = y - z @ theta
        u[:] = zhat * resid[:, None]
        jac[:] = zhat[:, :, None] * z[:, None, :]
    hes = np.zeros((n, q, q, q))
    sigma2 = float(np.sum(resid ** 2) / n)
    return FitState(
        spec=spec,
        theta=theta,
        u_subject=u,
        j_subject=jac,
        h_subject=hes,
        jacobian=jac.sum(axis=0),
        hessian_tensor=hes.sum(axis=0),
        converged=not flags,
        n_iter=1,
        nuisance={"rho": float(theta[-1]), "sigma2": sigma2, "rho_pinned": pinned},
        flags=tuple(flags),
    )


def sar_predict(fit: FitState, data: ClusteredDataset, theta=None) -> np.ndarray:
    """Working empirical BLUP ``x_i' beta + rho sum_j a_ij y_j`` for every unit."""
    theta = fit.theta if theta is None else np.asarray(theta, dtype=float)
    spec = fit.spec
    x = spec.design(data.x)
    return x @ theta[:-1] + theta[-1] * (spec.spatial_weights @ data.y)


def sar_score(spec: CandidateSpec, data: ClusteredDataset, theta, fit: FitState) -> np.ndarray:
    """U(theta) with the instrument projection of ``fit``; linear in theta."""
    return fit.u_subject.sum(axis=0) + fit.jacobian @ (fit.theta - np.asarray(theta, float))


def without_unit(spec: CandidateSpec, i: int) -> CandidateSpec:
    """The candidate with row and column ``i`` of its weight matrix deleted."""
    a = np.delete(np.delete(spec.spatial_weights, i, axis=0), i, axis=1)
    return CandidateSpec(Family.SAR, spec.covariates, spatial_weights=a,
                         intercept=spec.intercept, name=spec.name)
