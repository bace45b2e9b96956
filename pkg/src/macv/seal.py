"""Second-order approximated leave-subject-out estimates and CV prediction matrices.

For a fit with estimating function ``U = sum_i u_i``, Jacobian ``J = -dU/dtheta``
and tensor ``H = dJ/dtheta``, dropping subject i and expanding to second order
around the full-data root gives, in ``delta = theta_hat - theta``,

    psi_i(delta) = -u_i + J_[-i] delta - H_[-i][delta, delta] / 2.

Its Jacobian in delta is ``Jt = J_[-i] - H_[-i] . delta`` and the Newton step
is ``delta <- delta - Jt^{-1} psi``. All subjects are iterated together as a
batch; cells whose Newton path fails fall back to a conventional refit.
"""

from __future__ import annotations

import enum
import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import ClusteredDataset, Family
from .errors import CvCellError, MacvError, NoProgress, SealFallbackWarning, SingularJacobian
from .estimators import FitState, predict, predict_per_subject, refit_without
from .losses import BERNOULLI_CLIP

log = logging.getLogger(__name__)

COND_LIMIT = 1e12


class InverseMode(str, enum.Enum):
    EXACT_SOLVE = "exact"
    SECOND_ORDER = "second_order"


class CvMode(str, enum.Enum):
    SEAL = "seal"
    CONVENTIONAL = "conventional"


@dataclass(frozen=True)
class SealConfig:
    max_newton_iters: int = 20
    tol: float = 1e-10
    inverse_mode: InverseMode = InverseMode.SECOND_ORDER
    refit_nuisance: str = "reestimate"

    def __post_init__(self):
        object.__setattr__(self, "inverse_mode", InverseMode(self.inverse_mode))
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_newton_iters < 1:
            raise ValueError("max_newton_iters must be at least 1")
        if self.refit_nuisance not in ("reestimate", "frozen"):
            raise ValueError(f"unknown refit_nuisance {self.refit_nuisance!r}")


@dataclass
class SealBatch:
    """Result of solving the surrogate equation for a set of subjects."""

    subjects: np.ndarray
    thetas: np.ndarray          # (k, q)
    status: np.ndarray          # (k,) of "ok", "maxiter", "no_progress", "singular"
    n_iter: np.ndarray
    psi_norm: np.ndarray
    history: list = field(default_factory=list)   # per-iteration ||psi||_inf, (k,) each


def _hdot(h, delta):
    """``H . delta`` contracting the last index: (k,q,q,q),(k,q) -> (k,q,q)."""
    return np.einsum("kabc,kc->kab", h, delta)


def _psi(u, jm, hm, delta):
    hd = _hdot(hm, delta)
    return -u + np.einsum("kab,kb->ka", jm, delta) - 0.5 * np.einsum("kab,kb->ka", hd, delta), hd


def _full_inverse(fit: FitState):
    j = fit.jacobian
    try:
        cond = np.linalg.cond(j)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularJacobian(f"Jacobian of {fit.spec.label} has condition number {cond:.3g}")
    return np.linalg.inv(j)


def seal_batch(fit: FitState, cfg: SealConfig = SealConfig(), subjects=None,
               keep_history: bool = False) -> SealBatch:
    """Solve the surrogate leave-out equation for every subject in ``subjects``.

    Iterates stop per subject when ``||psi||_inf < tol * max(1, ||u_i||_inf)``
    or when the Newton step stops moving delta at working precision.
    """
    if not fit.smooth:
        raise ValueError(f"{fit.spec.label} carries no derivatives; use conventional refits")
    n = fit.u_subject.shape[0]
    subjects = np.arange(n) if subjects is None else np.asarray(subjects, dtype=int)
    k, q = subjects.size, fit.q
    jinv = _full_inverse(fit)
    u = fit.u_subject[subjects]
    jm = fit.jacobian[None] - fit.j_subject[subjects]
    hm = fit.hessian_tensor[None] - fit.h_subject[subjects]
    delta = np.zeros((k, q))
    status = np.full(k, "maxiter", dtype=object)
    n_iter = np.zeros(k, dtype=int)
    active = np.ones(k, dtype=bool)
    scale = cfg.tol * np.maximum(1.0, np.max(np.abs(u), axis=1))
    step_floor = 1e-14 * max(1.0, float(np.max(np.abs(fit.theta))))
    best = np.full(k, np.inf)
    stall = np.zeros(k, dtype=int)
    history = []
    psi_norm = np.full(k, np.inf)
    for it in range(cfg.max_newton_iters + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        psi, hd = _psi(u[idx], jm[idx], hm[idx], delta[idx])
        norm = np.max(np.abs(psi), axis=1)
        psi_norm[idx] = norm
        if keep_history:
            rec = np.full(k, np.nan)
            rec[idx] = norm
            history.append(rec)
        done = norm < scale[idx]
        status[idx[done]] = "ok"
        # non-decrease counter for the progress guard
        worse = norm >= best[idx]
        stall[idx] = np.where(worse, stall[idx] + 1, 0)
        best[idx] = np.minimum(best[idx], norm)
        stuck = ~done & (stall[idx] >= 3)
        status[idx[stuck]] = "no_progress"
        active[idx[done | stuck]] = False
        if it == cfg.max_newton_iters:
            break
        keep = ~(done | stuck)
        idx, psi, hd = idx[keep], psi[keep], hd[keep]
        if idx.size == 0:
            break
        jt = jm[idx] - hd
        if cfg.inverse_mode is InverseMode.EXACT_SOLVE:
            step = np.zeros_like(psi)
            try:
                step = np.linalg.solve(jt, psi[..., None])[..., 0]
            except np.linalg.LinAlgError:
                bad = []
                for r in range(idx.size):
                    try:
                        step[r] = np.linalg.solve(jt[r], psi[r])
                    except np.linalg.LinAlgError:
                        bad.append(r)
                if bad:
                    status[idx[bad]] = "singular"
                    active[idx[bad]] = False
                    ok = np.setdiff1d(np.arange(idx.size), bad)
                    idx, step = idx[ok], step[ok]
        else:
            # Jt^{-1} ~ J^{-1} + J^{-1} (J - Jt) J^{-1}
            z = psi @ jinv.T
            corr = np.einsum("kab,kb->ka", fit.jacobian[None] - jt, z)
            step = z + corr @ jinv.T
        delta[idx] -= step
        n_iter[idx] = it + 1
        small = np.max(np.abs(step), axis=1) <= step_floor
        if np.any(small):
            status[idx[small]] = "ok"
            active[idx[small]] = False
    thetas = fit.theta[None] - delta
    return SealBatch(subjects, thetas, status, n_iter, psi_norm, history)


def seal_loo(fit: FitState, i: int, cfg: SealConfig = SealConfig()) -> np.ndarray:
    """Approximate leave-subject-``i``-out parameter vector."""
    res = seal_batch(fit, cfg, [i])
    if res.status[0] == "singular":
        raise SingularJacobian(f"surrogate Jacobian singular for subject {i}")
    if res.status[0] == "no_progress":
        raise NoProgress(f"surrogate residual stalled at {res.psi_norm[0]:.3g} for subject {i}")
    return res.thetas[0]


# ---------------------------------------------------------------------------
# CV prediction matrix

@dataclass
class CvPredictionMatrix:
    """Leave-subject-out and in-sample predictions for S candidates.

    Predictions are stacked by observation (``N = sum_i n_i`` rows) with one
    column per candidate; ``offsets`` maps subjects to rows. ``modes[i, s]``
    records how cell (i, s) was produced: ``seal``, ``conventional`` or
    ``fallback`` (SEAL attempted, conventional refit used).
    """

    y: np.ndarray
    loo: np.ndarray
    in_sample: np.ndarray
    modes: np.ndarray
    offsets: np.ndarray
    labels: tuple
    families: tuple
    seconds: float = 0.0
    loo_thetas: list | None = None

    @property
    def n(self) -> int:
        return self.offsets.shape[0] - 1

    @property
    def S(self) -> int:
        return self.loo.shape[1]

    def subject_rows(self, i) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def mode_counts(self) -> dict:
        vals, counts = np.unique(self.modes.astype(str), return_counts=True)
        return {str(v): int(c) for v, c in zip(vals, counts)}


def _clip(family: Family, f):
    if family is Family.GEE_BERNOULLI:
        return np.clip(f, BERNOULLI_CLIP, 1.0 - BERNOULLI_CLIP)
    return f


def _conventional_thetas(fit, data, subjects, cfg, s):
    out = np.zeros((len(subjects), fit.q))
    for r, i in enumerate(subjects):
        try:
            out[r] = refit_without(fit.spec, data, int(i), fit, cfg.refit_nuisance).theta
        except MacvError as exc:
            raise CvCellError(s, int(i), exc) from exc
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise CvCellError(s, int(i), exc) from exc
    return out


def _column(s, fit, data, cfg, mode):
    n = data.n
    modes = np.full(n, CvMode.CONVENTIONAL.value, dtype=object)
    use_seal = mode is CvMode.SEAL and fit.smooth
    if use_seal:
        try:
            res = seal_batch(fit, cfg)
            thetas = res.thetas
            failed = np.flatnonzero(np.isin(res.status, ("no_progress", "singular")))
        except SingularJacobian:
            thetas = np.tile(fit.theta, (n, 1))
            failed = np.arange(n)
        modes[:] = CvMode.SEAL.value
        if failed.size:
            warnings.warn(f"{fit.spec.label}: {failed.size} SEAL cells fell back to refits",
                          SealFallbackWarning, stacklevel=3)
            thetas[failed] = _conventional_thetas(fit, data, failed, cfg, s)
            modes[failed] = "fallback"
    else:
        thetas = _conventional_thetas(fit, data, np.arange(n), cfg, s)
    loo = predict_per_subject(fit.spec, data, thetas)
    if not np.all(np.isfinite(loo)):
        bad = int(np.flatnonzero(~np.isfinite(loo))[0])
        i = int(np.searchsorted(data.offsets, bad, side="right") - 1)
        raise CvCellError(s, i, ValueError("non-finite leave-out prediction"))
    return _clip(fit.spec.family, loo), thetas, modes


def build_cv_matrix(fits, data: ClusteredDataset, cfg: SealConfig = SealConfig(),
                    mode=CvMode.SEAL, threads: int = 1) -> CvPredictionMatrix:
    """Fill the n x S leave-subject-out prediction matrix.

    Quantile-regression candidates always use conventional refits. ``seconds``
    is the wall-clock time spent building the leave-out columns; in-sample
    predictions are excluded.
    """
    mode = CvMode(mode)
    fits = list(fits)
    if not fits:
        raise ValueError("need at least one fitted candidate")
    start = time.perf_counter()
    if threads > 1 and len(fits) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cols = list(pool.map(lambda a: _column(a[0], a[1], data, cfg, mode), enumerate(fits)))
    else:
        cols = [_column(s, f, data, cfg, mode) for s, f in enumerate(fits)]
    seconds = time.perf_counter() - start
    in_sample = np.column_stack([_clip(f.spec.family, predict(f, data)) for f in fits])
    log.debug("cv matrix: S=%d n=%d mode=%s %.3fs", len(fits), data.n, mode.value, seconds)
    return CvPredictionMatrix(
        y=np.array(data.y),
        loo=np.column_stack([c[0] for c in cols]),
        in_sample=in_sample,
        modes=np.column_stack([c[2] for c in cols]),
        offsets=np.array(data.offsets),
        labels=tuple(f.spec.label for f in fits),
        families=tuple(f.spec.family for f in fits),
        seconds=seconds,
        loo_thetas=[c[1] for c in cols],
    )


# ---------------------------------------------------------------------------
# error profile

@dataclass
class ErrorProfile:
    subjects: np.ndarray
    table: np.ndarray           # (len(subjects), S): ||theta_seal - theta_refit||_2
    shifts: np.ndarray          # (len(subjects), S): ||theta_refit - theta_hat||_2

    @property
    def max(self) -> float:
        return float(np.max(self.table))

    @property
    def median(self) -> float:
        return float(np.median(self.table))

    def rows(self):
        for r, i in enumerate(self.subjects):
            for s in range(self.table.shape[1]):
                yield int(i), s, float(self.table[r, s]), float(self.shifts[r, s])


def seal_error_profile(fits, data: ClusteredDataset, cfg: SealConfig = SealConfig(),
                       sample=None, nuisance: str = "frozen") -> ErrorProfile:
    """Discrepancy between SEAL and conventional refits on a subject sample.

    The default oracle holds the GEE working correlation at its full-data
    value, which is the estimating equation SEAL expands.
    """
    sample = np.arange(data.n) if sample is None else np.asarray(sample, dtype=int)
    if sample.size == 0:
        raise ValueError("sample must be non-empty")
    fits = list(fits)
    table = np.zeros((sample.size, len(fits)))
    shifts = np.zeros_like(table)
    for s, f in enumerate(fits):
        approx = seal_batch(f, cfg, sample).thetas
        for r, i in enumerate(sample):
            ref = refit_without(f.spec, data, int(i), f, nuisance).theta
            table[r, s] = np.linalg.norm(approx[r] - ref)
            shifts[r, s] = np.linalg.norm(ref - f.theta)
    return ErrorProfile(sample, table, shifts)
