"""Family dispatch for fitting, prediction and leave-subject-out refits."""

from __future__ import annotations

import numpy as np

from ..data import CandidateSpec, ClusteredDataset, Family
from .gee import gee_fit, gee_predict, mean_function, sandwich_parts, subject_derivatives
from .qr import check_objective, qr_fit, qr_predict
from .sar import rho_interval, sar_fit, sar_predict, without_unit
from .state import FitState

__all__ = [
    "FitState", "fit", "predict", "predict_per_subject", "refit_without",
    "gee_fit", "gee_predict", "sar_fit", "sar_predict", "qr_fit", "qr_predict",
    "sandwich_parts", "subject_derivatives", "mean_function", "check_objective",
    "rho_interval", "without_unit",
]


def fit(spec: CandidateSpec, data: ClusteredDataset, **kw) -> FitState:
    if spec.family.is_gee:
        return gee_fit(spec, data, **kw)
    if spec.family is Family.SAR:
        return sar_fit(spec, data)
    return qr_fit(spec, data, **kw)


def predict(fit_state: FitState, data: ClusteredDataset) -> np.ndarray:
    """In-sample predictions for every observation, stacked by subject."""
    if fit_state.spec.family is Family.SAR:
        return sar_predict(fit_state, data)
    if fit_state.spec.family.is_gee:
        return gee_predict(fit_state, data.x)
    return qr_predict(fit_state, data.x)


def predict_per_subject(spec: CandidateSpec, data: ClusteredDataset, thetas,
                        subjects=None) -> np.ndarray:
    """Predictions where subject ``subjects[k]`` uses parameter row ``thetas[k]``.

    ``subjects`` defaults to all subjects in order. Returns the stacked
    observations of the selected subjects. For SAR the neighbour term uses the
    full observed response vector, as in the working BLUP.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if subjects is None:
        subjects = np.arange(data.n)
    subjects = np.asarray(subjects, dtype=int)
    sizes = data.sizes[subjects]
    rows = np.concatenate([np.arange(data.offsets[i], data.offsets[i + 1]) for i in subjects]) \
        if subjects.size else np.zeros(0, dtype=int)
    owner = np.repeat(np.arange(subjects.size), sizes)
    if spec.family is Family.SAR:
        x = spec.design(data.x[rows])
        spatial = (spec.spatial_weights @ data.y)[rows]
        th = thetas[owner]
        return np.sum(x * th[:, :-1], axis=1) + th[:, -1] * spatial
    x = spec.design(data.x[rows])
    eta = np.sum(x * thetas[owner], axis=1)
    if spec.family.is_gee:
        return mean_function(spec.family, eta)
    return eta


def refit_without(spec: CandidateSpec, data: ClusteredDataset, i: int,
                  full: FitState | None = None, nuisance: str = "reestimate") -> FitState:
    """Conventional fit on the data with subject ``i`` removed.

    ``full`` (the full-data fit) only supplies a warm start. For GEE,
    ``nuisance="frozen"`` holds the working correlation at the full-data value
    so the refit solves exactly the estimating equation the leave-out
    approximation targets; ``"reestimate"`` re-estimates it as a standalone
    fit would.
    """
    if data.n < 2:
        raise ValueError("refit_without needs at least two subjects")
    if not 0 <= i < data.n:
        raise IndexError(f"subject index {i} out of range for n={data.n}")
    rest = data.without(i)
    init = None if full is None else full.theta
    if spec.family.is_gee:
        fixed = None
        if nuisance == "frozen":
            if full is None:
                raise ValueError("frozen nuisance needs the full-data fit")
            fixed = full.nuisance
        elif nuisance != "reestimate":
            raise ValueError(f"unknown nuisance policy {nuisance!r}")
        return gee_fit(spec, rest, init=init, nuisance=fixed, derivatives=False)
    if spec.family is Family.SAR:
        return sar_fit(without_unit(spec, i), rest)
    return qr_fit(spec, rest, init=init)
