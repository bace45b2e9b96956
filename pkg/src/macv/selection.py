"""Competing weightings: equal weights, CV selection and QIC selection."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from .data import ClusteredDataset, Family, WeightVector
from .errors import ImoriStubWarning, SingularInformation
from .estimators import FitState, sandwich_parts
from .estimators.gee import mean_function
from .losses import LossSpec, q_bernoulli, q_poisson
from .weights import criterion_cn


class MethodKind(str, enum.Enum):
    MA_SEAL = "ma_seal"
    MA_CONVENTIONAL = "ma_conventional"
    EQUAL = "equal"
    CV_SELECT = "cv"
    QIC_PAN = "qic_pan"
    QIC_IMORI = "qic_imori"

    @property
    def is_selector(self) -> bool:
        return self in (MethodKind.CV_SELECT, MethodKind.QIC_PAN, MethodKind.QIC_IMORI)


@dataclass(frozen=True)
class MethodResult:
    method: MethodKind
    weights: WeightVector | None
    chosen: int | None = None
    value: float | None = None
    applicable: bool = True

    def __post_init__(self):
        object.__setattr__(self, "method", MethodKind(self.method))
        if self.method.is_selector and self.applicable:
            w = np.asarray(self.weights)
            if self.chosen is None or np.count_nonzero(w) != 1 or w[self.chosen] != 1.0:
                raise ValueError("selector results carry exactly one unit weight")


def equal_weights(S: int) -> WeightVector:
    if S < 1:
        raise ValueError("need at least one candidate")
    return WeightVector.uniform(S)


def cv_select(cv, loss: LossSpec) -> MethodResult:
    """Pick the candidate with the smallest leave-out criterion; ties go to the first."""
    s = cv.loo.shape[1] if not isinstance(cv, tuple) else np.atleast_2d(cv[1]).shape[1]
    vals = np.array([criterion_cn(np.eye(s)[k], cv, loss) for k in range(s)])
    k = int(np.argmin(vals))
    return MethodResult(MethodKind.CV_SELECT, WeightVector.unit(k, s), k, float(vals[k]))


def independence_quasi_likelihood(fit: FitState, data: ClusteredDataset) -> float:
    mu = mean_function(fit.spec.family, fit.spec.design(data.x) @ fit.theta)
    if fit.spec.family is Family.GEE_BERNOULLI:
        return float(np.sum(q_bernoulli(data.y, mu)))
    return float(np.sum(q_poisson(data.y, mu)))


def qic_from_parts(quasi_lik: float, omega_indep, v_robust) -> float:
    return float(-2.0 * quasi_lik + 2.0 * np.trace(np.asarray(omega_indep) @ np.asarray(v_robust)))


def robust_covariance(fit: FitState, data: ClusteredDataset):
    """Sandwich covariance and the independence-model information at beta-hat."""
    info, meat, omega = sandwich_parts(fit, data)
    try:
        cond = np.linalg.cond(info)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e13:
        raise SingularInformation(f"model information of {fit.spec.label} is singular")
    inv = np.linalg.inv(info)
    return inv @ meat @ inv, omega


def qic_pan(fit: FitState, data: ClusteredDataset) -> float:
    """``-2 Q(beta-hat; I) + 2 tr(Omega_I V_r)`` with unit dispersion."""
    if not fit.spec.family.is_gee:
        raise ValueError("QIC applies to GEE candidates only")
    v_r, omega = robust_covariance(fit, data)
    return qic_from_parts(independence_quasi_likelihood(fit, data), omega, v_r)


def qic_imori(fit: FitState, data: ClusteredDataset) -> float:
    """Placeholder for the modified QIC; evaluates ``qic_pan`` and warns.

    The penalty correction of the modified criterion is not reproduced here,
    so the value and the selection it induces coincide with ``qic_pan``.
    """
    warnings.warn("qic_imori is a stub that returns qic_pan", ImoriStubWarning, stacklevel=2)
    return qic_pan(fit, data)


def qic_select(fits, data: ClusteredDataset, variant=MethodKind.QIC_PAN) -> MethodResult:
    variant = MethodKind(variant)
    fits = list(fits)
    s = len(fits)
    if not all(f.spec.family.is_gee for f in fits):
        return MethodResult(variant, None, applicable=False)
    if variant is MethodKind.QIC_IMORI:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ImoriStubWarning)
            vals = np.array([qic_imori(f, data) for f in fits])
        warnings.warn("qic_imori is a stub that returns qic_pan", ImoriStubWarning, stacklevel=2)
    else:
        vals = np.array([qic_pan(f, data) for f in fits])
    k = int(np.argmin(vals))
    return MethodResult(variant, WeightVector.unit(k, s), k, float(vals[k]))
