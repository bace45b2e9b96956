"""Divergence kernels Q(y, f) and their aggregates.

Each kernel is a quasi-likelihood style score that is maximised when the
prediction matches the target; ``-2 Q`` is the divergence used by the
weight-choice criterion. Additive constants that depend on ``y`` only are
dropped because every criterion compares candidates on the same data.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

BERNOULLI_CLIP = 1e-6


class LossKind(str, enum.Enum):
    BERNOULLI = "bernoulli"
    POISSON = "poisson"
    SQUARED = "squared"
    CHECK = "check"


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind
    alpha: float | None = None

    def __post_init__(self):
        kind = LossKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is LossKind.CHECK:
            if self.alpha is None or not 0.0 < float(self.alpha) < 1.0:
                raise ValueError(f"check loss needs 0 < alpha < 1, got {self.alpha}")
            object.__setattr__(self, "alpha", float(self.alpha))
        elif self.alpha is not None:
            raise ValueError(f"{kind.value} loss takes no alpha")

    @classmethod
    def parse(cls, text: str) -> "LossSpec":
        """Parse ``bernoulli``, ``poisson``, ``squared`` or ``check:<alpha>``."""
        text = text.strip().lower()
        if text.startswith("check"):
            _, _, a = text.partition(":")
            if not a:
                raise ValueError("check loss needs a level, e.g. check:0.5")
            return cls(LossKind.CHECK, float(a))
        return cls(LossKind(text))

    @property
    def smooth(self) -> bool:
        return self.kind is not LossKind.CHECK

    def __str__(self):
        if self.kind is LossKind.CHECK:
            return f"check:{self.alpha:g}"
        return self.kind.value


def clip_probability(f):
    return np.clip(f, BERNOULLI_CLIP, 1.0 - BERNOULLI_CLIP)


def q_bernoulli(y, f):
    """Bernoulli quasi-likelihood ``y log(f/(1-f)) + log(1-f)``."""
    y = np.asarray(y, dtype=float)
    if np.any((y < 0) | (y > 1)):
        raise DomainError("Bernoulli targets must lie in [0, 1]")
    f = clip_probability(np.asarray(f, dtype=float))
    out = y * (np.log(f) - np.log1p(-f)) + np.log1p(-f)
    return out if out.ndim else float(out)


def q_poisson(y, f):
    """Poisson quasi-likelihood ``y log f - f``."""
    y = np.asarray(y, dtype=float)
    f = np.asarray(f, dtype=float)
    if np.any(y < 0):
        raise DomainError("Poisson targets must be non-negative")
    if np.any(f <= 0):
        raise DomainError("Poisson predictions must be positive")
    out = y * np.log(f) - f
    return out if out.ndim else float(out)


def q_squared(r, u):
    out = -0.5 * (np.asarray(r, dtype=float) - np.asarray(u, dtype=float)) ** 2
    return out if out.ndim else float(out)


def q_check(r, u, alpha):
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"check level must lie in (0, 1), got {alpha}")
    d = np.asarray(r, dtype=float) - np.asarray(u, dtype=float)
    out = -0.5 * d * (alpha - (d <= 0))
    return out if out.ndim else float(out)


def q_values(loss: LossSpec, y, f) -> np.ndarray:
    """Elementwise kernel values for matching arrays."""
    kind = loss.kind
    if kind is LossKind.BERNOULLI:
        return np.asarray(q_bernoulli(y, f))
    if kind is LossKind.POISSON:
        return np.asarray(q_poisson(y, f))
    if kind is LossKind.SQUARED:
        return np.asarray(q_squared(y, f))
    return np.asarray(q_check(y, f, loss.alpha))


def q_derivative(loss: LossSpec, y, f) -> np.ndarray:
    """dQ/df; for the check loss the right derivative is returned."""
    y = np.asarray(y, dtype=float)
    f = np.asarray(f, dtype=float)
    kind = loss.kind
    if kind is LossKind.BERNOULLI:
        f = clip_probability(f)
        return (y - f) / (f * (1.0 - f))
    if kind is LossKind.POISSON:
        return y / f - 1.0
    if kind is LossKind.SQUARED:
        return y - f
    return 0.5 * (loss.alpha - (y - f <= 0))


def subject_q(loss: LossSpec, y, f) -> float:
    """Working-independence sum of kernels over one subject's coordinates."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    f = np.atleast_1d(np.asarray(f, dtype=float))
    if y.shape != f.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {f.shape}")
    return float(np.sum(q_values(loss, y, f)))
