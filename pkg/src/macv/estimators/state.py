from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..data import CandidateSpec


@dataclass(frozen=True, eq=False)
class FitState:
    """A fitted candidate together with its estimating-equation derivatives.

    With ``U(theta) = sum_i u_i(theta)`` the estimating function,
    ``jacobian`` is ``J = -dU/dtheta`` and ``hessian_tensor[a, b, c]`` is
    ``dJ[a, b]/dtheta[c]``, both at ``theta``. The per-subject pieces
    ``u_subject``, ``j_subject`` and ``h_subject`` sum to U, J and H, which is
    what leave-one-out approximations subtract from. Non-smooth fits (quantile
    regression) carry ``None`` for the derivative fields.
    """

    spec: CandidateSpec
    theta: np.ndarray
    u_subject: np.ndarray | None
    j_subject: np.ndarray | None = None
    h_subject: np.ndarray | None = None
    jacobian: np.ndarray | None = None
    hessian_tensor: np.ndarray | None = None
    converged: bool = True
    n_iter: int = 0
    nuisance: dict = field(default_factory=dict)
    flags: tuple = ()

    @property
    def q(self) -> int:
        return self.theta.shape[0]

    @property
    def smooth(self) -> bool:
        return self.jacobian is not None and self.hessian_tensor is not None

    def score(self) -> np.ndarray:
        return self.u_subject.sum(axis=0)
