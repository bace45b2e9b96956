"""Containers for clustered observations, candidate models and weights.

A dataset is an ordered tuple of subjects. Subject ``i`` carries a response
vector of length ``n_i`` and an ``n_i x p`` covariate matrix; the intercept is
never stored, fitters add it. All cross-validation indexing is positional, so
subject order as loaded is preserved everywhere.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import (
    DatasetError,
    DegenerateSplit,
    DuplicateSubjectId,
    NonFiniteValue,
    ShapeMismatch,
)


def _frozen(a, ndim):
    arr = np.array(a, dtype=float)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1) if arr.size else arr.reshape(0, 0)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Subject:
    id: object
    y: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "y", _frozen(self.y, 1).ravel())
        object.__setattr__(self, "x", _frozen(self.x, 2))

    @property
    def size(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class SizeGroup:
    """Subjects sharing one cluster size, stacked for vectorized fitting."""

    size: int
    index: np.ndarray   # positions in the dataset
    y: np.ndarray       # (g, m)
    x: np.ndarray       # (g, m, p)


@dataclass(frozen=True, eq=False)
class ClusteredDataset:
    subjects: tuple
    p: int

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))

    # -- basic shape ---------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.subjects)

    def __len__(self):
        return self.n

    @cached_property
    def sizes(self) -> np.ndarray:
        return np.array([s.size for s in self.subjects], dtype=int)

    @cached_property
    def offsets(self) -> np.ndarray:
        """Start of each subject in the stacked observation vector (length n+1)."""
        return np.concatenate([[0], np.cumsum(self.sizes)])

    @property
    def n_obs(self) -> int:
        return int(self.offsets[-1])

    @cached_property
    def ids(self) -> list:
        return [s.id for s in self.subjects]

    @cached_property
    def y(self) -> np.ndarray:
        if not self.subjects:
            return np.zeros(0)
        return np.concatenate([s.y for s in self.subjects])

    @cached_property
    def x(self) -> np.ndarray:
        if not self.subjects:
            return np.zeros((0, self.p))
        return np.vstack([s.x for s in self.subjects])

    @cached_property
    def groups(self) -> tuple:
        out = []
        for m in np.unique(self.sizes):
            idx = np.flatnonzero(self.sizes == m)
            ys = np.stack([self.subjects[i].y for i in idx])
            xs = np.stack([self.subjects[i].x for i in idx])
            out.append(SizeGroup(int(m), idx, ys, xs))
        return tuple(out)

    # -- derived datasets ----------------------------------------------
    def subset(self, index: Iterable[int]) -> "ClusteredDataset":
        return ClusteredDataset(tuple(self.subjects[i] for i in index), self.p)

    def without(self, i: int) -> "ClusteredDataset":
        return ClusteredDataset(self.subjects[:i] + self.subjects[i + 1:], self.p)

    def subject_slice(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    @classmethod
    def from_arrays(cls, y, x, sizes=None, ids=None) -> "ClusteredDataset":
        """Build a dataset from stacked observations.

        ``sizes`` gives n_i per subject; omitted means one observation each.
        """
        y = np.asarray(y, dtype=float).ravel()
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if sizes is None:
            sizes = np.ones(y.shape[0], dtype=int)
        sizes = np.asarray(sizes, dtype=int)
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        if ids is None:
            ids = range(len(sizes))
        subjects = tuple(
            Subject(sid, y[a:b], x[a:b]) for sid, a, b in zip(ids, bounds[:-1], bounds[1:])
        )
        return cls(subjects, x.shape[1])


class Family(str, enum.Enum):
    GEE_BERNOULLI = "gee_bernoulli"
    GEE_POISSON = "gee_poisson"
    SAR = "sar"
    QUANTILE_REG = "quantile_reg"

    @property
    def is_gee(self) -> bool:
        return self in (Family.GEE_BERNOULLI, Family.GEE_POISSON)


class WorkingCorrelation(str, enum.Enum):
    INDEPENDENCE = "independence"
    EXCHANGEABLE = "exchangeable"
    AR1 = "ar1"


@dataclass(frozen=True, eq=False)
class CandidateSpec:
    """One candidate model.

    ``covariates`` are 0-based column indices into the dataset's covariate
    matrix. GEE and QR candidates always get an intercept; SAR candidates get
    one unless ``intercept=False``.
    """

    family: Family
    covariates: tuple = ()
    working_correlation: WorkingCorrelation | None = None
    spatial_weights: np.ndarray | None = None
    quantile_level: float | None = None
    intercept: bool = True
    name: str | None = field(default=None, compare=False)

    def __post_init__(self):
        fam = Family(self.family)
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "covariates", tuple(int(c) for c in self.covariates))
        if len(set(self.covariates)) != len(self.covariates):
            raise ValueError(f"repeated covariate index in {self.covariates}")
        if fam.is_gee:
            wc = WorkingCorrelation(self.working_correlation or WorkingCorrelation.INDEPENDENCE)
            object.__setattr__(self, "working_correlation", wc)
            if self.spatial_weights is not None or self.quantile_level is not None:
                raise ValueError("GEE candidates take only a working correlation")
            if not self.intercept:
                raise ValueError("GEE candidates always include the intercept")
        elif fam is Family.SAR:
            if self.spatial_weights is None:
                raise ValueError("SAR candidates need spatial_weights")
            if self.working_correlation is not None or self.quantile_level is not None:
                raise ValueError("SAR candidates take only spatial weights")
            a = np.array(self.spatial_weights, dtype=float)
            if a.ndim != 2 or a.shape[0] != a.shape[1]:
                raise ValueError("spatial_weights must be square")
            if not np.all(np.isfinite(a)):
                raise ValueError("spatial_weights must be finite")
            if np.any(np.diag(a) != 0):
                raise ValueError("spatial_weights must have a zero diagonal")
            a.setflags(write=False)
            object.__setattr__(self, "spatial_weights", a)
        else:
            if self.working_correlation is not None or self.spatial_weights is not None:
                raise ValueError("QR candidates take only a quantile level")
            alpha = self.quantile_level
            if alpha is None or not 0.0 < float(alpha) < 1.0:
                raise ValueError(f"quantile_level must lie in (0, 1), got {alpha}")
            object.__setattr__(self, "quantile_level", float(alpha))
            if not self.intercept:
                raise ValueError("QR candidates always include the intercept")

    def design(self, x: np.ndarray) -> np.ndarray:
        """Columns of the candidate's regression design for covariate rows ``x``."""
        cols = x[..., list(self.covariates)]
        if self.intercept:
            ones = np.ones(x.shape[:-1] + (1,))
            cols = np.concatenate([ones, cols], axis=-1)
        return cols

    @property
    def n_regressors(self) -> int:
        return len(self.covariates) + int(self.intercept)

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        cov = "+".join(f"x{c + 1}" for c in self.covariates) or "1"
        extra = ""
        if self.family.is_gee:
            extra = f"|{self.working_correlation.value}"
        elif self.family is Family.QUANTILE_REG:
            extra = f"|tau={self.quantile_level:g}"
        return f"{self.family.value}:{cov}{extra}"


class WeightVector:
    """A point of the probability simplex."""

    __slots__ = ("values",)
    TOL = 1e-10

    def __init__(self, values):
        w = np.array(values, dtype=float).ravel()
        if w.size == 0:
            raise ValueError("weight vector must be non-empty")
        if np.any(w < -self.TOL) or np.any(w > 1 + self.TOL):
            raise ValueError(f"weights must lie in [0, 1]: {w}")
        if abs(w.sum() - 1.0) > self.TOL:
            raise ValueError(f"weights must sum to one, got {w.sum()!r}")
        w = np.clip(w, 0.0, 1.0)
        w.setflags(write=False)
        self.values = w

    @classmethod
    def unit(cls, s: int, size: int) -> "WeightVector":
        w = np.zeros(size)
        w[s] = 1.0
        return cls(w)

    @classmethod
    def uniform(cls, size: int) -> "WeightVector":
        return cls(np.full(size, 1.0 / size))

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __len__(self):
        return self.values.size

    def __getitem__(self, k):
        return self.values[k]

    def __iter__(self):
        return iter(self.values)

    def __repr__(self):
        return f"WeightVector({np.array2string(self.values, precision=4)})"


# ---------------------------------------------------------------------------
# validation, splitting, IO

def validate_dataset(raw: ClusteredDataset) -> ClusteredDataset:
    """Return ``raw`` unchanged if every invariant holds.

    All violations are collected; the raised exception has the class of the
    first one and lists the rest in ``violations``.
    """
    problems = []
    seen = set()
    for pos, s in enumerate(raw.subjects):
        tag = f"subject {s.id!r} (position {pos})"
        try:
            hash(s.id)
        except TypeError:
            problems.append(DuplicateSubjectId(f"{tag}: identifier is not hashable", s.id))
        else:
            if s.id in seen:
                problems.append(DuplicateSubjectId(f"{tag}: duplicate identifier", s.id))
            seen.add(s.id)
        if s.y.ndim != 1 or s.y.shape[0] < 1:
            problems.append(ShapeMismatch(f"{tag}: needs at least one response", s.id))
        if s.x.ndim != 2 or s.x.shape != (s.y.shape[0], raw.p):
            problems.append(ShapeMismatch(
                f"{tag}: covariates have shape {s.x.shape}, expected ({s.y.shape[0]}, {raw.p})",
                s.id))
        if not np.all(np.isfinite(s.y)):
            problems.append(NonFiniteValue(f"{tag}: non-finite response", s.id))
        if not np.all(np.isfinite(s.x)):
            problems.append(NonFiniteValue(f"{tag}: non-finite covariate", s.id))
    if problems:
        first = problems[0]
        msg = "; ".join(str(p) for p in problems)
        raise type(first)(msg, first.subject_id, problems)
    return raw


def split_train_test(data: ClusteredDataset, r_test: float, seed: int):
    """Random subject-level split with ``floor(n * r_test)`` test subjects.

    Both halves keep the original subject order.
    """
    if not 0.0 < r_test < 1.0:
        raise ValueError(f"r_test must lie in (0, 1), got {r_test}")
    n = data.n
    n_test = int(np.floor(n * r_test))
    if n < 2 or n_test < 1 or n_test >= n:
        raise DegenerateSplit(f"n={n}, r_test={r_test} gives {n_test} test subjects")
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return data.subset(train_idx), data.subset(test_idx)


def read_csv(path) -> ClusteredDataset:
    """Read ``subject_id, obs_index, y, x1, ..., xp`` rows into a dataset.

    Rows of a subject must be contiguous and sorted by ``obs_index``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if header[:3] != ["subject_id", "obs_index", "y"]:
            raise DatasetError(f"{path}: header must start with subject_id, obs_index, y")
        xcols = header[3:]
        if xcols != [f"x{k}" for k in range(1, len(xcols) + 1)]:
            raise DatasetError(f"{path}: covariate columns must be x1..xp")
        p = len(xcols)
        subjects = []
        seen = set()
        cur_id, cur_obs, ys, xs = None, None, [], []

        def flush():
            if cur_id is not None:
                subjects.append(Subject(cur_id, ys, np.array(xs).reshape(len(ys), p)))

        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != p + 3:
                raise ShapeMismatch(f"{path}:{lineno}: expected {p + 3} fields, got {len(row)}")
            sid = row[0].strip()
            obs = int(row[1])
            vals = [float(v) for v in row[2:]]
            if sid != cur_id:
                if sid in seen:
                    raise DuplicateSubjectId(
                        f"{path}:{lineno}: rows of subject {sid!r} are not contiguous", sid)
                flush()
                seen.add(sid)
                cur_id, cur_obs, ys, xs = sid, None, [], []
            if cur_obs is not None and obs <= cur_obs:
                raise DatasetError(f"{path}:{lineno}: obs_index not increasing for {sid!r}", sid)
            cur_obs = obs
            ys.append(vals[0])
            xs.append(vals[1:])
        flush()
    return validate_dataset(ClusteredDataset(tuple(subjects), p))


def write_csv(data: ClusteredDataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "obs_index", "y"] + [f"x{k}" for k in range(1, data.p + 1)])
        for s in data.subjects:
            for j in range(s.size):
                w.writerow([s.id, j] + [repr(float(s.y[j]))] + [repr(float(v)) for v in s.x[j]])


