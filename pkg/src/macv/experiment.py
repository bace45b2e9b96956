"""Replicated simulation experiments: generate, fit, cross-validate, weight, score.

A config is a plain dict (the parsed JSON document). Recognised designs:

``design1``
    Correlated binary or count clusters. Candidates are every subset of the
    first p-1 covariates crossed with exchangeable and AR(1) working
    correlations; covariate p never enters a candidate.
``consistency``
    Same generator, but candidates are every subset of all p covariates with
    one working correlation, so exactly one candidate (the full model) is
    correctly specified.
``sar``
    Spatial autoregression on a ring; candidates cross covariate subsets with
    the true and a misspecified neighbour matrix.
``qr``
    Linear quantile regression with heteroscedastic noise.
"""

from __future__ import annotations

import itertools
import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import simgen
from .data import CandidateSpec, Family, WorkingCorrelation
from .errors import MacvError, MacvWarning
from .estimators import fit, predict
from .losses import LossSpec
from .seal import CvMode, InverseMode, SealConfig, build_cv_matrix
from .selection import MethodKind, cv_select, equal_weights, qic_select
from .weights import OptimizerConfig, criterion_cn, minimize_weights

log = logging.getLogger(__name__)

DEFAULT_METHODS = ("ma_seal", "equal", "cv", "qic_pan", "qic_imori")
QUANTILES = (0.25, 0.5, 0.75)


# ---------------------------------------------------------------------------
# candidate sets

def gee_candidates(family: Family, p: int, drop_last: bool = True,
                   correlations=(WorkingCorrelation.EXCHANGEABLE, WorkingCorrelation.AR1)):
    """All covariate subsets (optionally without covariate p) x working correlations."""
    pool = range(p - 1) if drop_last else range(p)
    out = []
    for k in range(len(pool) + 1):
        for subset in itertools.combinations(pool, k):
            for wc in correlations:
                out.append(CandidateSpec(family, subset, WorkingCorrelation(wc)))
    return out


def ring_weights(n: int, k: int) -> np.ndarray:
    """Row-normalised ring contiguity with k neighbours on each side."""
    a = np.zeros((n, n))
    for d in range(1, k + 1):
        idx = np.arange(n)
        a[idx, (idx + d) % n] = 1.0
        a[idx, (idx - d) % n] = 1.0
    np.fill_diagonal(a, 0.0)
    return a / a.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# config

@dataclass(frozen=True)
class ExperimentConfig:
    design: str
    n: int
    beta: tuple
    M: int = 1
    seed: int = 0
    rho: float = 0.0
    response: str = "binary"
    cluster_size: int = 4
    methods: tuple = DEFAULT_METHODS
    seal: SealConfig = SealConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    working_correlation: str = "ar1"
    alpha: float = 0.5
    neighbors: int = 2
    sigma: float = 1.0
    loss_scale: str = "observation"

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key in ("design", "n", "beta"):
            if key not in doc:
                raise ValueError(f"config needs key {key!r}")
        if doc["design"] not in ("design1", "consistency", "sar", "qr"):
            raise ValueError(f"unknown design {doc['design']!r}")
        seal = doc.pop("seal", None) or {}
        seal = dict(seal)
        mode = seal.pop("mode", None)
        if mode is not None:
            CvMode(mode)
            methods = list(doc.get("methods", DEFAULT_METHODS))
            if mode == "conventional":
                methods = ["ma_conventional" if m == "ma_seal" else m for m in methods]
            doc["methods"] = methods
        if "inverse_mode" in seal:
            seal["inverse_mode"] = InverseMode(seal["inverse_mode"])
        opt = OptimizerConfig(**(doc.pop("optimizer", None) or {}))
        methods = tuple(MethodKind(m).value for m in doc.pop("methods", DEFAULT_METHODS))
        doc["beta"] = tuple(float(b) for b in doc["beta"])
        return cls(seal=SealConfig(**seal), optimizer=opt, methods=methods, **doc)

    @property
    def loss(self) -> LossSpec:
        if self.design in ("design1", "consistency"):
            return LossSpec.parse("bernoulli" if self.response == "binary" else "poisson")
        if self.design == "sar":
            return LossSpec.parse("squared")
        return LossSpec.parse(f"check:{self.alpha}")

    @property
    def p(self) -> int:
        return len(self.beta) - 1


def candidate_specs(cfg: ExperimentConfig, spatial=None):
    if cfg.design in ("design1", "consistency"):
        fam = Family.GEE_BERNOULLI if cfg.response == "binary" else Family.GEE_POISSON
        if cfg.design == "design1":
            return gee_candidates(fam, cfg.p, drop_last=True)
        return gee_candidates(fam, cfg.p, drop_last=False,
                              correlations=(WorkingCorrelation(cfg.working_correlation),))
    pool = range(cfg.p - 1)
    subsets = [s for k in range(len(pool) + 1) for s in itertools.combinations(pool, k)]
    if cfg.design == "sar":
        # x1 is always kept: with row-normalised weights an intercept-only
        # model has constant instruments and rho is not identified
        subsets = [(0,) + tuple(c + 1 for c in s)
                   for k in range(cfg.p - 1) for s in itertools.combinations(range(cfg.p - 2), k)]
        cov = lambda s: "+".join(f"x{c + 1}" for c in s)
        return [CandidateSpec(Family.SAR, s, spatial_weights=a, name=f"sar:{cov(s)}|A{k + 1}")
                for s in subsets for k, a in enumerate(spatial)]
    return [CandidateSpec(Family.QUANTILE_REG, s, quantile_level=cfg.alpha) for s in subsets]


def correct_candidates(cfg: ExperimentConfig, specs) -> list:
    """Indices of exactly correct candidates (consistency design only)."""
    if cfg.design != "consistency":
        return []
    full = tuple(range(cfg.p))
    return [k for k, s in enumerate(specs) if s.covariates == full]


# ---------------------------------------------------------------------------
# results

@dataclass
class ResultsTable:
    config: ExperimentConfig
    labels: tuple
    rows: list = field(default_factory=list)            # dicts, one per (rep, method)
    candidate_losses: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)        # rep -> message
    warning_counts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)         # method -> seconds

    @property
    def loss_matrix(self) -> np.ndarray:
        return np.array(self.candidate_losses, dtype=float).reshape(-1, len(self.labels))

    def method_losses(self, method) -> np.ndarray:
        method = MethodKind(method).value
        return np.array([r["scaled_loss"] for r in self.rows if r["method"] == method], dtype=float)

    def column(self, method, key) -> np.ndarray:
        method = MethodKind(method).value
        return np.array([r[key] for r in self.rows if r["method"] == method], dtype=float)

    def summary(self) -> dict:
        out = {"design": self.config.design, "n": self.config.n, "M": self.config.M,
               "S": len(self.labels), "completed": self.config.M - len(self.failures),
               "failed": len(self.failures), "methods": {}}
        for m in self.config.methods:
            vals = self.method_losses(m)
            vals = vals[np.isfinite(vals)]
            if vals.size == 0:
                out["methods"][m] = {"applicable": False}
                continue
            q = np.quantile(vals, QUANTILES)
            entry = {"mean": float(vals.mean()), "25%": float(q[0]), "50%": float(q[1]),
                     "75%": float(q[2])}
            if self.config.design == "consistency":
                entry["median_correct_weight"] = float(np.median(self.column(m, "correct_weight")))
            out["methods"][m] = entry
        lm = self.loss_matrix
        if lm.shape[0] >= 2 and lm.shape[1] >= 2:
            try:
                out["gamma_hat"] = simgen.metric_gamma_hat(lm)
            except MacvError:
                out["gamma_hat"] = None
        if lm.size:
            out["lbar"] = simgen.metric_lbar(lm)
        if self.failures:
            out["failures"] = {str(k): v for k, v in sorted(self.failures.items())}
        if self.warning_counts:
            out["warnings"] = dict(sorted(self.warning_counts.items()))
        return out


# ---------------------------------------------------------------------------
# one replication

def _generate(cfg: ExperimentConfig, rng, rep_seed, spatial):
    if cfg.design in ("design1", "consistency"):
        d1 = simgen.Design1Config(n=cfg.n, beta=cfg.beta, rho=cfg.rho, response=cfg.response,
                                  cluster_size=cfg.cluster_size)
        if d1.response is simgen.Response.BINARY:
            return simgen.gen_binary_ar1(d1, rng)
        return simgen.gen_count_ar1(d1, rng)
    beta = np.asarray(cfg.beta)
    if cfg.design == "sar":
        x = rng.standard_normal((cfg.n, cfg.p))
        eta = beta[0] + x @ beta[1:]
        return simgen.gen_sar(cfg.n, cfg.rho, spatial[0], eta, cfg.sigma, rep_seed, x=x)
    return simgen.gen_quantile(cfg.n, beta, cfg.alpha, rep_seed)


def _score(cfg, truth, pred):
    if cfg.design == "qr":
        return simgen.empirical_check_loss(truth.y0, truth.true_means, pred, cfg.alpha)
    return simgen.scaled_loss(cfg.loss, truth, pred, per=cfg.loss_scale)


def run_replication(cfg: ExperimentConfig, rep: int, specs, spatial=None, timings=None, threads=1):
    """Rows for one replication plus the candidate losses."""
    seq = np.random.SeedSequence([cfg.seed, rep])
    rng = np.random.default_rng(seq)
    rep_seed = int(seq.generate_state(1)[0])
    truth = _generate(cfg, rng, rep_seed, spatial)
    data = truth.dataset
    fits = [fit(s, data) for s in specs]
    loss = cfg.loss
    methods = [MethodKind(m) for m in cfg.methods]
    S = len(specs)
    need_seal = any(m in (MethodKind.MA_SEAL, MethodKind.CV_SELECT) for m in methods)
    cvs = {}
    if need_seal:
        cvs["seal"] = build_cv_matrix(fits, data, cfg.seal, CvMode.SEAL, threads=threads)
    if MethodKind.MA_CONVENTIONAL in methods:
        cvs["conventional"] = build_cv_matrix(fits, data, cfg.seal, CvMode.CONVENTIONAL, threads=threads)
    if cvs:
        in_sample = next(iter(cvs.values())).in_sample
    else:
        in_sample = np.column_stack([predict(f, data) for f in fits])
    cand = [_score(cfg, truth, in_sample[:, s]) for s in range(S)]
    correct = correct_candidates(cfg, specs)
    rows = []
    for m in methods:
        t0 = time.perf_counter()
        chosen = None
        applicable = True
        if m is MethodKind.MA_SEAL or m is MethodKind.MA_CONVENTIONAL:
            cv = cvs["seal" if m is MethodKind.MA_SEAL else "conventional"]
            wf = minimize_weights(cv, loss, cfg.optimizer)
            vertex_best = min(criterion_cn(np.eye(S)[s], cv, loss) for s in range(S))
            if wf.value > vertex_best + 1e-9 * max(1.0, abs(vertex_best)):
                raise AssertionError("weight optimiser lost to a vertex")
            w = np.asarray(wf.weights)
            extra = cv.seconds
        elif m is MethodKind.EQUAL:
            w = np.asarray(equal_weights(S))
            extra = 0.0
        elif m is MethodKind.CV_SELECT:
            res = cv_select(cvs["seal"], loss)
            w, chosen = np.asarray(res.weights), res.chosen
            extra = cvs["seal"].seconds
        else:
            res = qic_select(fits, data, m)
            applicable = res.applicable
            w = np.asarray(res.weights) if applicable else None
            chosen = res.chosen
            extra = 0.0
        if timings is not None:
            timings[m.value] = timings.get(m.value, 0.0) + time.perf_counter() - t0 + extra
        row = {"rep": rep, "method": m.value}
        if not applicable:
            row.update(scaled_loss=float("nan"), chosen="", weights="")
        else:
            row.update(scaled_loss=_score(cfg, truth, in_sample @ w),
                       chosen="" if chosen is None else chosen,
                       weights=" ".join(f"{v:.6g}" for v in w))
        if correct:
            row["correct_weight"] = float(np.sum(w[correct])) if applicable else float("nan")
        rows.append(row)
    return rows, cand


def run_experiment(config, methods=None, progress=None, threads=1) -> ResultsTable:
    """Run every replication of a config; failures are counted, not fatal."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    if methods is not None:
        cfg = ExperimentConfig(**{**cfg.__dict__, "methods": tuple(MethodKind(m).value for m in methods)})
    spatial = None
    if cfg.design == "sar":
        spatial = (ring_weights(cfg.n, cfg.neighbors), ring_weights(cfg.n, cfg.neighbors + 2))
    specs = candidate_specs(cfg, spatial)
    table = ResultsTable(cfg, tuple(s.label for s in specs))
    for rep in range(cfg.M):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", MacvWarning)
            try:
                rows, cand = run_replication(cfg, rep, specs, spatial, table.timings, threads)
            except (MacvError, np.linalg.LinAlgError) as exc:
                table.failures[rep] = f"{type(exc).__name__}: {exc}"
                log.warning("replication %d failed: %s", rep, exc)
                rows, cand = None, None
        for w in caught:
            if issubclass(w.category, MacvWarning):
                key = w.category.__name__
                table.warning_counts[key] = table.warning_counts.get(key, 0) + 1
        if rows is not None:
            table.rows.extend(rows)
            table.candidate_losses.append(cand)
        if progress is not None:
            progress(rep)
    return table
