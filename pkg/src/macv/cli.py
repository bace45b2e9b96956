"""``macv simulate | average | benchmark`` command-line front end.

Exit codes: 0 success, 1 usage or configuration error, 2 partial failure.
Set ``MACV_LOG`` to a logging level name (``DEBUG``, ``INFO``, ...) for
progress output on stderr.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from .data import CandidateSpec, ClusteredDataset, Family, WorkingCorrelation, read_csv
from .errors import CvCellError, MacvError
from .estimators import fit
from .experiment import ExperimentConfig, run_experiment
from .losses import LossSpec
from .seal import CvMode, InverseMode, SealConfig, build_cv_matrix
from .weights import OptimizerConfig, criterion_cn, minimize_weights

log = logging.getLogger("macv")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def git_blob_hash(content: bytes) -> str:
    """SHA-1 of ``content`` as git stores a blob."""
    return hashlib.sha1(b"blob %d\0" % len(content) + content).hexdigest()


def load_json(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(raw.decode("utf-8")), raw
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8 ({exc.reason})") from None


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


# ---------------------------------------------------------------------------
# candidate configs

def _covariate_index(name, p):
    if isinstance(name, int):
        k = name - 1
    elif isinstance(name, str) and name.startswith("x") and name[1:].isdigit():
        k = int(name[1:]) - 1
    else:
        raise ConfigError(f"covariate {name!r} must be named x1..x{p}")
    if not 0 <= k < p:
        raise ConfigError(f"covariate {name!r} outside x1..x{p}")
    return k


def _spatial(entry, base: Path, n):
    if "spatial_weights" in entry:
        a = np.asarray(entry["spatial_weights"], dtype=float)
    elif "spatial_weights_file" in entry:
        a = np.loadtxt(base / entry["spatial_weights_file"], delimiter=",", ndmin=2)
    else:
        raise ConfigError("SAR candidates need spatial_weights or spatial_weights_file")
    if a.shape != (n, n):
        raise ConfigError(f"spatial weight matrix is {a.shape}, dataset has {n} units")
    return a


def parse_candidates(doc, data: ClusteredDataset, base: Path = Path(".")):
    entries = doc.get("candidates") if isinstance(doc, dict) else None
    if not entries:
        raise ConfigError("candidates config needs a non-empty 'candidates' list")
    specs = []
    for pos, e in enumerate(entries):
        try:
            fam = Family(e["family"])
            cov = tuple(_covariate_index(c, data.p) for c in e.get("covariates", []))
            kw = {}
            if fam.is_gee:
                kw["working_correlation"] = WorkingCorrelation(e.get("working_correlation", "independence"))
            elif fam is Family.SAR:
                kw["spatial_weights"] = _spatial(e, base, data.n)
                kw["intercept"] = bool(e.get("intercept", True))
            else:
                kw["quantile_level"] = float(e["quantile_level"])
            specs.append(CandidateSpec(fam, cov, name=e.get("name"), **kw))
        except ConfigError as exc:
            raise ConfigError(f"candidate {pos}: {exc}") from None
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"candidate {pos}: {exc}") from None
    return specs


def default_loss(specs) -> LossSpec:
    fam = specs[0].family
    if fam is Family.GEE_BERNOULLI:
        return LossSpec.parse("bernoulli")
    if fam is Family.GEE_POISSON:
        return LossSpec.parse("poisson")
    if fam is Family.SAR:
        return LossSpec.parse("squared")
    return LossSpec.parse(f"check:{specs[0].quantile_level}")


def _seal_config(doc) -> SealConfig:
    seal = dict(doc.get("seal") or {})
    seal.pop("mode", None)
    if "inverse_mode" in seal:
        seal["inverse_mode"] = InverseMode(seal["inverse_mode"])
    return SealConfig(**seal)


def _prepare(args):
    try:
        data = read_csv(args.data)
    except OSError as exc:
        raise ConfigError(f"cannot read {args.data}: {exc.strerror}") from None
    doc, _ = load_json(args.config)
    specs = parse_candidates(doc, data, Path(args.config).parent)
    try:
        loss = LossSpec.parse(args.loss) if args.loss else default_loss(specs)
        seal_cfg = _seal_config(doc)
        opt = OptimizerConfig(**(doc.get("optimizer") or {}))
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return data, specs, loss, seal_cfg, opt


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args) -> int:
    doc, raw = load_json(args.config)
    if not isinstance(doc, dict):
        raise ConfigError(f"{args.config}: top level must be an object")
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.mode is not None:
        doc["seal"] = {**(doc.get("seal") or {}), "mode": args.mode}
    try:
        cfg = ExperimentConfig.from_dict(doc)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{args.config}: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    t0 = time.perf_counter()
    table = run_experiment(cfg, threads=args.threads,
                           progress=lambda r: log.info("replication %d/%d", r + 1, cfg.M))
    wall = time.perf_counter() - t0
    keys = ["rep", "method", "scaled_loss", "chosen", "weights"]
    if cfg.design == "consistency":
        keys.append("correct_weight")
    with (out / "results.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for row in table.rows:
            w.writerow([_fmt(row.get(k, "")) for k in keys])
    with (out / "candidate_losses.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rep"] + list(table.labels))
        done = [r for r in range(cfg.M) if r not in table.failures]
        for r, vals in zip(done, table.candidate_losses):
            w.writerow([r] + [repr(float(v)) for v in vals])
    summary = table.summary()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    (out / "config.json").write_bytes(raw)
    manifest = {
        "config_path": str(Path(args.config)),
        "config_copy": "config.json",
        "config_hash": git_blob_hash(raw),
        "seed": cfg.seed,
        "threads": args.threads,
        "started": started,
        "finished": _now(),
        "wall_seconds": wall,
        "method_seconds": dict(sorted(table.timings.items())),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    print(json.dumps({m: v.get("mean") for m, v in summary["methods"].items()}, sort_keys=True))
    if table.failures:
        print(f"{len(table.failures)} of {cfg.M} replications failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _cv_for(specs, data, seal_cfg, mode, threads):
    fits = [fit(s, data) for s in specs]
    cv = build_cv_matrix(fits, data, seal_cfg, mode, threads=threads)
    return fits, cv


def cmd_average(args) -> int:
    data, specs, loss, seal_cfg, opt = _prepare(args)
    mode = CvMode(args.mode)
    fits, cv = _cv_for(specs, data, seal_cfg, mode, args.threads)
    wf = minimize_weights(cv, loss, opt)
    w = np.asarray(wf.weights)
    S = len(specs)
    crit = [criterion_cn(np.eye(S)[s], cv, loss) for s in range(S)]
    report = {
        "mode": mode.value,
        "loss": str(loss),
        "criterion": wf.value,
        "converged": wf.converged,
        "cell_modes": cv.mode_counts(),
        "candidates": [
            {"label": s.label, "weight": float(w[k]), "cv_criterion": float(crit[k])}
            for k, s in enumerate(specs)
        ],
    }
    print(f"{'candidate':40s} {'weight':>10s} {'cv_criterion':>14s}")
    for c in report["candidates"]:
        print(f"{c['label'][:40]:40s} {c['weight']:10.6f} {c['cv_criterion']:14.6f}")
    print(f"averaged criterion {wf.value:.6f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "weights.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
        blended = cv.in_sample @ w
        blended_loo = cv.loo @ w
        with (out / "predictions.csv").open("w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["subject_id", "obs_index", "y", "prediction", "loo_prediction"])
            for i, sub in enumerate(data.subjects):
                rows = cv.subject_rows(i)
                for j, r in enumerate(range(rows.start, rows.stop)):
                    wr.writerow([sub.id, j, repr(float(data.y[r])), repr(float(blended[r])),
                                 repr(float(blended_loo[r]))])
    return EXIT_OK


def cmd_benchmark(args) -> int:
    data, specs, loss, seal_cfg, opt = _prepare(args)
    if args.repeats < 1:
        raise ConfigError("--repeats must be at least 1")
    fits = [fit(s, data) for s in specs]
    rows = []
    w_seal = w_conv = None
    for r in range(args.repeats):
        cv_s = build_cv_matrix(fits, data, seal_cfg, CvMode.SEAL, threads=args.threads)
        cv_c = build_cv_matrix(fits, data, seal_cfg, CvMode.CONVENTIONAL, threads=args.threads)
        rows.append((r + 1, cv_s.seconds, cv_c.seconds))
        if w_seal is None:
            w_seal = np.asarray(minimize_weights(cv_s, loss, opt).weights)
            w_conv = np.asarray(minimize_weights(cv_c, loss, opt).weights)
    seal_t = np.array([r[1] for r in rows])
    conv_t = np.array([r[2] for r in rows])
    med_s, med_c = float(np.median(seal_t)), float(np.median(conv_t))
    speedup = med_c / med_s if med_s > 0 else float("inf")
    disc = float(np.max(np.abs(w_seal - w_conv)))
    print(f"{'repeat':>8s} {'seal_s':>12s} {'conventional_s':>16s}")
    for r, a, b in rows:
        print(f"{r:>8d} {a:12.4f} {b:16.4f}")
    print(f"{'median':>8s} {med_s:12.4f} {med_c:16.4f}")
    print(f"speedup {speedup:.2f}x")
    print(f"max weight discrepancy {disc:.3e}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        doc = {"repeats": [{"repeat": r, "seal_seconds": a, "conventional_seconds": b}
                           for r, a, b in rows],
               "median_seal_seconds": med_s, "median_conventional_seconds": med_c,
               "speedup": speedup, "max_weight_discrepancy": disc,
               "weights_seal": w_seal.tolist(), "weights_conventional": w_conv.tolist()}
        (out / "benchmark.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="macv", description="Cross-validated model averaging with SEAL.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    threads = dict(type=int, default=os.cpu_count() or 1,
                   help="worker threads for the CV matrix (default: available CPUs)")

    s = sub.add_parser("simulate", help="run a simulation experiment from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, help="override the config's master seed")
    s.add_argument("--mode", choices=[m.value for m in CvMode],
                   help="override the leave-out mode of the model-averaging method")
    s.add_argument("--threads", **threads)
    s.set_defaults(func=cmd_simulate)

    for name, func, helptext in (("average", cmd_average, "weights for a dataset"),
                                 ("benchmark", cmd_benchmark, "time SEAL vs conventional CV")):
        a = sub.add_parser(name, help=helptext)
        a.add_argument("--data", required=True, help="dataset CSV")
        a.add_argument("--config", required=True, help="candidates JSON")
        a.add_argument("--loss", help="bernoulli | poisson | squared | check:<alpha>")
        a.add_argument("--out")
        a.add_argument("--threads", **threads)
        if name == "average":
            a.add_argument("--mode", choices=[m.value for m in CvMode], default="seal")
        else:
            a.add_argument("--repeats", type=int, default=3)
        a.set_defaults(func=func)
    return p


def _setup_logging():
    level = os.environ.get("MACV_LOG", "WARNING").strip().upper()
    value = int(level) if level.isdigit() else getattr(logging, level, logging.WARNING)
    logging.basicConfig(level=value, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "threads", 1) < 1:
        print("macv: error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with warnings.catch_warnings():
            if logging.getLogger().level > logging.INFO:
                warnings.simplefilter("ignore")
            return args.func(args)
    except ConfigError as exc:
        print(f"macv: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CvCellError as exc:
        print(f"macv: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    except MacvError as exc:
        if isinstance(exc, ValueError):
            print(f"macv: input error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"macv: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
