"""Command-line driver for training, validation and output of surrogates.

Commands::

    nsrb run --config exp.ini
    nsrb sweep-pdelta --config exp.ini --k-list 25,50,100 [--reuse-basis]
    nsrb save-artifact trained.txt --config exp.ini
    nsrb load-artifact trained.txt --config exp.ini

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
The environment variable ``NSRB_OUTPUT_DIR`` overrides the output directory.
"""

import argparse
import configparser
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .deim import DeimPointError
from .estimators import DegenerateErrorError
from .io import load_artifact, save_artifact, write_csv
from .models import AdaptiveRBDEIM, ClassicalRBDEIM, PODGreedyRB, resolve_problem, summarize_reports
from .numerics import NotSPDError
from .problem import make_problem_from_expressions, sample_grid
from .reduction import RedundantModeError, StagnationError
from .solvers import NewtonError

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "build_model", "run", "sweep_projection_error", "main"]

logger = logging.getLogger("nsrb")

MODES = ("rb_true_error", "rb_estimator", "rb_deim_classical", "rb_deim_adaptive")
OUTPUT_ENV = "NSRB_OUTPUT_DIR"
NUMERICAL_ERRORS = (
    NewtonError, StagnationError, NotSPDError, np.linalg.LinAlgError,
    DegenerateErrorError, DeimPointError, RedundantModeError, ValueError, FloatingPointError,
)


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class ExperimentConfig:
    """Validated experiment settings (see the README for the file schema)."""

    problem: object
    example: str
    n: int = 50
    K: int = 400
    T: float = None
    mode: str = "rb_estimator"
    train_counts: tuple = (60,)
    test_counts: tuple = (100,)
    tol: float = 1e-3
    tol_rb: float = 1e-4
    tol_L: float = 1e-5
    deim_size: int = 72
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    output_dir: str = "nsrb-output"
    n_jobs: int = 1
    seed: int = 0
    source: dict = field(default_factory=dict, repr=False)

    @property
    def train_set(self):
        return sample_grid(self.problem.box, self.train_counts)

    @property
    def test_set(self):
        return sample_grid(self.problem.box, self.test_counts)


def _counts(text, key):
    try:
        counts = tuple(int(v) for v in str(text).replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"{key}: expected integers, got {text!r}") from exc
    if not counts or any(c < 2 for c in counts):
        raise ConfigError(f"{key}: every grid count must be at least 2, got {text!r}")
    return counts


def _split(text):
    return [part.strip() for part in str(text).split(";") if part.strip()]


def _custom_problem(sec):
    required = ("lower", "upper", "T", "diffusion", "reaction", "spatial", "beta", "gamma")
    missing = [k for k in required if k not in sec]
    if missing:
        raise ConfigError(f"[problem] custom problem misses keys: {', '.join(missing)}")
    try:
        lower = [float(v) for v in _split(sec["lower"])]
        upper = [float(v) for v in _split(sec["upper"])]
        prob = make_problem_from_expressions(
            lower, upper, float(sec["T"]), sec["diffusion"], sec["reaction"],
            _split(sec["spatial"]), _split(sec["beta"]), sec["gamma"], name=sec.get("name", "custom"),
        )
        mid = prob.box.midpoint
        c = float(prob.c(mid))
        prob.a(mid)
        prob.separable.beta(mid)
        prob.separable.gamma(0.0)
        for g in prob.separable.spatial:
            g(np.array([0.5]), np.array([0.5]))
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"[problem] invalid custom problem: {exc}") from exc
    if not c > 0:
        raise ConfigError(f"[problem] diffusion must be positive, got {c} at the box midpoint")
    return prob


def load_config(path, environ=None):
    """Parse and validate an INI experiment file.

    Raises
    ------
    ConfigError
        On unreadable files, unknown modes, bad numbers or inconsistent
        tolerances.
    """
    environ = os.environ if environ is None else environ
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";;"))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def sec(name):
        return parser[name] if parser.has_section(name) else {}

    prob_sec, disc, train, newton, run_sec = (
        sec("problem"), sec("discretization"), sec("training"), sec("newton"), sec("run"),
    )
    example = prob_sec.get("example", "example1")
    try:
        T = float(disc["T"]) if "T" in disc else None
        problem = _custom_problem(prob_sec) if example == "custom" else resolve_problem(example)
        if T is not None:
            problem = problem.with_final_time(T)
        cfg = ExperimentConfig(
            problem=problem, example=example,
            n=int(disc.get("n", 50)), K=int(disc.get("K", 400)), T=T,
            mode=train.get("mode", "rb_estimator"),
            train_counts=_counts(train.get("train_counts", "60"), "train_counts"),
            test_counts=_counts(train.get("test_counts", "100"), "test_counts"),
            tol=float(train.get("tol", 1e-3)), tol_rb=float(train.get("tol_rb", 1e-4)),
            tol_L=float(train.get("tol_L", 1e-5)), deim_size=int(train.get("deim_size", 72)),
            newton_tol=float(newton.get("tol", 1e-10)), newton_max_iter=int(newton.get("max_iter", 50)),
            output_dir=environ.get(OUTPUT_ENV) or run_sec.get("output_dir", "nsrb-output"),
            n_jobs=int(run_sec.get("n_jobs", 1)), seed=int(run_sec.get("seed", 0)),
            source={s: dict(parser[s]) for s in parser.sections()},
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc
    _validate(cfg)
    return cfg


def _validate(cfg):
    if cfg.mode not in MODES:
        raise ConfigError(f"unknown mode {cfg.mode!r}; choose from {', '.join(MODES)}")
    if cfg.n < 2 or cfg.K < 1:
        raise ConfigError(f"need n >= 2 and K >= 1, got n={cfg.n}, K={cfg.K}")
    if not cfg.tol > 0 or not cfg.tol_rb > 0 or not cfg.tol_L > 0:
        raise ConfigError("tolerances must be positive")
    if cfg.mode == "rb_deim_adaptive" and cfg.tol < cfg.tol_rb + cfg.tol_L:
        raise ConfigError(f"adaptive mode needs tol >= tol_rb + tol_L, got {cfg.tol} < {cfg.tol_rb} + {cfg.tol_L}")
    if cfg.deim_size < 1:
        raise ConfigError(f"deim_size must be at least 1, got {cfg.deim_size}")
    if not cfg.newton_tol > 0 or cfg.newton_max_iter < 1:
        raise ConfigError("Newton tolerance must be positive and max_iter at least 1")
    if cfg.n_jobs < 1:
        raise ConfigError(f"n_jobs must be at least 1, got {cfg.n_jobs}")
    dim = cfg.problem.box.dim
    for key in ("train_counts", "test_counts"):
        counts = getattr(cfg, key)
        if len(counts) not in (1, dim):
            raise ConfigError(f"{key}: need 1 or {dim} counts, got {len(counts)}")


def build_model(cfg, K=None):
    """Unfitted estimator for the configured mode."""
    common = dict(
        problem=cfg.problem, n=cfg.n, K=cfg.K if K is None else K, T=None, tol=cfg.tol,
        newton_tol=cfg.newton_tol, newton_max_iter=cfg.newton_max_iter, n_jobs=cfg.n_jobs,
    )
    if cfg.mode == "rb_true_error":
        return PODGreedyRB(error_mode="true_error", **common)
    if cfg.mode == "rb_estimator":
        return PODGreedyRB(error_mode="estimator", **common)
    if cfg.mode == "rb_deim_classical":
        return ClassicalRBDEIM(deim_size=cfg.deim_size, **common)
    return AdaptiveRBDEIM(tol_rb=cfg.tol_rb, tol_L=cfg.tol_L, **common)


def _out_dir(cfg):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config_echo(cfg, out):
    echo = configparser.ConfigParser()
    echo.optionxform = str
    for name, values in cfg.source.items():
        echo[name] = values
    echo["resolved"] = {
        "example": cfg.example, "mode": cfg.mode, "n": str(cfg.n), "K": str(cfg.K),
        "T": repr(cfg.problem.T), "output_dir": str(out),
    }
    with open(out / "config_echo.ini", "w", encoding="utf-8") as fh:
        echo.write(fh)


def _evaluate_and_write(model, test_set, path, n_jobs):
    """Evaluate the test set in chunks, appending rows so partial results survive failures."""
    reports = []
    chunk = max(1, int(n_jobs))
    for start in range(0, len(test_set), chunk):
        reports.extend(model.evaluate(test_set[start:start + chunk]))
        write_csv(path, [r.row() for r in reports])
    return reports


def _plot_files(out, reports, trace):
    dim = len(reports[0].mu)
    mu_cols = [f"mu{i + 1}" for i in range(dim)]
    err_rows, est_rows = [], []
    for r in reports:
        base = dict(zip(mu_cols, r.mu))
        err_rows.append({**base, "err_PdeltaY": r.err_PdeltaY})
        est_rows.append({**base, "estimate": r.estimate})
    write_csv(out / "plot_error_vs_parameter.csv", err_rows)
    write_csv(out / "plot_estimate_vs_parameter.csv", est_rows)
    if trace is not None:
        write_csv(out / "plot_training_history.csv", _history_rows(trace))


def _history_rows(trace):
    return [{"iteration": row["iteration"], "delta_max": row["delta_max"]} for row in trace.rows()]


def _report_row(cfg, model, summary, n_train):
    l, L = model.sizes_
    row = {
        "example": cfg.example, "mode": cfg.mode, "n": cfg.n, "K": model.ops_.K, "T": model.problem_.T,
        "n_train": n_train, "size_rb": l, "size_deim": L,
        "offline_deim_seconds": model.offline_seconds_["deim"],
        "offline_rb_seconds": model.offline_seconds_["rb"],
        "offline_seconds": model.offline_seconds_["deim"] + model.offline_seconds_["rb"],
    }
    row.update(summary)
    return row


def _fit(cfg, model, out, train):
    try:
        return model.fit(train)
    except StagnationError as exc:
        if exc.trace is not None:
            write_csv(out / "trace.csv", exc.trace.rows())
        raise


def run(cfg):
    """Train, validate on the test set and write all output files.

    Returns
    -------
    dict
        The single ``report.csv`` row.
    """
    out = _out_dir(cfg)
    _write_config_echo(cfg, out)
    train, test = cfg.train_set, cfg.test_set
    model = _fit(cfg, build_model(cfg), out, train)
    write_csv(out / "trace.csv", model.trace_.rows())
    save_artifact(out / "trained.txt", model.basis_.Psi, model.deim_, _artifact_meta(cfg, model))
    reports = _evaluate_and_write(model, test, out / "per_parameter.csv", cfg.n_jobs)
    row = _report_row(cfg, model, summarize_reports(reports), len(train))
    write_csv(out / "report.csv", [row])
    _plot_files(out, reports, model.trace_)
    return row


def _artifact_meta(cfg, model):
    return {"example": cfg.example, "mode": cfg.mode, "n": cfg.n, "K": model.ops_.K, "T": repr(model.problem_.T)}


def sweep_projection_error(cfg, K_list, reuse_basis=False):
    """Test-set average of the projection estimator for each ``K``.

    Retrains per ``K`` unless ``reuse_basis``, in which case the surrogate
    trained at the largest ``K`` is evaluated on every grid.
    """
    K_list = [int(k) for k in K_list]
    if not K_list or any(k < 1 for k in K_list) or K_list != sorted(set(K_list)):
        raise ConfigError(f"K list must be strictly ascending positive integers, got {K_list}")
    out = _out_dir(cfg)
    _write_config_echo(cfg, out)
    train, test = cfg.train_set, cfg.test_set
    base = _fit(cfg, build_model(cfg, K=K_list[-1]), out, train) if reuse_basis else None
    rows = []
    for K in K_list:
        start = time.perf_counter()
        model = base.with_time_steps(K) if reuse_basis else _fit(cfg, build_model(cfg, K=K), out, train)
        reports = model.evaluate(test)
        rows.append({
            "K": K, "av_delta_P": float(np.mean([r.delta_P for r in reports])),
            "size_rb": model.sizes_[0], "size_deim": model.sizes_[1],
            "seconds": time.perf_counter() - start,
        })
        write_csv(out / "pdelta_vs_K.csv", rows)
        logger.info("K=%d: average projection estimator %.3e", K, rows[-1]["av_delta_P"])
    write_csv(out / "plot_pdelta_vs_K.csv", [{"K": r["K"], "av_delta_P": r["av_delta_P"]} for r in rows])
    return rows


def save_trained(cfg, path):
    out = _out_dir(cfg)
    model = _fit(cfg, build_model(cfg), out, cfg.train_set)
    save_artifact(path, model.basis_.Psi, model.deim_, _artifact_meta(cfg, model))
    write_csv(out / "trace.csv", model.trace_.rows())
    return model


def evaluate_trained(cfg, path):
    """Online-only validation of a saved surrogate on the configured test set."""
    try:
        art = load_artifact(path)
        deim = art.deim
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load artifact {path}: {exc}") from exc
    model = build_model(cfg)
    try:
        model.set_trained(art.Psi, deim)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _out_dir(cfg)
    reports = _evaluate_and_write(model, cfg.test_set, out / "per_parameter.csv", cfg.n_jobs)
    row = _report_row(cfg, model, summarize_reports(reports), 0)
    write_csv(out / "report.csv", [row])
    _plot_files(out, reports, None)
    return row


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parser():
    p = _Parser(prog="nsrb", description="Reduced-basis surrogates for a nonsmooth parabolic problem.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    r = sub.add_parser("run", help="train, validate and write reports")
    r.add_argument("--config", required=True)
    s = sub.add_parser("sweep-pdelta", help="projection estimator for several time grids")
    s.add_argument("--config", required=True)
    s.add_argument("--k-list", required=True, help="comma-separated ascending K values")
    s.add_argument("--reuse-basis", action="store_true", help="train once at the largest K")
    for name, text in (("save-artifact", "train and save the surrogate"), ("load-artifact", "validate a saved surrogate")):
        a = sub.add_parser(name, help=text)
        a.add_argument("path")
        a.add_argument("--config", required=True)
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "run":
            row = run(cfg)
            print(f"l={row['size_rb']} L={row['size_deim']} av_err={row['av_err_PdeltaY']:.3e} "
                  f"av_eff={row['av_efficiency']:.3f} output={cfg.output_dir}")
        elif args.command == "sweep-pdelta":
            try:
                ks = [int(k) for k in args.k_list.split(",") if k.strip()]
            except ValueError as exc:
                raise ConfigError(f"--k-list: {exc}") from exc
            for row in sweep_projection_error(cfg, ks, args.reuse_basis):
                print(f"K={row['K']} av_delta_P={row['av_delta_P']:.3e}")
        elif args.command == "save-artifact":
            model = save_trained(cfg, args.path)
            print(f"saved l={model.sizes_[0]} L={model.sizes_[1]} to {args.path}")
        else:
            row = evaluate_trained(cfg, args.path)
            print(f"av_err={row['av_err_PdeltaY']:.3e} output={cfg.output_dir}")
    except ConfigError as exc:
        print(f"nsrb: configuration error: {exc}", file=sys.stderr)
        return 1
    except NUMERICAL_ERRORS as exc:
        print(f"nsrb: numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
