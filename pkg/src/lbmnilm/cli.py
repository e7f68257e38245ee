"""Command-line entry point.

Subcommands ``fit``, ``synth``, ``disaggregate``, ``evaluate``, ``bench`` and
``resample``; global flags ``--config``, ``--seed``, ``--out``, ``--threads``.
Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .evaluation import (METRICS, ExperimentConfig, SynthSpec, compute_metrics,
                         HOUSES, generate_synthetic, report_csv, run_experiment)
from .hmm import ApplianceHmm, fit_hmm
from .inference import InferenceError, inference_settings, run_map
from .io import (DataError, Trace, atomic_write_text, day_windows, load_hmm,
                 load_population, read_trace, resample, save_hmm,
                 save_population, write_json, write_trace)
from .melding import MethodConfig
from .qp import NotConvexError, SolverSettings
from .stats import attach_induced_priors, fit_population

log = logging.getLogger("lbmnilm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SYNTH_START = datetime(2024, 1, 1, tzinfo=timezone.utc)


class ConfigError(ValueError):
    """Invalid command line or configuration file."""


@dataclass
class RunConfig:
    """Settings shared by all subcommands; every field has a default.

    ``methods`` holds :class:`MethodConfig` dicts, ``solver`` overrides for
    :func:`inference_settings`, ``experiment`` overrides for
    :class:`ExperimentConfig` used by ``bench``.
    """

    seed: int = 0
    dt: float = 2.0
    K: int = 3
    induced_samples: int = 1000
    days: int = 20
    sigma: float = 1.0
    house: list | None = None
    scale: str = "desk"
    houses: int = 1
    methods: list = field(default_factory=lambda: [
        m.to_dict() for m in ExperimentConfig().methods])
    solver: dict = field(default_factory=dict)
    max_outer: int = 50
    rel_tol: float = 1e-5
    variance_floor: float = 1.0
    experiment: dict = field(default_factory=dict)

    @property
    def samples_per_day(self) -> int:
        n = 1440.0 / self.dt
        if n != int(n):
            raise ConfigError(f"dt={self.dt} min does not divide a day")
        return int(n)

    def method_configs(self) -> list[MethodConfig]:
        try:
            return [MethodConfig.from_dict(m) for m in self.methods]
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid method config: {e}") from e

    def solver_settings(self) -> SolverSettings:
        try:
            return inference_settings(**self.solver)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid solver config: {e}") from e

    def house_models(self) -> list[ApplianceHmm]:
        if self.house is None:
            return HOUSES[self.scale]()
        try:
            return [ApplianceHmm.from_dict(h) for h in self.house]
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid house model: {e}") from e

    def experiment_config(self) -> ExperimentConfig:
        base = {"methods": self.methods, "house": self.house, "scale": self.scale,
                "houses": self.houses,
                "T": self.samples_per_day, "dt": self.dt, "sigma": self.sigma,
                "K": self.K, "induced_samples": self.induced_samples,
                "seed": self.seed, "solver": asdict(self.solver_settings()),
                "max_outer": self.max_outer, "rel_tol": self.rel_tol,
                "variance_floor": self.variance_floor, "test_days": self.days}
        base.update(self.experiment)
        try:
            return ExperimentConfig.from_dict(base)
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid experiment config: {e}") from e

    def validate(self) -> "RunConfig":
        if self.scale not in HOUSES:
            raise ConfigError(f"scale must be one of {sorted(HOUSES)}")
        if self.houses < 1:
            raise ConfigError("houses must be >= 1")
        if not self.dt > 0:
            raise ConfigError("dt must be > 0")
        if self.K < 2 or self.days < 1 or self.induced_samples < 2:
            raise ConfigError("need K >= 2, days >= 1, induced_samples >= 2")
        if self.sigma < 0 or self.max_outer < 1 or self.variance_floor < 0:
            raise ConfigError("need sigma >= 0, max_outer >= 1, variance_floor >= 0")
        _ = self.samples_per_day
        self.method_configs()
        self.solver_settings()
        self.house_models()
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path: str | None, seed: int | None,
                scale: str | None = None) -> RunConfig:
    """Read a TOML or JSON config (by extension), then apply ``--seed`` and
    ``--scale``."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            if p.suffix.lower() == ".toml":
                data = tomllib.loads(p.read_text(encoding="utf-8"))
            else:
                data = json.loads(p.read_text(encoding="utf-8"))
        except Exception as e:  # any parser error is a config error
            raise ConfigError(f"{p}: cannot parse config: {e}") from e
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if seed is not None:
        data["seed"] = seed
    if scale is not None:
        data["scale"] = scale
    try:
        cfg = RunConfig(**data)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    return cfg.validate()


# -- subcommands ----------------------------------------------------------------

def _trace_files(paths) -> dict[str, Path]:
    files = {}
    for p in map(Path, paths):
        group = sorted(p.glob("*.csv")) if p.is_dir() else [p]
        for f in group:
            if not f.is_file():
                raise DataError(f"trace file not found: {f}")
            if f.stem in files:
                raise DataError(f"duplicate appliance name {f.stem!r}")
            files[f.stem] = f
    if not files:
        raise DataError("no trace CSV files given")
    return files


def _days(trace: Trace, cfg: RunConfig, path) -> list[tuple[str, np.ndarray]]:
    if trace.step != int(round(cfg.dt * 60)):
        raise DataError(f"{path}: sampling step {trace.step} s does not match "
                        f"dt = {cfg.dt} min; use the resample subcommand")
    days = day_windows(trace)
    if not days:
        raise DataError(f"{path}: no complete day window")
    return days


def cmd_fit(args, cfg: RunConfig) -> int:
    files = _trace_files(args.traces)
    hmms, traces = {}, {}
    for name, f in files.items():
        days = [v for _, v in _days(read_trace(f), cfg, f)]
        hmms[name] = fit_hmm(days, K=cfg.K, name=name)
        traces[name] = days
    pop = fit_population(traces, hmms, dt=cfg.dt)
    attach_induced_priors(pop, hmms, cfg.samples_per_day, cfg.induced_samples, cfg.seed)
    out = Path(args.out)
    for name, h in hmms.items():
        save_hmm(out / "models" / f"{name}.json", h)
    save_population(out / "population.json", pop)
    write_json(out / "fit_config.json", {"config": cfg.to_dict(),
                                         "traces": sorted(files)})
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    house = cfg.house_models()
    T = cfg.samples_per_day
    truth, mains, _ = generate_synthetic(SynthSpec(house, cfg.days, T, cfg.sigma, cfg.seed))
    step = int(round(cfg.dt * 60))
    out = Path(args.out)
    for i, h in enumerate(house):
        write_trace(out / "truth" / f"{h.name}.csv",
                    Trace(SYNTH_START, step, truth[:, i].ravel()))
    write_trace(out / "mains.csv", Trace(SYNTH_START, step, mains.ravel()))
    write_json(out / "synth_config.json", {"config": cfg.to_dict()})
    return EXIT_OK


def _load_models(models_dir: Path):
    files = sorted((models_dir / "models").glob("*.json"))
    if not files:
        raise DataError(f"no appliance models under {models_dir / 'models'}")
    hmms = [load_hmm(f) for f in files]
    pop_path = models_dir / "population.json"
    pop = load_population(pop_path) if pop_path.is_file() else None
    if pop is not None:
        missing = [h.name for h in hmms if h.name not in pop.appliances]
        if missing:
            raise DataError(f"population model lacks {', '.join(missing)}")
    return hmms, pop


def _disaggregate_day(job):
    day, Y, hmms, pop, method, cfg = job
    res = run_map(Y, hmms, pop, method, cfg.solver_settings(), dt=cfg.dt,
                  max_outer=cfg.max_outer, rel_tol=cfg.rel_tol,
                  variance_floor=cfg.variance_floor)
    return day, method.name, res


def _map(fn, jobs, threads: int):
    if threads <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, jobs))


def cmd_disaggregate(args, cfg: RunConfig) -> int:
    hmms, pop = _load_models(Path(args.models))
    methods = cfg.method_configs()
    if pop is None and any(m.active_stats for m in methods):
        raise DataError("population.json is required for pr and lbm")
    days = _days(read_trace(args.mains), cfg, args.mains)
    jobs = [(day, Y, hmms, pop, m, cfg) for m in methods for day, Y in days]
    out = Path(args.out)
    for day, name, res in _map(_disaggregate_day, jobs, args.threads):
        base = out / name / day
        doc = res.to_dict()
        doc["run_config"] = cfg.to_dict()
        doc["day"] = day
        write_json(base / "result.json", doc)
        start = datetime.fromisoformat(day).replace(tzinfo=timezone.utc)
        step = int(round(cfg.dt * 60))
        for h, x in zip(hmms, res.signals):
            write_trace(base / f"{h.name}.csv", Trace(start, step, np.asarray(x, float)))
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    truth_files = _trace_files([args.truth])
    pred_files = _trace_files([args.pred])
    missing = sorted(set(truth_files) - set(pred_files))
    if missing:
        raise DataError(f"no prediction for {', '.join(missing)}")
    names = sorted(truth_files)
    truth = {n: dict(_days(read_trace(truth_files[n]), cfg, truth_files[n])) for n in names}
    pred = {n: dict(_days(read_trace(pred_files[n]), cfg, pred_files[n])) for n in names}
    common = sorted(set.intersection(*(set(truth[n]) & set(pred[n]) for n in names)))
    if not common:
        raise DataError("truth and prediction share no complete day")
    rows = []
    for day in common:
        x = np.array([truth[n][day] for n in names])
        xh = np.array([pred[n][day] for n in names])
        m = compute_metrics(x, xh, cfg.dt, names)
        rows.append({"day": day, **m.as_row(), "per_appliance": m.per_appliance})
    lines = ["day," + ",".join(METRICS)]
    lines += [r["day"] + "," + ",".join("n/a" if r[k] is None else f"{r[k]:.10g}"
                                        for k in METRICS) for r in rows]
    out = Path(args.out)
    atomic_write_text(out / "metrics.csv", "\n".join(lines) + "\n")
    write_json(out / "metrics.json", {"days": rows, "config": cfg.to_dict()})
    return EXIT_OK


def cmd_bench(args, cfg: RunConfig) -> int:
    exp = cfg.experiment_config()

    def progress(method, day, m, wall):
        log.info("%s day %d: nde=%s cae=%s (%.1f s)", method, day, m.nde, m.cae, wall)

    report = run_experiment(exp, args.out, progress=progress, threads=args.threads)
    sys.stdout.write(report_csv(report["rows"]))
    return EXIT_NUMERIC if any(report["failures"].values()) and not report["days"] \
        else EXIT_OK


def cmd_resample(args, cfg: RunConfig) -> int:
    write_trace(Path(args.out), resample(read_trace(args.input), args.step))
    return EXIT_OK


# -- entry point ----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", required=True, help="output directory (file for resample)")
    common.add_argument("--threads", type=int, default=1,
                        help="worker processes across day windows")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="lbmnilm", description="Energy disaggregation with "
                "latent Bayesian melding over additive factorial HMMs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    s = sub.add_parser("fit", parents=[common], help="fit appliance models")
    s.add_argument("traces", nargs="+", help="appliance CSVs or directories of them")
    s.set_defaults(func=cmd_fit)
    s = sub.add_parser("synth", parents=[common], help="generate synthetic days")
    s.add_argument("--scale", choices=sorted(HOUSES),
                   help="generator house: desk (3 appliances) or full (7)")
    s.set_defaults(func=cmd_synth)
    s = sub.add_parser("disaggregate", parents=[common], help="disaggregate mains")
    s.add_argument("mains", help="mains CSV")
    s.add_argument("--models", required=True, help="directory written by fit")
    s.set_defaults(func=cmd_disaggregate)
    s = sub.add_parser("evaluate", parents=[common], help="score predictions")
    s.add_argument("--truth", required=True, help="directory of true appliance CSVs")
    s.add_argument("--pred", required=True, help="directory of predicted CSVs")
    s.set_defaults(func=cmd_evaluate)
    s = sub.add_parser("bench", parents=[common], help="run the synthetic comparison")
    s.add_argument("--scale", choices=sorted(HOUSES),
                   help="generator house: desk (3 appliances) or full (7)")
    s.set_defaults(func=cmd_bench)
    s = sub.add_parser("resample", parents=[common], help="sum samples into coarser bins")
    s.add_argument("input", help="trace CSV")
    s.add_argument("--step", type=int, default=120, help="output step in seconds")
    s.set_defaults(func=cmd_resample)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config, args.seed, getattr(args, "scale", None))
        return args.func(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (InferenceError, NotConvexError, FloatingPointError,
            np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
