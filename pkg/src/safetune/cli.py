"""
Command-line experiment harness.

Verbs:

* ``run <config.yaml>`` — run seeded optimizations and write one CSV trace
  per seed plus a JSON summary.
* ``summarize <dir>`` — aggregate traces: violation rate, iterations to
  the width tolerance, safe-set growth curves.
* ``oracle <config.yaml>`` — brute-force baseline (reachable set and its
  optimum) for a synthetic benchmark.

Config files are YAML with a ``schema_version`` field; unknown keys are
rejected so typos fail loudly. All randomness derives from one root seed
per run via positional stream splitting, so every component is
independently reproducible and reruns are byte-identical.
"""

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from . import bench, oracle
from .gp_core import KernelSpec, SurrogateGP, SurrogateKernelSpec
from .safeopt import (
    AlgoConfig,
    BetaSchedule,
    ParameterDomain,
    RunTrace,
    RunTraceEntry,
    SafeOptMC,
)

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


# --------------------------------------------------------------------------
# Config parsing
# --------------------------------------------------------------------------


def _require(mapping, key, where):
    if key not in mapping:
        raise ConfigError(f"missing required field {where}.{key}")
    return mapping[key]


def _check_keys(mapping, allowed, where):
    unknown = set(mapping) - set(allowed)
    if unknown:
        raise ConfigError(
            f"unknown field(s) {sorted(unknown)} in {where}; "
            f"allowed: {sorted(allowed)}"
        )


def _positive(value, where):
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where} must be a number") from None
    if value <= 0:
        raise ConfigError(f"{where} must be positive")
    return value


def _grid_axis(axis, where):
    _check_keys(axis, {"start", "stop", "num"}, where)
    start = float(_require(axis, "start", where))
    stop = float(_require(axis, "stop", where))
    num = int(_require(axis, "num", where))
    if num < 2 or stop <= start:
        raise ConfigError(f"{where} must span stop > start with num >= 2")
    return np.linspace(start, stop, num)


def _parse_grid(spec, where):
    axes = [_grid_axis(a, f"{where}[{k}]") for k, a in enumerate(spec)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _resolve_scale(value, where, baseline_cost):
    """
    A magnitude field: either a plain number or a mapping
    ``{scale_of_baseline_cost: x}`` resolved against the plant's
    noise-free cost at the initial parameters.
    """
    if isinstance(value, dict):
        _check_keys(value, {"scale_of_baseline_cost"}, where)
        factor = _positive(
            _require(value, "scale_of_baseline_cost", where),
            f"{where}.scale_of_baseline_cost",
        )
        if baseline_cost is None:
            raise ConfigError(
                f"{where}: scale_of_baseline_cost needs a plant benchmark"
            )
        return factor * baseline_cost
    return _positive(value, where)


def _parse_kernel(spec, where, baseline_cost):
    _check_keys(spec, {"family", "prior_std", "lengthscales"}, where)
    family = _require(spec, "family", where)
    prior_std = _resolve_scale(
        _require(spec, "prior_std", where), f"{where}.prior_std", baseline_cost
    )
    ls = _require(spec, "lengthscales", where)
    if np.isscalar(ls):
        ls = [ls]
    try:
        return KernelSpec(family, prior_std**2, tuple(float(l) for l in ls))
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _parse_outputs(entries, where, baseline_cost):
    kernels, noises = [], []
    for k, entry in enumerate(entries):
        loc = f"{where}[{k}]"
        _check_keys(entry, {"role", "kernel", "noise_std"}, loc)
        kernels.append(
            _parse_kernel(_require(entry, "kernel", loc), f"{loc}.kernel", baseline_cost)
        )
        noises.append(
            _resolve_scale(
                _require(entry, "noise_std", loc), f"{loc}.noise_std", baseline_cost
            )
        )
    if not kernels:
        raise ConfigError(f"{where} must list at least one output")
    return tuple(kernels), tuple(noises)


def _parse_beta(spec, where):
    _check_keys(spec, {"mode", "beta_sqrt", "delta", "pi_rule", "t_max"}, where)
    try:
        return BetaSchedule(
            mode=spec.get("mode", "constant"),
            beta_sqrt=spec.get("beta_sqrt", 2.0),
            delta=spec.get("delta"),
            pi_rule=spec.get("pi_rule", "n2pi2over6"),
            t_max=spec.get("t_max"),
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _parse_algorithm(spec, where, kernels):
    _check_keys(
        spec,
        {"mode", "lipschitz", "epsilon", "beta", "per_output_scaling"},
        where,
    )
    lipschitz = spec.get("lipschitz", "kernel")
    if lipschitz == "kernel":
        # High-probability slope scale encoded by a Matern-family kernel:
        # prior std times sqrt(3) over the smallest lengthscale.
        lipschitz = [
            math.sqrt(3.0) * k.prior_std / min(k.lengthscales) for k in kernels
        ]
    try:
        return AlgoConfig(
            mode=spec.get("mode", "gp_direct"),
            lipschitz=lipschitz,
            epsilon=float(spec.get("epsilon", 0.0)),
            beta=_parse_beta(spec.get("beta", {}), f"{where}.beta"),
            per_output_scaling=spec.get("per_output_scaling", True),
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


_TOP_KEYS = {
    "schema_version",
    "name",
    "benchmark",
    "domain",
    "outputs",
    "algorithm",
    "run",
    "context",
}

_BENCH_KEYS = {
    "kind",
    "unsafe_range",
    "seed_margin",
    "instance_seed",
    "require_unsafe_optimum",
    "plant",
    "sign_convention",
    "reference_speed",
    "measurement_noise",
}

_PLANT_KEYS = {
    "reference",
    "duration",
    "n_samples",
    "step_amplitude",
    "circle_radius",
    "warmup_samples",
    "actuation_lag",
    "disturbance_std",
    "accel_limit",
    "cross_coupling",
    "gravity",
    "rate_limit",
    "rmse_limit",
}

_RUN_KEYS = {"seeds", "max_iterations", "width_tol", "out_dir", "initial_safe"}

_CONTEXT_KEYS = {"kernel", "labels", "initial", "schedule", "iterations_per_context"}


class ExperimentConfig:
    """Validated experiment description built from a YAML mapping."""

    def __init__(self, raw, base_dir="."):
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        _check_keys(raw, _TOP_KEYS, "config")
        version = _require(raw, "schema_version", "config")
        if version != SCHEMA_VERSION:
            raise ConfigError(
                f"config.schema_version {version} unsupported "
                f"(expected {SCHEMA_VERSION})"
            )
        self.name = raw.get("name", "experiment")

        self.benchmark = dict(_require(raw, "benchmark", "config"))
        _check_keys(self.benchmark, _BENCH_KEYS, "config.benchmark")
        self.kind = _require(self.benchmark, "kind", "config.benchmark")
        if self.kind not in ("synthetic", "step_response", "circle"):
            raise ConfigError(f"config.benchmark.kind {self.kind!r} unknown")
        plant_overrides = dict(self.benchmark.get("plant", {}))
        _check_keys(plant_overrides, _PLANT_KEYS, "config.benchmark.plant")
        self.plant_overrides = plant_overrides
        if self.kind == "synthetic":
            ref_cost = None
        else:
            ref_cost = bench.baseline_cost(
                self.plant(),
                float(self.benchmark.get("reference_speed", 1.0))
                if self.kind == "circle"
                else 0.0,
            )
        self.baseline_cost = ref_cost

        self.grid = _parse_grid(_require(raw, "domain", "config"), "config.domain")
        self.kernels, self.noise_std = _parse_outputs(
            _require(raw, "outputs", "config"), "config.outputs", ref_cost
        )
        self.algorithm = _parse_algorithm(
            raw.get("algorithm", {}), "config.algorithm", self.kernels
        )

        run = dict(_require(raw, "run", "config"))
        _check_keys(run, _RUN_KEYS, "config.run")
        seeds = _require(run, "seeds", "config.run")
        if isinstance(seeds, dict):
            _check_keys(seeds, {"start", "count"}, "config.run.seeds")
            start = int(seeds.get("start", 0))
            seeds = list(range(start, start + int(_require(seeds, "count", "config.run.seeds"))))
        self.seeds = [int(s) for s in seeds]
        if not self.seeds:
            raise ConfigError("config.run.seeds must be non-empty")
        self.max_iterations = int(_require(run, "max_iterations", "config.run"))
        if self.max_iterations < 1:
            raise ConfigError("config.run.max_iterations must be >= 1")
        self.width_tol = run.get("width_tol")
        if self.width_tol is not None:
            self.width_tol = _positive(self.width_tol, "config.run.width_tol")
        self.out_dir = Path(base_dir) / run.get("out_dir", f"{self.name}_out")
        self.initial_safe = run.get("initial_safe")
        if self.kind != "synthetic":
            if self.initial_safe is None:
                raise ConfigError(
                    "config.run.initial_safe is required for plant benchmarks"
                )
            self.initial_safe = [list(map(float, p)) for p in self.initial_safe]

        self.context = raw.get("context")
        if self.context is not None:
            ctx = dict(self.context)
            _check_keys(ctx, _CONTEXT_KEYS, "config.context")
            self.context = ctx

    # -- derived objects ---------------------------------------------------

    def surrogate_spec(self):
        return SurrogateKernelSpec(self.kernels, self.noise_std)

    def plant(self):
        reference = "circle" if self.kind == "circle" else "step"
        try:
            return bench.PlantSpec(reference=reference, **self.plant_overrides)
        except ValueError as exc:
            raise ConfigError(f"config.benchmark.plant: {exc}") from None

    def resolved(self):
        """Plain dict of the fully resolved configuration (for --dry-run)."""
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "kind": self.kind,
            "baseline_cost": self.baseline_cost,
            "domain_points": int(self.grid.shape[0]),
            "domain_dim": int(self.grid.shape[1]),
            "outputs": [
                {
                    "family": k.family,
                    "prior_std": k.prior_std,
                    "lengthscales": list(k.lengthscales),
                    "noise_std": n,
                }
                for k, n in zip(self.kernels, self.noise_std)
            ],
            "algorithm": {
                "mode": self.algorithm.mode,
                "lipschitz": list(np.atleast_1d(self.algorithm.lipschitz).astype(float)),
                "epsilon": self.algorithm.epsilon,
                "beta_mode": self.algorithm.beta.mode,
            },
            "seeds": self.seeds,
            "max_iterations": self.max_iterations,
            "out_dir": str(self.out_dir),
        }


def load_config(path):
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
    return ExperimentConfig(raw, base_dir=path.parent)


# --------------------------------------------------------------------------
# Trace serialization
# --------------------------------------------------------------------------


def write_trace_csv(path, trace, dim, n_outputs):
    """
    One row per iteration. Floats are written with ``repr`` so parsing
    the file back reproduces the exact in-memory values.
    """
    header = (
        ["n"]
        + [f"a{k}" for k in range(dim)]
        + ["output", "width"]
        + [f"obs{k}" for k in range(n_outputs)]
        + ["n_safe", "n_maximizers", "n_expanders"]
        + [f"best{k}" for k in range(dim)]
        + ["best_lower", "misspec_events", "violation"]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for e in trace.entries:
            row = [e.iteration]
            row += [repr(float(x)) for x in e.point]
            row += [e.output, repr(float(e.width))]
            row += [repr(float(v)) for v in e.observations]
            row += [e.n_safe, e.n_maximizers, e.n_expanders]
            row += [repr(float(x)) for x in e.best_point]
            row += [repr(float(e.best_lower)), e.misspec_events]
            row += ["" if e.violation is None else int(e.violation)]
            writer.writerow(row)


def read_trace_csv(path):
    """Parse a trace written by :func:`write_trace_csv` back into a RunTrace."""
    trace = RunTrace()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        dim = sum(1 for c in reader.fieldnames if c.startswith("a"))
        n_outputs = sum(1 for c in reader.fieldnames if c.startswith("obs"))
        for row in reader:
            violation = row["violation"]
            trace.append(
                RunTraceEntry(
                    iteration=int(row["n"]),
                    point_index=-1,
                    point=tuple(float(row[f"a{k}"]) for k in range(dim)),
                    output=int(row["output"]),
                    width=float(row["width"]),
                    observations=tuple(
                        float(row[f"obs{k}"]) for k in range(n_outputs)
                    ),
                    n_safe=int(row["n_safe"]),
                    n_maximizers=int(row["n_maximizers"]),
                    n_expanders=int(row["n_expanders"]),
                    best_index=-1,
                    best_point=tuple(float(row[f"best{k}"]) for k in range(dim)),
                    best_lower=float(row["best_lower"]),
                    misspec_events=int(row["misspec_events"]),
                    violation=None if violation == "" else bool(int(violation)),
                )
            )
    return trace


# --------------------------------------------------------------------------
# Benchmark assembly
# --------------------------------------------------------------------------


def _synthetic_instance(config, seed):
    b = config.benchmark
    return bench.sample_safety_instance(
        int(b.get("instance_seed", seed)),
        config.surrogate_spec(),
        config.grid,
        unsafe_range=tuple(b.get("unsafe_range", (0.25, 0.55))),
        seed_margin=float(b.get("seed_margin", 0.3)),
        require_unsafe_optimum=bool(b.get("require_unsafe_optimum", False)),
    )


def _plant_evaluator(config, plant, seed):
    b = config.benchmark
    noise = b.get("measurement_noise")
    if noise is not None:
        noise = tuple(
            _resolve_scale(
                v,
                f"config.benchmark.measurement_noise[{k}]",
                config.baseline_cost,
            )
            for k, v in enumerate(noise)
        )
    return bench.PlantEvaluator(
        plant,
        root_seed=seed,
        sign_convention=b.get("sign_convention", "improvement"),
        reference_speed=float(b.get("reference_speed", 1.0)),
        measurement_noise=noise,
    )


def _point_indices(grid, points, where):
    indices = []
    lookup = {tuple(p): k for k, p in enumerate(np.round(grid, 12))}
    for p in points:
        key = tuple(np.round(np.asarray(p, dtype=float), 12))
        if key not in lookup:
            raise ConfigError(f"{where}: point {p} is not on the domain grid")
        indices.append(lookup[key])
    return indices


def run_single_seed(config, seed):
    """
    One seeded optimization run.

    Returns (trace, summary dict). All randomness (instance draw, noise)
    descends from ``seed``.
    """
    algo = AlgoConfig(
        mode=config.algorithm.mode,
        lipschitz=config.algorithm.lipschitz,
        epsilon=config.algorithm.epsilon,
        beta=config.algorithm.beta,
        per_output_scaling=config.algorithm.per_output_scaling,
        seed=seed,
    )
    summary = {"seed": seed}
    if config.kind == "synthetic":
        instance = _synthetic_instance(config, seed)
        streams = bench.seed_streams(seed, "observation_noise")
        noise_seed = streams["observation_noise"].integers(2**31)
        evaluator = instance.evaluator(noise_seed)
        violation_check = instance.violation_check()
        domain = ParameterDomain(instance.points)
        seed_indices = list(instance.safe_seed_indices)
        algo = AlgoConfig(
            mode=algo.mode,
            lipschitz=instance.lipschitz,
            epsilon=algo.epsilon,
            beta=algo.beta,
            per_output_scaling=algo.per_output_scaling,
            seed=seed,
        )
        model = SurrogateGP(instance.spec)
    else:
        plant = config.plant()
        evaluator = _plant_evaluator(config, plant, seed)
        violation_check = evaluator.violation_check()
        domain = ParameterDomain(config.grid)
        seed_indices = _point_indices(
            config.grid, config.initial_safe, "config.run.initial_safe"
        )
        model = SurrogateGP(config.surrogate_spec())
        instance = None

    opt = SafeOptMC(model, domain, seed_indices, algo)
    trace = opt.run(
        evaluator,
        config.max_iterations,
        width_tol=config.width_tol,
        violation_check=violation_check,
    )
    best_idx, best_point, best_lower = opt.best()
    summary.update(
        iterations=len(trace),
        stop_reason=trace.stop_reason,
        best_point=list(best_point),
        best_lower=best_lower,
        violations=sum(1 for e in trace.entries if e.violation),
        misspec_events=trace.entries[-1].misspec_events if len(trace) else 0,
    )
    if instance is not None:
        from scipy.spatial.distance import cdist

        seed_mask = np.zeros(domain.size, dtype=bool)
        seed_mask[seed_indices] = True
        dists = cdist(instance.points, instance.points)
        f_star = oracle.baseline_optimum(
            seed_mask, instance.truth(), instance.lipschitz,
            config.algorithm.epsilon, dists,
        )
        f_best = float(instance.tables[0][best_idx])
        summary.update(
            oracle_f_star=f_star,
            true_f_at_best=f_best,
            oracle_gap=f_star - f_best,
            unsafe_fraction=instance.unsafe_fraction,
        )
    return trace, summary


def run_experiment(config_path, out_dir=None, dry_run=False, seed_override=None,
                   stream=sys.stdout):
    """
    Execute every seed of an experiment config; write traces and summary.

    Returns the process exit status (0 on success).
    """
    try:
        config = load_config(config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if out_dir is not None:
        config.out_dir = Path(out_dir)
    if seed_override is not None:
        config.seeds = [int(seed_override)]
    if dry_run:
        json.dump(config.resolved(), stream, indent=2)
        stream.write("\n")
        return 0
    config.out_dir.mkdir(parents=True, exist_ok=True)
    summaries = []
    dim = config.grid.shape[1]
    n_outputs = len(config.kernels)
    for seed in config.seeds:
        try:
            trace, summary = run_single_seed(config, seed)
        except Exception as exc:  # partial runs leave a marker, not silence
            marker = config.out_dir / f"seed{seed:04d}.FAILED"
            marker.write_text(f"{type(exc).__name__}: {exc}\n")
            print(f"seed {seed} failed: {exc}", file=sys.stderr)
            return 1
        write_trace_csv(
            config.out_dir / f"seed{seed:04d}.csv", trace, dim, n_outputs
        )
        summaries.append(summary)
        print(
            f"seed {seed}: {summary['iterations']} iterations, "
            f"{summary['violations']} violations, best={summary['best_point']}",
            file=stream,
        )
    aggregate = {
        "schema_version": SCHEMA_VERSION,
        "name": config.name,
        "kind": config.kind,
        "seeds": config.seeds,
        "violation_runs": sum(1 for s in summaries if s["violations"]),
        "per_seed": summaries,
    }
    with open(config.out_dir / "summary.json", "w") as fh:
        json.dump(aggregate, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


# --------------------------------------------------------------------------
# Summaries and the oracle verb
# --------------------------------------------------------------------------


def summarize(trace_dir, stream=sys.stdout):
    """
    Aggregate all seed traces in a directory.

    Prints the violation rate and median iteration count, and writes
    ``safe_set_growth.csv`` with per-iteration safe-set size statistics.
    """
    trace_dir = Path(trace_dir)
    paths = sorted(trace_dir.glob("seed*.csv"))
    if not paths:
        print(f"no traces found in {trace_dir}", file=sys.stderr)
        return 2
    traces = [read_trace_csv(p) for p in paths]
    violating = sum(
        1 for t in traces if any(e.violation for e in t.entries)
    )
    lengths = [len(t) for t in traces]
    print(f"traces: {len(traces)}", file=stream)
    print(f"violation rate: {violating / len(traces):.3f}", file=stream)
    print(f"median iterations: {float(np.median(lengths)):.1f}", file=stream)
    max_n = max(lengths)
    rows = []
    for n in range(1, max_n + 1):
        sizes = [
            t.entries[n - 1].n_safe for t in traces if len(t.entries) >= n
        ]
        rows.append(
            (n, float(np.mean(sizes)), int(np.min(sizes)), int(np.max(sizes)))
        )
    growth_path = trace_dir / "safe_set_growth.csv"
    with open(growth_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["n", "mean_safe", "min_safe", "max_safe"])
        writer.writerows(rows)
    print(f"wrote {growth_path}", file=stream)
    return 0


def oracle_report(config_path, stream=sys.stdout):
    """Compute the reachable baseline for a synthetic config and print JSON."""
    try:
        config = load_config(config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if config.kind != "synthetic":
        print("oracle baselines require a synthetic benchmark", file=sys.stderr)
        return 2
    from scipy.spatial.distance import cdist

    report = []
    for seed in config.seeds:
        instance = _synthetic_instance(config, seed)
        seed_mask = np.zeros(instance.points.shape[0], dtype=bool)
        seed_mask[list(instance.safe_seed_indices)] = True
        dists = cdist(instance.points, instance.points)
        closure = oracle.reach_closure(
            seed_mask, instance.truth(), instance.lipschitz,
            config.algorithm.epsilon, dists,
        )
        report.append(
            {
                "seed": seed,
                "closure_size": int(closure.sum()),
                "f_star": oracle.baseline_optimum(
                    seed_mask, instance.truth(), instance.lipschitz,
                    config.algorithm.epsilon, dists,
                ),
                "unsafe_fraction": instance.unsafe_fraction,
            }
        )
    json.dump(report, stream, indent=2)
    stream.write("\n")
    return 0


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="safetune",
        description="Safe Bayesian optimization experiment harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a seeded experiment")
    p_run.add_argument("config", help="YAML experiment config")
    p_run.add_argument("--out", help="output directory override")
    p_run.add_argument("--seed", type=int, help="run only this seed")
    p_run.add_argument(
        "--dry-run", action="store_true",
        help="print the resolved config and exit",
    )

    p_sum = sub.add_parser("summarize", help="aggregate trace CSVs")
    p_sum.add_argument("trace_dir", help="directory with seed*.csv traces")

    p_oracle = sub.add_parser(
        "oracle", help="brute-force baseline for a synthetic config"
    )
    p_oracle.add_argument("config", help="YAML experiment config")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return run_experiment(
            args.config,
            out_dir=args.out,
            dry_run=args.dry_run,
            seed_override=args.seed,
        )
    if args.command == "summarize":
        return summarize(args.trace_dir)
    if args.command == "oracle":
        return oracle_report(args.config)
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
