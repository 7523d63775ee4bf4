"""Command line experiments

Every subcommand reads plants and weights in the matrix text format and
writes plain-text artifacts whose first line records the command, the seed
and the parameters. Exit codes: 0 success, 1 numerical or precondition
failure, 2 input error.
"""

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg, stats
from tqdm.auto import tqdm

from switched_lqr import adaptive, certificates, montecarlo, plants
from switched_lqr.control_core import (
    LinearPlant,
    LQWeights,
    dare_solve,
    format_cost,
    is_infinite,
    spectral_radius,
)
from switched_lqr.errors import (
    DefinitenessError,
    DimensionError,
    DomainError,
    MatrixFormatError,
    PreconditionError,
    SwitchedLQRError,
    ValidityError,
)
from switched_lqr.matrix_io import format_matrix, read_matrices, read_plant, read_weights
from switched_lqr.switching import linear_policy, switched_policy
from switched_lqr.utils import as_matrix, format_float


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INPUT = 2

INPUT_ERRORS = (
    MatrixFormatError,
    DimensionError,
    ValidityError,
    DefinitenessError,
    DomainError,
    OSError,
)


@dataclass
class ExperimentSpec:
    """What to run, on which files, with which seed and where to write"""

    command: str
    plant_path: Path | None = None
    weights_path: Path | None = None
    parameters: dict[str, object] = field(default_factory=dict)
    seed: int = 0
    output_prefix: Path | None = None

    @property
    def header(self) -> str:
        params = json.dumps(self.parameters, sort_keys=True, default=str)
        return f"command={self.command} seed={self.seed} params={params}"

    def output(self, suffix: str) -> Path:
        """Output path for one artifact, creating the parent folder"""
        if self.output_prefix is None:
            raise ValueError("No output prefix given")
        path = Path(f"{self.output_prefix}{suffix}")
        path.parent.mkdir(parents=True, exist_ok=True)
        return path


def _value(value) -> str:
    if isinstance(value, bool | np.bool_):
        return str(bool(value)).lower()
    if isinstance(value, int | np.integer):
        return str(int(value))
    if isinstance(value, float | np.floating):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return format_float(float(value))
    if value is None:
        return "nan"
    if is_infinite(value):
        return format_cost(value)
    return str(value)


def format_report(report: dict[str, object]) -> str:
    """key = value lines, matrices as matrix text blocks"""
    lines = []
    for key, value in report.items():
        if isinstance(value, np.ndarray) and value.ndim == 2:
            lines.append(format_matrix(key, value))
        else:
            lines.append(f"{key} = {_value(value)}")
    return "\n".join(lines)


def emit_report(experiment: ExperimentSpec, report: dict[str, object]):
    """Print a report and, with an output prefix, also save it"""
    text = format_report(report)
    print(text)
    if experiment.output_prefix is not None:
        path = experiment.output(".txt")
        path.write_text(f"# {experiment.header}\n{text}\n")
        logger.info("Wrote %s", path)


def write_csv(path: Path, header: str, columns: list[str], rows, comments=()):
    """CSV with a provenance comment line, then the header row"""
    with open(path, "w", newline="") as f:
        f.write(f"# {header}\n")
        for comment in comments:
            f.write(f"# {comment}\n")
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_value(v) for v in row])
    logger.info("Wrote %s", path)


def trajectory_table(
    record: montecarlo.TrajectoryRecord,
    noise: bool = False,
    probes: np.ndarray | None = None,
    thresholds: np.ndarray | None = None,
    dwell_times: np.ndarray | None = None,
) -> tuple[list[str], list[list]]:
    """Columns and rows of a trajectory CSV"""
    n = record.states.shape[1]
    m = record.inputs.shape[1]
    columns = ["k", *(f"x_{i + 1}" for i in range(n)), *(f"u_{j + 1}" for j in range(m))]
    columns += ["mode", "stage_cost"]
    if noise:
        columns += [f"w_{i + 1}" for i in range(n)]
    if probes is not None:
        columns += [f"zeta_{j + 1}" for j in range(m)]
    if thresholds is not None:
        columns += ["M", "t"]

    rows = []
    for k in range(record.horizon):
        row = [k, *record.states[k], *record.inputs[k], str(record.modes[k])]
        row.append(record.stage_costs[k])
        if noise:
            row += list(record.noises[k])
        if probes is not None:
            row += list(probes[k])
        if thresholds is not None:
            row += [thresholds[k], dwell_times[k]]
        rows.append(row)
    return columns, rows


# inputs


def load_problem(experiment: ExperimentSpec) -> tuple[LinearPlant, LQWeights]:
    plant = read_plant(experiment.plant_path)
    weights = read_weights(experiment.weights_path)
    weights.check_plant(plant)
    return plant, weights


def load_gains(
    path: Path | None, plant: LinearPlant, weights: LQWeights
) -> tuple[np.ndarray, np.ndarray]:
    """K0 and K1 from a gain file; K0 defaults to 0 and K1 to the optimal gain"""
    matrices = read_matrices(path) if path is not None else {}
    K0 = matrices.get("K0")
    K1 = matrices.get("K1")
    K0 = np.zeros((plant.m, plant.n)) if K0 is None else as_matrix(K0, "K0")
    if K1 is None:
        K1 = np.array(dare_solve(plant, weights).K_star)
    return K0, as_matrix(K1, "K1")


def _hyperparameter(text: str, cast):
    """FLOAT/INT or the word 'schedule'"""
    if text == "schedule":
        return None
    return cast(text)


# subcommands


def run_dare(experiment: ExperimentSpec, args: argparse.Namespace) -> int:
    plant, weights = load_problem(experiment)
    solution = dare_solve(plant, weights)
    report = {
        "P_star": solution.P_star,
        "K_star": solution.K_star,
        "J_star": solution.J_star,
        "residual": solution.residual,
        "spectral_radius_closed_loop": spectral_radius(
            plant.closed_loop(solution.K_star)
        ),
    }
    emit_report(experiment, report)
    return EXIT_OK


def run_certify(experiment: ExperimentSpec, args: argparse.Namespace) -> int:
    plant, weights = load_problem(experiment)
    K0, K1 = load_gains(args.gains, plant, weights)
    report = certificates.certification_report(
        plant, weights, K0, K1, rho0=args.rho0, rho=args.rho, M=args.M, t=args.t
    )
    emit_report(experiment, report)
    return EXIT_OK


def run_bound(experiment: ExperimentSpec, args: argparse.Namespace) -> int:
    """Every closed-form bound at one (M, t); fails when the gap bound doesn't apply"""
    plant, weights = load_problem(experiment)
    K0, K1 = load_gains(args.gains, plant, weights)
    cert0 = certificates.build_fallback_certificate(plant, K0, args.rho0)
    cert = certificates.build_common_certificate(plant, K0, K1, args.rho)
    bound, analysis = certificates.gap_bound(
        plant, weights, K0, K1, args.M, cert0, cert, args.t
    )
    script_Q, moment = certificates.fourth_moment_bound(
        plant.n, cert.P, cert.rho, cert0.P0, analysis.W_tilde
    )
    report = {
        "M": analysis.M,
        "t": analysis.t,
        "M0": analysis.M0,
        "t_min": cert.t_min,
        "rho0": cert0.rho0,
        "rho": cert.rho,
        "script_A": analysis.script_A,
        "second_moment_bound": certificates.second_moment_bound(
            args.M, analysis.script_A, cert0.P0, cert0.rho0, plant.W
        ),
        "bounded_cost_bound": certificates.bounded_cost_bound(
            plant, weights, K0, K1, args.M, cert0
        ),
        "script_Q": script_Q,
        "fourth_moment_bound": moment,
        "tail_bound": analysis.tail,
        "C1": analysis.C1,
        "C2": analysis.C2,
        "C2_weighted": analysis.C2_weighted,
        "C3": analysis.C3,
        "C4": analysis.C4,
        "G": analysis.G,
        "decay_c": analysis.decay_c,
        "gap_bound": bound,
        "gap_bound_weighted": analysis.bound_weighted,
    }
    emit_report(experiment, report)
    return EXIT_OK


def run_simulate(experiment: ExperimentSpec, args: argparse.Namespace) -> int:
    plant, weights = load_problem(experiment)
    K0, K1 = load_gains(args.gains, plant, weights)
    if args.controller == "linear":
        controller = linear_policy(K1)
    else:
        controller = switched_policy(K0, K1, args.M, args.t)

    estimate = montecarlo.estimate_cost(
        plant, weights, controller, args.horizon, args.n_traj, experiment.seed, args.threads
    )
    report = estimate.as_dict()
    report["fallback_stderr"] = estimate.fallback_stderr
    report["mean_trigger_count"] = estimate.mean_trigger_count
    print(format_report(report))

    if experiment.output_prefix is not None:
        record = montecarlo.rollout(
            plant, weights, controller, args.horizon, montecarlo.RngStream(experiment.seed, 0)
        )
        columns, rows = trajectory_table(record, noise=True)
        write_csv(experiment.output("_trajectory.csv"), experiment.header, columns, rows)
        payload = {"provenance": experiment.header, "estimate": estimate.as_dict()}
        experiment.output("_estimate.json").write_text(json.dumps(payload, indent=2) + "\n")
    return EXIT_OK


def fit_bound_slope(rows: list[dict]) -> tuple[float, float] | None:
    """Slope and R^2 of log(bound) against M^2 over the evaluated rows"""
    usable = [r for r in rows if r["status"] == "ok" and r["bound"] > 0]
    if len(usable) < 3:
        return None
    fit = stats.linregress(
        [r["M"] ** 2 for r in usable], [math.log(r["bound"]) for r in usable]
    )
    return float(fit.slope), float(fit.rvalue**2)


def gap_sweep(
    plant: LinearPlant,
    weights: LQWeights,
    K0,
    K1,
    M_values: list[float],
    t_values: list[int | None],
    horizon: int,
    n_traj: int,
    seed: int,
    threads: int = 1,
    progress: bool = False,
) -> list[dict]:
    """Gap bound and paired Monte Carlo gap at each (M, t)

    Rows whose preconditions fail are kept with status 'skipped: <reason>'.
    """
    cert0 = certificates.build_fallback_certificate(plant, K0)
    cert = certificates.build_common_certificate(plant, K0, K1)
    reference = linear_policy(K1)
    grid = [(M, t) for t in t_values for M in M_values]

    rows = []
    for M, t in tqdm(grid, desc="gap sweep", disable=not progress):
        t = cert.t_min if t is None else t
        row = {"M": M, "t": t, "bound": None, "mc_gap": None, "mc_stderr": None}
        try:
            row["bound"], _ = certificates.gap_bound(plant, weights, K0, K1, M, cert0, cert, t)
        except PreconditionError as e:
            row["status"] = f"skipped: {e}"
            rows.append(row)
            continue
        comparison = montecarlo.paired_compare(
            plant,
            weights,
            switched_policy(K0, K1, M, t),
            reference,
            horizon,
            n_traj,
            seed,
            threads,
        )
        row["mc_gap"] = comparison.mean_difference
        row["mc_stderr"] = comparison.stderr_difference
        row["status"] = "ok"
        rows.append(row)
    return rows


def run_gap_sweep(experiment: ExperimentSpec, args: argparse.Namespace) -> int:
    plant, weights = load_problem(experiment)
    K0, K1 = load_gains(args.gains, plant, weights)
    M_values = list(args.M)
    if args.relative:
        W_tilde = certificates.process_gramian(plant, K0)
        cert = certificates.build_common_certificate(plant, K0, K1)
        M0 = certificates.threshold_floor(W_tilde, cert.P, cert.rho)
        M_values = [factor * M0 for factor in M_values]

    rows = gap_sweep(
        plant,
        weights,
        K0,
        K1,
        M_values,
        args.t or [None],
        args.horizon,
        args.n_traj,
        experiment.seed,
        args.threads,
        args.progress,
    )
    fit = fit_bound_slope(rows)
    comments = []
    if fit is not None:
        comments.append(f"fit log(bound) ~ M^2: slope={fit[0]:.17g} r2={fit[1]:.17g}")

    columns = ["M", "t", "bound", "mc_gap", "mc_stderr", "status"]
    table = [[row[c] for c in columns] for row in rows]
    if experiment.output_prefix is not None:
        write_csv(experiment.output("_gap_sweep.csv"), experiment.header, columns, table, comments)
    else:
        write_csv_stdout(experiment.header, columns, table, comments)
    return EXIT_OK


def write_csv_stdout(header: str, columns: list[str], rows, comments=()):
    print(f"# {header}")
    for comment in comments:
        print(f"# {comment}")
    writer = csv.writer(sys.stdout)
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_value(v) for v in row])


def _stem(stem: str) -> str:
    return f"_{stem}" if stem else ""


def write_adaptive_record(experiment: ExperimentSpec, record: adaptive.AdaptiveRecord, stem: str):
    """Per-step and per-update CSVs of one learning run"""
    columns, rows = trajectory_table(
        record.trajectory,
        noise=True,
        probes=record.zeta,
        thresholds=record.thresholds,
        dwell_times=record.dwell_times,
    )
    write_csv(experiment.output(f"{_stem(stem)}_steps.csv"), experiment.header, columns, rows)

    m, n = record.config.K0.shape
    columns = ["k", "stabilizing", "accepted", *(f"K_{i + 1}_{j + 1}" for i in range(m) for j in range(n))]
    rows = [
        [update.k, update.stabilizing, update.accepted, *update.K_hat.ravel()]
        for update in record.updates
    ]
    write_csv(experiment.output(f"{_stem(stem)}_updates.csv"), experiment.header, columns, rows)


def write_gap_curve(experiment: ExperimentSpec, points: list[adaptive.GapPoint], stem: str):
    columns = [
        "k",
        "M",
        "t",
        "J_switched",
        "stderr",
        "J_linear",
        "gap",
        "gap_stderr",
        "log_k",
        "log_gap",
        "stabilizing",
    ]
    rows = []
    for p in points:
        log_gap = math.log(p.gap) if p.gap is not None and p.gap > 0 else None
        rows.append(
            [
                p.k,
                p.M,
                p.t,
                p.J_switched,
                p.stderr,
                p.J_linear,
                p.gap,
                p.gap_stderr,
                math.log(p.k),
                log_gap,
                p.stabilizing,
            ]
        )
    comments = []
    try:
        comments.append(f"theil-sen slope log(gap) ~ log(k): {adaptive.decay_slope(points):.17g}")
    except SwitchedLQRError as e:
        comments.append(f"no slope: {e}")
    write_csv(experiment.output(f"{_stem(stem)}_gap_curve.csv"), experiment.header, columns, rows, comments)


def run_adaptive(experiment: ExperimentSpec, args: argparse.Namespace) -> int:
    plant, weights = load_problem(experiment)
    K0, _ = load_gains(args.gains, plant, weights)
    config = adaptive.AdaptiveConfig(K0=K0, ridge=args.ridge)
    record = adaptive.adaptive_run(
        plant,
        weights,
        config,
        args.horizon,
        experiment.seed,
        switching_enabled=args.switch == "on",
        fixed_M=args.M,
        fixed_t=args.dwell,
    )
    report = {
        "steps": record.trajectory.horizon,
        "diverged": record.diverged,
        "trigger_count": record.trajectory.trigger_count,
        "fallback_steps": record.trajectory.fallback_steps,
        "max_state_norm": record.trajectory.max_state_norm,
        "average_cost": record.trajectory.average_cost,
        "updates": len(record.updates),
    }
    A_hat, B_hat = record.final_estimates
    if A_hat is not None:
        report["A_hat"] = A_hat
        report["B_hat"] = B_hat
    print(format_report(report))

    if experiment.output_prefix is not None:
        write_adaptive_record(experiment, record, "")
        if args.eval_n_traj > 0:
            points = adaptive.gap_curve(
                plant,
                weights,
                record,
                args.eval_horizon,
                args.eval_n_traj,
                experiment.seed,
                args.threads,
                args.progress,
            )
            write_gap_curve(experiment, points, "")
    return EXIT_OK


def run_reference_examples(experiment: ExperimentSpec, args: argparse.Namespace) -> int:
    """Three-controller comparison on the toy plant plus the scheduled learning runs

    The three toy runs share their seed, hence the same process and probing noise.
    The stand-in plant is learned once per seed in seed, seed + 1, ..., since
    only some seeds pass through a destabilizing early estimate.
    """
    if args.runs < 1:
        raise DomainError(f"Need at least one learning run, got {args.runs}")
    summary: dict[str, object] = {}

    # three controllers on the toy plant
    plant, weights = plants.toy_example_plant(), plants.toy_example_weights()
    config = adaptive.AdaptiveConfig(K0=np.zeros((plant.m, plant.n)))
    toy_runs = {
        "no_switch": dict(switching_enabled=False),
        "switch_t1": dict(fixed_M=10.0, fixed_t=1),
        "switch_t30": dict(fixed_M=10.0, fixed_t=30),
    }
    for name, options in toy_runs.items():
        record = adaptive.adaptive_run(
            plant, weights, config, args.toy_horizon, experiment.seed, **options
        )
        write_adaptive_record(experiment, record, f"toy_{name}")
        summary[f"toy_{name}_diverged"] = record.diverged
        summary[f"toy_{name}_trigger_count"] = record.trajectory.trigger_count
        summary[f"toy_{name}_max_state_norm"] = record.trajectory.max_state_norm

    # scheduled learning runs on the stand-in plant
    plant, weights = plants.standin_process_plant(), plants.standin_process_weights()
    config = adaptive.AdaptiveConfig(K0=np.zeros((plant.m, plant.n)))
    for seed in range(experiment.seed, experiment.seed + args.runs):
        stem = f"standin_s{seed}"
        record = adaptive.adaptive_run(plant, weights, config, args.horizon, seed)
        write_adaptive_record(experiment, record, stem)
        points = adaptive.gap_curve(
            plant,
            weights,
            record,
            args.eval_horizon,
            args.eval_n_traj,
            seed,
            args.threads,
            args.progress,
        )
        write_gap_curve(experiment, points, stem)
        summary[f"{stem}_updates"] = len(record.updates)
        summary[f"{stem}_unstable_gains"] = sum(not p.stabilizing for p in points)
        try:
            summary[f"{stem}_decay_slope"] = adaptive.decay_slope(points)
        except SwitchedLQRError as e:
            summary[f"{stem}_decay_slope"] = f"unavailable: {e}"

    emit_report(experiment, summary)
    return EXIT_OK


# parser


def _add_problem(parser: argparse.ArgumentParser, gains: bool = True):
    parser.add_argument("--plant", type=Path, required=True, help="plant file (A, B, W)")
    parser.add_argument("--weights", type=Path, required=True, help="weights file (Q, R)")
    if gains:
        parser.add_argument(
            "--gains",
            type=Path,
            help="gain file with K0 and/or K1 (defaults: K0 = 0, K1 = optimal gain)",
        )
    parser.add_argument("--out", type=Path, help="output prefix")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lqr-switching",
        description="Safe switching between a primary and a stabilizing LQR gain",
    )
    parser.add_argument("--log-level", default="WARNING", help="logging level")
    parser.add_argument(
        "--threads", type=int, default=1, help="parallel Monte Carlo trajectories"
    )
    parser.add_argument(
        "--no-progress", dest="progress", action="store_false", help="hide progress bars"
    )
    parser.add_argument("--seed", type=int, default=0, help="64-bit unsigned seed")
    commands = parser.add_subparsers(dest="command", required=True)

    dare = commands.add_parser("dare", help="solve the Riccati equation")
    _add_problem(dare, gains=False)
    dare.set_defaults(handler=run_dare)

    certify = commands.add_parser("certify", help="build and check certificates")
    _add_problem(certify)
    certify.add_argument("--rho0", type=float)
    certify.add_argument("--rho", type=float)
    certify.add_argument("--M", type=float, help="threshold for the bound sections")
    certify.add_argument("--t", type=int, help="dwell time (default t_min)")
    certify.set_defaults(handler=run_certify)

    bound = commands.add_parser("bound", help="evaluate every closed-form bound")
    _add_problem(bound)
    bound.add_argument("--rho0", type=float)
    bound.add_argument("--rho", type=float)
    bound.add_argument("--M", type=float, required=True)
    bound.add_argument("--t", type=int, help="dwell time (default t_min)")
    bound.set_defaults(handler=run_bound)

    simulate = commands.add_parser("simulate", help="Monte Carlo cost of one controller")
    _add_problem(simulate)
    simulate.add_argument("--controller", choices=["linear", "switched"], default="switched")
    simulate.add_argument("--M", type=float, default=math.inf)
    simulate.add_argument("--t", type=int, default=1)
    simulate.add_argument("--horizon", type=int, default=10_000)
    simulate.add_argument("--n-traj", type=int, default=200)
    simulate.set_defaults(handler=run_simulate)

    sweep = commands.add_parser("gap-sweep", help="gap bound and Monte Carlo gap over M, t")
    _add_problem(sweep)
    sweep.add_argument("--M", type=float, nargs="+", required=True)
    sweep.add_argument(
        "--relative", action="store_true", help="--M values are multiples of M0"
    )
    sweep.add_argument("--t", type=int, nargs="+", help="dwell times (default t_min)")
    sweep.add_argument("--horizon", type=int, default=1_000)
    sweep.add_argument("--n-traj", type=int, default=200)
    sweep.set_defaults(handler=run_gap_sweep)

    learn = commands.add_parser("adaptive", help="certainty equivalent learning run")
    _add_problem(learn)
    learn.add_argument("--horizon", type=int, default=2**14 + 1)
    learn.add_argument("--switch", choices=["on", "off"], default="on")
    learn.add_argument(
        "--M", type=lambda s: _hyperparameter(s, float), default=None, help="FLOAT or 'schedule'"
    )
    learn.add_argument(
        "--dwell", type=lambda s: _hyperparameter(s, int), default=None, help="INT or 'schedule'"
    )
    learn.add_argument("--ridge", type=float, default=1e-6)
    learn.add_argument("--eval-horizon", type=int, default=100)
    learn.add_argument("--eval-n-traj", type=int, default=1_000)
    learn.set_defaults(handler=run_adaptive)

    reference = commands.add_parser("reference-examples", help="toy comparison and scheduled learning run")
    reference.add_argument("--out", type=Path, required=True, help="output prefix")
    reference.add_argument("--toy-horizon", type=int, default=200)
    reference.add_argument("--horizon", type=int, default=2**14 + 1)
    reference.add_argument(
        "--runs", type=int, default=5, help="stand-in learning runs, one per seed"
    )
    reference.add_argument("--eval-horizon", type=int, default=100)
    reference.add_argument("--eval-n-traj", type=int, default=1_000)
    reference.set_defaults(handler=run_reference_examples)

    return parser


def make_experiment(args: argparse.Namespace) -> ExperimentSpec:
    skip = {"handler", "command", "plant", "weights", "seed", "out", "log_level", "progress"}
    parameters = {k: v for k, v in vars(args).items() if k not in skip}
    return ExperimentSpec(
        command=args.command,
        plant_path=getattr(args, "plant", None),
        weights_path=getattr(args, "weights", None),
        parameters=parameters,
        seed=args.seed,
        output_prefix=args.out,
    )


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    experiment = make_experiment(args)
    try:
        return args.handler(experiment, args)
    except INPUT_ERRORS as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (SwitchedLQRError, linalg.LinAlgError) as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
