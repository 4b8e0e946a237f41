#!/usr/bin/env python3
"""
Scheduling toolkit - Command Line Entry Point

Ties the toolkit together: train a policy, evaluate heuristics and trained
policies on shared job sequences, print trace statistics, benchmark
decision latency and generate synthetic SWF traces.

Exit codes: 0 ok, 2 input error, 3 model error, 4 training diverged.
"""

import functools
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, NoReturn, Optional, Sequence, Tuple

import click
import numpy as np
from rich.table import Table

from app import __version__
from app.config import ToolkitSettings, deep_merge, load_settings, parse_override, settings_hash
from app.exceptions import ConfigError, ModelFormatError, SchedulerToolkitError, TrainingDiverged
from app.heuristics import is_heuristic, make_scheduler, select
from app.models import Goal, HeuristicKind, Job, JobSequence, JobTrace, ScheduleMetrics
from app.neural import PolicyNet, load_model, policy_argmax, policy_forward
from app.rewards import goal_metric
from app.simulator import ObservationMatrix, PendingJob, SchedulerPolicy, SchedulingEnv, run_with_scheduler
from app.storage import ResultStore, resolve_policy_path
from app.trainer import PPOTrainer, PolicyScheduler
from app.utils.logger import (
    console,
    get_logger,
    log_error_with_context,
    log_evaluation_result,
    log_performance_metric,
    setup_logger,
)
from app.workload import generate_synthetic, load_trace, sample_sequence, serialize_swf, trace_stats

logger = get_logger("cli")

EXIT_OK = 0
EXIT_INPUT_ERROR = 2
EXIT_MODEL_ERROR = 3
EXIT_DIVERGED = 4

METRIC_FIELDS = ("avg_bounded_slowdown", "avg_slowdown", "avg_wait", "avg_turnaround", "utilization")
GOAL_CHOICES = [g.value for g in Goal]


def _fail(error: BaseException, stage: str, code: int) -> NoReturn:
    log_error_with_context(error, {"stage": stage})
    click.echo(f"error: {stage} failed: {error}", err=True)
    raise SystemExit(code)


def _exit_code(error: BaseException) -> int:
    if isinstance(error, TrainingDiverged):
        return EXIT_DIVERGED
    if isinstance(error, ModelFormatError):
        return EXIT_MODEL_ERROR
    return EXIT_INPUT_ERROR


def common_options(command: Callable) -> Callable:
    """--config, --set and --log-level for every command."""

    @click.option("--config", "config_path", type=click.Path(path_type=Path), default=None,
                  help="TOML configuration file")
    @click.option("--set", "assignments", multiple=True, metavar="SECTION.KEY=VALUE",
                  help="Override any configuration key (repeatable)")
    @click.option("--log-level", default=None, help="Minimum log level")
    @functools.wraps(command)
    def wrapper(*args: Any, config_path: Optional[Path], assignments: Tuple[str, ...],
                log_level: Optional[str], **kwargs: Any) -> Any:
        return command(*args, config_path=config_path, assignments=assignments, log_level=log_level, **kwargs)

    return wrapper


def _flag_overrides(**sections: Dict[str, Any]) -> Dict[str, Any]:
    """Nested overrides from dedicated flags, skipping flags left unset."""
    return {
        section: {key: value for key, value in values.items() if value is not None}
        for section, values in sections.items()
    }


def _settings(
    config_path: Optional[Path],
    assignments: Sequence[str],
    log_level: Optional[str],
    flags: Optional[Dict[str, Any]] = None,
) -> ToolkitSettings:
    """Merged settings (file < --set < dedicated flags) with logging configured."""
    try:
        overrides: Dict[str, Any] = {}
        for assignment in assignments:
            overrides = deep_merge(overrides, parse_override(assignment))
        if flags:
            overrides = deep_merge(overrides, flags)
        if log_level:
            overrides = deep_merge(overrides, {"logging": {"level": log_level}})
        settings = load_settings(config_path, overrides)
    except SchedulerToolkitError as e:
        setup_logger(enable_console=True, force=True)
        _fail(e, "configuration", EXIT_INPUT_ERROR)

    setup_logger(
        log_level=settings.logging.level,
        log_file_path=settings.logging.file,
        enable_json_logs=settings.logging.json_logs,
        force=True,
    )
    return settings


def _load_traces(settings: ToolkitSettings, paths: Sequence[str], max_jobs: Optional[int]) -> List[JobTrace]:
    sources = list(paths) or list(settings.evaluation.traces)
    if not sources:
        logger.info("No trace given, generating a synthetic one")
        return [generate_synthetic(settings.synthetic, settings.evaluation.seed)]
    return [load_trace(path, max_jobs=max_jobs) for path in sources]


def _resolve_scheduler(name: str, settings: ToolkitSettings) -> SchedulerPolicy:
    """Heuristic name, or a checkpoint directory / policy file.

    Raises:
        ConfigError: the name is neither a heuristic nor an existing path
        ModelFormatError: the path exists but holds no usable policy
    """
    if is_heuristic(name):
        return make_scheduler(name)
    if not Path(name).exists():
        heuristics = ", ".join(k.value for k in HeuristicKind)
        raise ConfigError(f"unknown scheduler {name!r}: not one of {heuristics} and no such checkpoint")
    path = resolve_policy_path(name)
    try:
        net = load_model(path, max_obsv_size=settings.environment.max_obsv_size)
    except FileNotFoundError as e:
        raise ModelFormatError(f"{name} holds no policy file ({e})") from e
    if not isinstance(net, PolicyNet):
        raise ModelFormatError(f"{path} holds a value network, not a policy")
    return PolicyScheduler(net, name=name, mask_non_runnable=settings.environment.mask_non_runnable)


@click.group()
@click.version_option(__version__, prog_name="schedrl")
def cli() -> None:
    """Batch-job scheduling simulator and policy trainer."""


@cli.command()
@click.argument("trace_path", required=False)
@click.option("--goal", type=click.Choice(GOAL_CHOICES), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--trajectories", type=int, default=None, help="Trajectories per epoch")
@click.option("--length", "trajectory_len", type=int, default=None, help="Jobs per trajectory")
@click.option("--seed", type=int, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--filter/--no-filter", "filtering", default=None, help="Two-step training with trajectory filtering")
@click.option("--backfill/--no-backfill", "backfilling", default=None, help="Backfill while training")
@click.option("--max-jobs", type=int, default=None, help="Keep only the first N jobs of the trace")
@click.option("--output-dir", type=click.Path(path_type=Path), default=None)
@common_options
def train(trace_path: Optional[str], goal: Optional[str], epochs: Optional[int], trajectories: Optional[int],
          trajectory_len: Optional[int], seed: Optional[int], workers: Optional[int], filtering: Optional[bool],
          backfilling: Optional[bool], max_jobs: Optional[int], output_dir: Optional[Path],
          config_path: Optional[Path], assignments: Tuple[str, ...], log_level: Optional[str]) -> None:
    """Train a kernel policy with PPO on TRACE_PATH (synthetic when omitted)."""
    settings = _settings(config_path, assignments, log_level, _flag_overrides(
        training={
            "goal": goal, "epochs": epochs, "trajectories_per_epoch": trajectories,
            "trajectory_len": trajectory_len, "seed": seed, "workers": workers,
            "filtering": filtering, "backfilling": backfilling,
        },
        evaluation={"max_jobs": max_jobs, "output_dir": str(output_dir) if output_dir else None},
    ))

    try:
        trace = _load_traces(settings, [trace_path] if trace_path else [], settings.evaluation.max_jobs)[0]
    except (SchedulerToolkitError, FileNotFoundError) as e:
        _fail(e, "loading trace", EXIT_INPUT_ERROR)

    store = ResultStore(settings.evaluation.output_dir)
    store.save_config(settings)
    config_hash = settings_hash(settings)
    logger.info(f"🚀 Training on {trace.source_name} ({len(trace)} jobs), goal {settings.training.goal.value}")

    try:
        trainer = PPOTrainer(trace, settings.training, settings.environment, store, {"config_hash": config_hash})
        result = trainer.train()
    except SchedulerToolkitError as e:
        _fail(e, "training", _exit_code(e))

    store.write_run_manifest(
        settings,
        command="train",
        trace=trace.source_name,
        goal=settings.training.goal.value,
        epochs=len(result.curve),
        best_epoch=result.best_epoch,
        best_metric=result.best_metric if result.best_metric is not None else "",
    )
    click.echo(f"trained {len(result.curve)} epochs, best {result.best_metric} at epoch {result.best_epoch}, "
               f"output in {store.root}")


def _evaluate_one(sequence: JobSequence, scheduler: SchedulerPolicy, backfilling: bool,
                  settings: ToolkitSettings) -> ScheduleMetrics:
    return run_with_scheduler(
        sequence,
        scheduler,
        backfilling=backfilling,
        goal=settings.evaluation.goal,
        debug_checks=settings.environment.debug_checks,
    )


def _metric_rows(metrics: Sequence[ScheduleMetrics], with_users: bool) -> Dict[str, float]:
    rows = {name: float(np.mean([getattr(m, name) for m in metrics])) for name in METRIC_FIELDS}
    if with_users:
        rows["max_user_bsld"] = float(np.mean([m.max_user_bsld for m in metrics]))
        rows["mean_user_bsld"] = float(np.mean([m.mean_user_bsld for m in metrics]))
    return rows


@cli.command()
@click.argument("trace_paths", nargs=-1)
@click.option("-s", "--scheduler", "schedulers", multiple=True,
              help="Heuristic name or checkpoint path (repeatable)")
@click.option("--goal", type=click.Choice(GOAL_CHOICES), default=None)
@click.option("--reps", "repetitions", type=int, default=None, help="Shared sequences per trace")
@click.option("--length", "sequence_length", type=int, default=None, help="Jobs per sequence")
@click.option("--seed", type=int, default=None)
@click.option("--backfill/--no-backfill", "backfilling", default=None)
@click.option("--both-modes", is_flag=True, default=None, help="Evaluate with and without backfilling")
@click.option("--max-jobs", type=int, default=None)
@click.option("--output-dir", type=click.Path(path_type=Path), default=None)
@click.option("--save-records", is_flag=True, default=False, help="Write per-job schedules as CSV")
@common_options
def evaluate(trace_paths: Tuple[str, ...], schedulers: Tuple[str, ...], goal: Optional[str],
             repetitions: Optional[int], sequence_length: Optional[int], seed: Optional[int],
             backfilling: Optional[bool], both_modes: Optional[bool], max_jobs: Optional[int],
             output_dir: Optional[Path], save_records: bool, config_path: Optional[Path],
             assignments: Tuple[str, ...], log_level: Optional[str]) -> None:
    """Schedule the same random sequences with every scheduler and tabulate the results."""
    settings = _settings(config_path, assignments, log_level, _flag_overrides(evaluation={
        "schedulers": list(schedulers) or None, "goal": goal, "repetitions": repetitions,
        "sequence_length": sequence_length, "seed": seed, "backfilling": backfilling,
        "both_modes": both_modes or None, "max_jobs": max_jobs,
        "output_dir": str(output_dir) if output_dir else None,
    }))
    run = settings.evaluation

    try:
        traces = _load_traces(settings, trace_paths, run.max_jobs)
    except (SchedulerToolkitError, FileNotFoundError) as e:
        _fail(e, "loading trace", EXIT_INPUT_ERROR)

    try:
        resolved = [(name, _resolve_scheduler(name, settings)) for name in run.schedulers]
    except SchedulerToolkitError as e:
        _fail(e, "loading checkpoint", _exit_code(e))

    modes = [True, False] if run.both_modes else [run.backfilling]
    store = ResultStore(run.output_dir)
    store.save_config(settings)
    columns = [name for name, _ in resolved]
    table: Dict[Tuple[str, bool], Dict[str, float]] = {}
    long_rows: List[Dict[str, object]] = []

    try:
        for trace in traces:
            rng = np.random.default_rng(run.seed)
            sequences = [sample_sequence(trace, run.sequence_length, int(rng.integers(2 ** 32)))
                         for _ in range(run.repetitions)]
            for i, sequence in enumerate(sequences):
                logger.info(f"{trace.source_name} sequence {i}: offset {sequence.offset}, digest {sequence.digest()}")

            for mode in modes:
                row: Dict[str, float] = {}
                for name, scheduler in resolved:
                    results = [_evaluate_one(sequence, scheduler, mode, settings) for sequence in sequences]
                    row[name] = float(np.mean([goal_metric(m, run.goal) for m in results]))
                    log_evaluation_result(trace.source_name, name, mode, row[name])
                    for metric, value in _metric_rows(results, trace.has_users).items():
                        long_rows.append({"trace": trace.source_name, "backfilling": mode,
                                          "scheduler": name, "metric": metric, "value": value})
                table[(trace.source_name, mode)] = row
    except SchedulerToolkitError as e:
        _fail(e, "evaluation", _exit_code(e))

    if save_records:
        _save_first_records(store, traces, resolved, modes, settings)

    store.save_table(columns, table)
    store.save_metrics(long_rows)
    store.write_run_manifest(settings, command="evaluate", goal=run.goal.value,
                             traces=",".join(t.source_name for t in traces), repetitions=run.repetitions)

    rich_table = Table(title=f"mean {run.goal.value} ({run.repetitions} sequences of {run.sequence_length} jobs)")
    rich_table.add_column("trace")
    rich_table.add_column("backfill")
    for name in columns:
        rich_table.add_column(name, justify="right")
    for (trace_name, mode), values in table.items():
        rich_table.add_row(trace_name, "yes" if mode else "no", *(f"{values[c]:.3f}" for c in columns))
    console.print(rich_table)


def _save_first_records(store: ResultStore, traces: Sequence[JobTrace],
                        resolved: Sequence[Tuple[str, SchedulerPolicy]], modes: Sequence[bool],
                        settings: ToolkitSettings) -> None:
    """Per-job schedule of the first shared sequence for every scheduler and mode."""
    run = settings.evaluation
    for trace in traces:
        rng = np.random.default_rng(run.seed)
        sequence = sample_sequence(trace, run.sequence_length, int(rng.integers(2 ** 32)))
        for name, scheduler in resolved:
            for mode in modes:
                env = SchedulingEnv(goal=run.goal, backfilling=mode,
                                    max_obsv_size=settings.environment.max_obsv_size)
                env.load(sequence)
                while not env.done:
                    env.commit(scheduler.select(env.pending, env.cluster))
                label = f"{trace.source_name}_{Path(name).name}_{'bf' if mode else 'nobf'}"
                store.save_record(label, env.record())


@cli.command()
@click.argument("trace_path")
@click.option("--max-jobs", type=int, default=None, help="Keep only the first N jobs")
@click.option("--max-procs", type=int, default=None, help="Cluster size override")
@common_options
def stats(trace_path: str, max_jobs: Optional[int], max_procs: Optional[int], config_path: Optional[Path],
          assignments: Tuple[str, ...], log_level: Optional[str]) -> None:
    """Print "size i_t r_t n_t" for a trace (rounded means)."""
    _settings(config_path, assignments, log_level)
    try:
        trace = load_trace(trace_path, max_jobs=max_jobs, max_procs=max_procs)
    except (SchedulerToolkitError, FileNotFoundError) as e:
        _fail(e, "reading trace", EXIT_INPUT_ERROR)

    summary = trace_stats(trace)
    click.echo(
        f"{trace.cluster_size} {int(round(summary.avg_arrival_interval))} "
        f"{int(round(summary.avg_requested_runtime))} {int(round(summary.avg_requested_processors))}"
    )


def _random_observation(rng: np.random.Generator, slots: int, features: int) -> ObservationMatrix:
    return ObservationMatrix(
        values=rng.random((slots, features)).astype(np.float32),
        legal_mask=np.ones(slots, dtype=bool),
        slot_to_queue_index=np.arange(slots),
    )


def _random_queue(rng: np.random.Generator, size: int, now: int) -> List[PendingJob]:
    queue = []
    for i in range(size):
        submit = int(rng.integers(0, now + 1))
        job = Job(job_id=i + 1, submit_time=submit, requested_processors=int(rng.integers(1, 65)),
                  requested_time=int(rng.integers(1, 36001)), actual_runtime=1)
        queue.append(PendingJob(job, now - submit))
    return queue


def _latency_line(label: str, samples_ns: np.ndarray) -> str:
    us = samples_ns / 1e3
    return (f"{label} mean_us={us.mean():.2f} p50_us={np.percentile(us, 50):.2f} "
            f"p99_us={np.percentile(us, 99):.2f}")


@cli.command()
@click.argument("checkpoint", required=False)
@click.option("--trials", type=int, default=10000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@common_options
def bench(checkpoint: Optional[str], trials: int, seed: int, config_path: Optional[Path],
          assignments: Tuple[str, ...], log_level: Optional[str]) -> None:
    """Time policy decisions on random 128-job observations against SJF selection."""
    settings = _settings(config_path, assignments, log_level)
    if trials <= 0:
        return

    try:
        if checkpoint:
            net = load_model(resolve_policy_path(checkpoint))
            if not isinstance(net, PolicyNet):
                raise ModelFormatError(f"{checkpoint} holds a value network, not a policy")
        else:
            net = PolicyNet.create(seed, max_obsv_size=settings.environment.max_obsv_size)
    except FileNotFoundError as e:
        _fail(e, "loading checkpoint", EXIT_MODEL_ERROR)
    except SchedulerToolkitError as e:
        _fail(e, "loading checkpoint", _exit_code(e))

    rng = np.random.default_rng(seed)
    slots, features = net.max_obsv_size, net.job_features

    policy_ns = np.empty(trials)
    sjf_ns = np.empty(trials)
    decisions = []
    for i in range(trials):
        obs = _random_observation(rng, slots, features)
        start = time.perf_counter_ns()
        decisions.append(policy_argmax(policy_forward(net, obs)))
        policy_ns[i] = time.perf_counter_ns() - start

        queue = _random_queue(rng, slots, now=100000)
        start = time.perf_counter_ns()
        select(HeuristicKind.SJF, queue, 100000)
        sjf_ns[i] = time.perf_counter_ns() - start

    log_performance_metric("policy_decision", float(policy_ns.mean()) / 1e9, True)
    click.echo(_latency_line("policy", policy_ns))
    click.echo(_latency_line("sjf", sjf_ns))
    logger.debug(f"decision checksum {sum(decisions)}")


@cli.command()
@click.argument("output", type=click.Path(path_type=Path))
@click.option("--jobs", "job_count", type=int, default=None)
@click.option("--cluster-size", type=int, default=None)
@click.option("--arrival-rate", type=float, default=None)
@click.option("--users", "user_count", type=int, default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@common_options
def gen(output: Path, job_count: Optional[int], cluster_size: Optional[int], arrival_rate: Optional[float],
        user_count: Optional[int], seed: int, config_path: Optional[Path], assignments: Tuple[str, ...],
        log_level: Optional[str]) -> None:
    """Write a synthetic trace to OUTPUT in SWF."""
    settings = _settings(config_path, assignments, log_level, _flag_overrides(synthetic={
        "job_count": job_count, "cluster_size": cluster_size,
        "arrival_rate": arrival_rate, "user_count": user_count,
    }))
    try:
        trace = generate_synthetic(settings.synthetic, seed)
    except SchedulerToolkitError as e:
        _fail(e, "generating trace", EXIT_INPUT_ERROR)

    output.parent.mkdir(parents=True, exist_ok=True)
    output.write_text(serialize_swf(trace), encoding="utf-8")
    click.echo(f"wrote {len(trace)} jobs to {output}")


if __name__ == "__main__":
    cli()
