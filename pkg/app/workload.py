"""Workload service: SWF traces, sequence sampling and synthetic traces.

This module handles:
- Parsing and writing Standard Workload Format (SWF) job logs
- Trace statistics (arrival interval, requested runtime, requested processors)
- Sampling contiguous, re-based job sequences for training and evaluation
- A simple configurable synthetic trace generator
"""

from enum import IntEnum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np

from app.config import SyntheticConfig
from app.exceptions import ConfigError, EmptyTrace, InsufficientJobs, ParseError
from app.models import UNKNOWN_USER, Job, JobSequence, JobTrace, TraceStats
from app.utils.logger import get_logger
from app.utils.validators import (
    HEADER_PATTERN,
    SWF_FIELD_COUNT,
    powers_of_two_in_range,
    sanitize_trace_name,
    validate_swf_fields,
)

logger = get_logger("workload")


class SwfFields(IntEnum):
    """Fields of the Standard Workload Format (0-based)."""

    JOB_ID = 0
    SUBMITTED = 1
    WAIT_TIME = 2
    RUN_TIME = 3
    ALLOC_PROCS = 4
    AVG_CPU_USAGE = 5
    USED_MEM = 6
    REQ_PROCS = 7
    REQ_TIME = 8
    REQ_MEM = 9
    STATUS = 10
    USER_ID = 11
    GROUP_ID = 12
    EXECUTABLE = 13
    QUEUE_NUM = 14
    PART_NUM = 15
    PRECEDING_JOB = 16
    THINK_TIME = 17


def _read_cluster_size(header_key: str, header_value: str, line_no: int) -> int:
    try:
        size = int(float(header_value.split()[0]))
    except (ValueError, IndexError):
        raise ParseError(f"invalid {header_key} header: {header_value!r}", line_no) from None
    if size < 1:
        raise ParseError(f"{header_key} must be positive", line_no)
    return size


def parse_swf(
    text: Union[str, Iterable[str]],
    cluster_size: Optional[int] = None,
    source_name: str = "trace",
    max_jobs: Optional[int] = None,
) -> JobTrace:
    """Parse SWF text into a JobTrace.

    Comment lines start with ';'. "; MaxProcs: N" (or "; MaxNodes: N" when
    MaxProcs is absent) gives the cluster size unless `cluster_size` overrides it.

    Args:
        text: Whole SWF text or an iterable of lines
        cluster_size: Processor count override
        source_name: Name recorded on the trace
        max_jobs: Keep only the first N retained jobs

    Raises:
        ParseError: malformed data line, duplicate job id or no cluster size available
        EmptyTrace: no valid job in the input
    """
    lines = text.splitlines() if isinstance(text, str) else text

    max_procs: Optional[int] = None
    max_nodes: Optional[int] = None
    jobs: List[Job] = []
    first_seen: Dict[int, int] = {}
    dropped = 0

    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(";"):
            match = HEADER_PATTERN.match(line)
            if match:
                key, value = match.group(1), match.group(2)
                if key.lower() == "maxprocs":
                    max_procs = _read_cluster_size(key, value, line_no)
                elif key.lower() == "maxnodes":
                    max_nodes = _read_cluster_size(key, value, line_no)
            continue

        fields = validate_swf_fields(line.split(), line_no)
        run_time = int(round(fields[SwfFields.RUN_TIME]))
        wait_time = int(round(fields[SwfFields.WAIT_TIME]))
        submit_time = int(round(fields[SwfFields.SUBMITTED]))

        # cancelled before start, or unusable timing
        if (run_time == 0 and wait_time == -1) or run_time < 0 or submit_time < 0:
            dropped += 1
            continue

        procs = int(round(fields[SwfFields.REQ_PROCS]))
        if procs == -1:
            procs = int(round(fields[SwfFields.ALLOC_PROCS]))
        if procs < 1:
            dropped += 1
            continue

        requested_time = int(round(fields[SwfFields.REQ_TIME]))
        if requested_time < 0:
            requested_time = run_time

        user_id = int(round(fields[SwfFields.USER_ID]))
        if user_id < 0:
            user_id = UNKNOWN_USER

        job_id = int(round(fields[SwfFields.JOB_ID]))
        if job_id in first_seen:
            raise ParseError(f"duplicate job id {job_id} (first seen on line {first_seen[job_id]})", line_no)
        first_seen[job_id] = line_no

        jobs.append(Job(
            job_id=job_id,
            submit_time=submit_time,
            requested_processors=procs,
            requested_time=requested_time,
            actual_runtime=run_time,
            user_id=user_id,
        ))

    size = cluster_size or max_procs or max_nodes
    if size is None:
        raise ParseError("missing '; MaxProcs:' header and no cluster size override")

    if not jobs:
        raise EmptyTrace(f"{source_name}: no valid job found ({dropped} dropped)")

    jobs.sort(key=lambda j: (j.submit_time, j.job_id))
    if max_jobs is not None:
        jobs = jobs[:max_jobs]

    clamped = 0
    for i, job in enumerate(jobs):
        if job.requested_processors > size:
            jobs[i] = job.model_copy(update={"requested_processors": size})
            clamped += 1

    if dropped or clamped:
        logger.info(f"{source_name}: dropped {dropped} jobs, clamped {clamped} to {size} processors")

    return JobTrace(
        jobs=tuple(jobs),
        cluster_size=size,
        source_name=source_name,
        dropped_jobs=dropped,
        clamped_jobs=clamped,
    )


def load_trace(
    path: Union[str, Path],
    max_jobs: Optional[int] = None,
    max_procs: Optional[int] = None,
) -> JobTrace:
    """Read an SWF file.

    Raises:
        FileNotFoundError: the file does not exist
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"trace not found: {path}")

    with path.open("r", encoding="utf-8", errors="replace") as fp:
        trace = parse_swf(
            fp,
            cluster_size=max_procs,
            source_name=sanitize_trace_name(path.stem),
            max_jobs=max_jobs,
        )
    logger.info(f"Loaded {len(trace)} jobs from {path} (cluster size {trace.cluster_size})")
    return trace


def serialize_swf(trace: JobTrace) -> str:
    """Write a trace as SWF text.

    Fields the toolkit does not keep are written as -1; the wait field is 0.
    """
    out = [
        "; Version: 2.2",
        f"; Computer: {trace.source_name}",
        f"; MaxJobs: {len(trace.jobs)}",
        f"; MaxProcs: {trace.cluster_size}",
    ]
    for job in trace.jobs:
        fields = [-1] * SWF_FIELD_COUNT
        fields[SwfFields.JOB_ID] = job.job_id
        fields[SwfFields.SUBMITTED] = job.submit_time
        fields[SwfFields.WAIT_TIME] = 0
        fields[SwfFields.RUN_TIME] = job.actual_runtime
        fields[SwfFields.ALLOC_PROCS] = job.requested_processors
        fields[SwfFields.REQ_PROCS] = job.requested_processors
        fields[SwfFields.REQ_TIME] = job.requested_time
        fields[SwfFields.STATUS] = 1
        fields[SwfFields.USER_ID] = job.user_id
        out.append(" ".join(str(v) for v in fields))
    return "\n".join(out) + "\n"


def trace_stats(trace: Union[JobTrace, JobSequence]) -> TraceStats:
    """Average arrival interval, requested runtime and requested processors."""
    submits = np.fromiter((j.submit_time for j in trace.jobs), dtype=np.float64)
    runtimes = np.fromiter((j.requested_time for j in trace.jobs), dtype=np.float64)
    procs = np.fromiter((j.requested_processors for j in trace.jobs), dtype=np.float64)

    interval = float(np.diff(submits).mean()) if len(submits) > 1 else 0.0
    return TraceStats(
        avg_arrival_interval=interval,
        avg_requested_runtime=float(runtimes.mean()),
        avg_requested_processors=float(procs.mean()),
        job_count=len(submits),
    )


def sample_sequence(trace: JobTrace, length: int, seed: int) -> JobSequence:
    """Pick `length` contiguous jobs at a uniformly random offset.

    Submit times are re-based so the first job arrives at t=0.

    Raises:
        InsufficientJobs: length exceeds the trace size
    """
    n = len(trace.jobs)
    if length < 1:
        raise InsufficientJobs(f"sequence length must be positive, got {length}")
    if length > n:
        raise InsufficientJobs(f"{trace.source_name} has {n} jobs, {length} requested")

    rng = np.random.default_rng(seed)
    offset = int(rng.integers(0, n - length + 1))
    window = trace.jobs[offset:offset + length]
    base = window[0].submit_time
    jobs = tuple(j.model_copy(update={"submit_time": j.submit_time - base}) for j in window)

    return JobSequence(
        jobs=jobs,
        cluster_size=trace.cluster_size,
        source_name=trace.source_name,
        offset=offset,
        time_cap=trace.max_requested_time,
    )


def generate_synthetic(config: SyntheticConfig, seed: int) -> JobTrace:
    """Generate a trace from simple closed-form distributions.

    Inter-arrival times are exponential with mean 1/arrival_rate, runtimes
    log-uniform in [runtime_min, runtime_max], processor counts uniform over
    the powers of two in [proc_min, proc_max].

    Raises:
        EmptyTrace: job_count is 0
        ConfigError: processor range incompatible with the cluster size
    """
    if config.job_count == 0:
        raise EmptyTrace("synthetic trace with job_count=0")
    if config.proc_max > config.cluster_size:
        raise ConfigError(
            f"proc_max {config.proc_max} exceeds cluster_size {config.cluster_size}"
        )
    powers = powers_of_two_in_range(config.proc_min, min(config.proc_max, config.cluster_size))
    if not powers:
        raise ConfigError(f"no power of two in [{config.proc_min}, {config.proc_max}]")

    rng = np.random.default_rng(seed)
    n = config.job_count

    arrivals = np.cumsum(rng.exponential(1.0 / config.arrival_rate, size=n))
    submits = np.floor(arrivals - arrivals[0]).astype(np.int64)

    log_rt = rng.uniform(np.log(config.runtime_min), np.log(config.runtime_max), size=n)
    runtimes = np.clip(np.rint(np.exp(log_rt)), config.runtime_min, config.runtime_max).astype(np.int64)

    procs = rng.choice(np.asarray(powers, dtype=np.int64), size=n)
    factors = rng.uniform(1.0, config.estimate_factor_max, size=n)
    requested = np.ceil(runtimes * factors).astype(np.int64)
    users = rng.integers(1, config.user_count + 1, size=n)

    jobs = tuple(
        Job(
            job_id=i + 1,
            submit_time=int(submits[i]),
            requested_processors=int(procs[i]),
            requested_time=int(requested[i]),
            actual_runtime=int(runtimes[i]),
            user_id=int(users[i]),
        )
        for i in range(n)
    )
    logger.debug(f"Generated {n} synthetic jobs (seed {seed})")
    return JobTrace(jobs=jobs, cluster_size=config.cluster_size, source_name=f"synthetic-{seed}")
