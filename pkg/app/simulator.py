"""Discrete-event cluster simulator.

This module handles:
- Cluster bookkeeping (free processors, running jobs, reservations)
- EASY backfilling around a single reserved job
- Fixed-size observations for the policy network
- The episode environment driven by a policy or a heuristic
- Schedule metrics (bounded slowdown, wait, turnaround, utilization)
"""

import csv
import heapq
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from app.exceptions import IllegalAction, MissingUserInfo
from app.models import Goal, Job, JobSequence, ScheduleMetrics
from app.rewards import sequence_reward
from app.utils.logger import get_logger

logger = get_logger("simulator")

MAX_OBSV_SIZE = 128
JOB_FEATURES = 5
BSLD_INTERACTIVE_FLOOR = 10

RECORD_COLUMNS = ("job_id", "user_id", "submit", "start", "end", "procs", "wait", "bsld")


def bounded_slowdown(wait: float, runtime: float) -> float:
    """max((wait + runtime) / max(runtime, 10), 1)."""
    return max((wait + runtime) / max(runtime, BSLD_INTERACTIVE_FLOOR), 1.0)


def slowdown(wait: float, runtime: float) -> float:
    return (wait + runtime) / max(runtime, 1)


@dataclass(order=True)
class RunningJob:
    """A started job; heap-ordered by (end_time, job_id)."""

    end_time: int
    job_id: int
    start_time: int = field(compare=False)
    job: Job = field(compare=False)

    @property
    def processors(self) -> int:
        return self.job.requested_processors

    @property
    def estimated_end(self) -> int:
        """Completion time as the scheduler sees it (requested runtime)."""
        return self.start_time + self.job.requested_time


@dataclass
class PendingJob:
    job: Job
    wait_so_far: int

    def __post_init__(self) -> None:
        if self.wait_so_far < 0:
            raise ValueError(f"job {self.job.job_id} is not submitted yet")


@dataclass
class ClusterState:
    """Processors of the cluster and the jobs holding them."""

    total_processors: int
    free_processors: int = -1
    running: List[RunningJob] = field(default_factory=list)
    now: int = 0
    time_cap: int = 1
    user_mean_wait: Dict[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.free_processors < 0:
            self.free_processors = self.total_processors

    def fits(self, job: Job) -> bool:
        return job.requested_processors <= self.free_processors

    def start(self, job: Job, now: int) -> RunningJob:
        if not self.fits(job):
            raise ValueError(f"job {job.job_id} needs {job.requested_processors} processors, "
                             f"{self.free_processors} free")
        entry = RunningJob(end_time=now + job.actual_runtime, job_id=job.job_id, start_time=now, job=job)
        heapq.heappush(self.running, entry)
        self.free_processors -= job.requested_processors
        return entry

    def next_completion(self) -> Optional[int]:
        return self.running[0].end_time if self.running else None

    def complete_until(self, t: int) -> List[RunningJob]:
        """Release every job ending at or before t, lower job_id first on ties."""
        done: List[RunningJob] = []
        while self.running and self.running[0].end_time <= t:
            entry = heapq.heappop(self.running)
            self.free_processors += entry.processors
            done.append(entry)
        return done

    def reservation(self, processors: int, now: int) -> Tuple[int, int]:
        """Earliest start for `processors` from requested runtimes, and the spare at that time.

        Returns (T_res, extra) where extra is the number of processors still
        free at T_res once the reserved job has started.
        """
        free = self.free_processors
        if free >= processors:
            return now, free - processors

        releases = sorted((max(now, r.estimated_end), r.processors) for r in self.running)
        t_res = now
        for i, (end, procs) in enumerate(releases):
            free += procs
            if free >= processors:
                t_res = end
                for later_end, later_procs in releases[i + 1:]:
                    if later_end != t_res:
                        break
                    free += later_procs
                break
        return t_res, free - processors

    def check_conservation(self) -> None:
        used = sum(r.processors for r in self.running)
        assert 0 <= self.free_processors <= self.total_processors, "free processors out of range"
        assert used + self.free_processors == self.total_processors, (
            f"resource leak: {used} used + {self.free_processors} free != {self.total_processors}"
        )


@dataclass(frozen=True)
class JobOutcome:
    job_id: int
    user_id: int
    submit: int
    start: int
    end: int
    procs: int

    @property
    def wait(self) -> int:
        return self.start - self.submit

    @property
    def runtime(self) -> int:
        return self.end - self.start

    @property
    def bsld(self) -> float:
        return bounded_slowdown(self.wait, self.runtime)


@dataclass(frozen=True)
class ScheduleRecord:
    """Per-job outcome of a finished episode, in start order."""

    outcomes: Tuple[JobOutcome, ...]

    @property
    def horizon(self) -> Tuple[int, int]:
        """(first submit, last completion)."""
        if not self.outcomes:
            return 0, 0
        return min(o.submit for o in self.outcomes), max(o.end for o in self.outcomes)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(RECORD_COLUMNS)
        for o in self.outcomes:
            writer.writerow([o.job_id, o.user_id, o.submit, o.start, o.end, o.procs, o.wait, f"{o.bsld:.6f}"])
        return buf.getvalue()


def utilization(record: ScheduleRecord, cluster_size: int) -> float:
    """Processor-seconds used over cluster_size * horizon; 0 for an empty horizon."""
    first, last = record.horizon
    span = last - first
    if span <= 0:
        return 0.0
    used = sum(o.procs * o.runtime for o in record.outcomes)
    return min(used / (cluster_size * span), 1.0)


def compute_metrics(record: ScheduleRecord, cluster_size: int) -> ScheduleMetrics:
    """All scheduling metrics of a finished record."""
    if not record.outcomes:
        raise ValueError("cannot compute metrics of an empty schedule")

    waits = np.array([o.wait for o in record.outcomes], dtype=np.float64)
    runtimes = np.array([o.runtime for o in record.outcomes], dtype=np.float64)
    bslds = np.maximum((waits + runtimes) / np.maximum(runtimes, BSLD_INTERACTIVE_FLOOR), 1.0)
    slds = (waits + runtimes) / np.maximum(runtimes, 1.0)

    per_user: Dict[int, List[float]] = defaultdict(list)
    for o, b in zip(record.outcomes, bslds):
        per_user[o.user_id].append(float(b))

    return ScheduleMetrics(
        avg_bounded_slowdown=float(bslds.mean()),
        avg_slowdown=float(slds.mean()),
        avg_wait=float(waits.mean()),
        avg_turnaround=float((waits + runtimes).mean()),
        utilization=utilization(record, cluster_size),
        per_user_avg_bsld={user: float(np.mean(values)) for user, values in per_user.items()},
        job_count=len(record.outcomes),
    )


@dataclass(frozen=True)
class ObservationMatrix:
    """Fixed-size view of the pending queue.

    values has one row per slot, legal_mask marks selectable slots and
    slot_to_queue_index maps a slot back to the pending queue (-1 for padding).
    """

    values: np.ndarray
    legal_mask: np.ndarray
    slot_to_queue_index: np.ndarray

    @property
    def size(self) -> int:
        return int(self.values.shape[0])

    @property
    def num_legal(self) -> int:
        return int(self.legal_mask.sum())

    def queue_index(self, slot: int) -> int:
        if not 0 <= slot < self.size or not self.legal_mask[slot]:
            raise IllegalAction(f"slot {slot} is not a legal action")
        return int(self.slot_to_queue_index[slot])


def build_observation(
    queue: Sequence[PendingJob],
    cluster: ClusterState,
    now: int,
    max_obsv_size: int = MAX_OBSV_SIZE,
    mask_non_runnable: bool = False,
    user_feature: bool = False,
) -> ObservationMatrix:
    """Encode the earliest-submitted pending jobs as feature rows.

    Row features: [wait, requested time, processors, fits now, free processors],
    time features divided by the cluster time cap, processor features by the
    cluster size, all clipped to [0, 1]. With `user_feature` a sixth column
    holds the user's mean wait so far.
    """
    width = JOB_FEATURES + (1 if user_feature else 0)
    values = np.zeros((max_obsv_size, width), dtype=np.float32)
    legal = np.zeros(max_obsv_size, dtype=bool)
    slots = np.full(max_obsv_size, -1, dtype=np.int64)

    order = range(len(queue))
    if len(queue) > max_obsv_size:
        order = sorted(order, key=lambda i: (queue[i].job.submit_time, queue[i].job.job_id))[:max_obsv_size]
    kept = list(order)
    if not kept:
        return ObservationMatrix(values, legal, slots)

    cap = float(max(cluster.time_cap, 1))
    size = float(cluster.total_processors)
    jobs = [queue[i] for i in kept]
    n = len(kept)

    waits = np.fromiter((max(now - p.job.submit_time, 0) for p in jobs), dtype=np.float64, count=n)
    requested = np.fromiter((p.job.requested_time for p in jobs), dtype=np.float64, count=n)
    procs = np.fromiter((p.job.requested_processors for p in jobs), dtype=np.float64, count=n)
    runnable = procs <= cluster.free_processors

    values[:n, 0] = np.clip(waits / cap, 0.0, 1.0)
    values[:n, 1] = np.clip(requested / cap, 0.0, 1.0)
    values[:n, 2] = np.clip(procs / size, 0.0, 1.0)
    values[:n, 3] = runnable
    values[:n, 4] = min(cluster.free_processors / size, 1.0)
    if user_feature:
        user_waits = np.fromiter(
            (cluster.user_mean_wait.get(p.job.user_id, 0.0) for p in jobs), dtype=np.float64, count=n
        )
        values[:n, 5] = np.clip(user_waits / cap, 0.0, 1.0)

    if mask_non_runnable and runnable.any():
        legal[:n] = runnable
    else:
        legal[:n] = True
    slots[:n] = kept
    return ObservationMatrix(values, legal, slots)


def backfill_pass(cluster: ClusterState, reserved: PendingJob, queue: Sequence[PendingJob]) -> List[PendingJob]:
    """Start queued jobs that cannot delay the reserved job (EASY).

    Candidates are scanned in submit order. A job starts when it fits now and
    either finishes by the reservation time (inclusive) or only uses
    processors that stay spare once the reserved job starts.
    """
    now = cluster.now
    t_res, extra = cluster.reservation(reserved.job.requested_processors, now)
    started: List[PendingJob] = []

    for pending in sorted(queue, key=lambda p: (p.job.submit_time, p.job.job_id)):
        job = pending.job
        if pending is reserved or job.job_id == reserved.job.job_id:
            continue
        if not cluster.fits(job):
            continue
        if now + job.requested_time <= t_res:
            cluster.start(job, now)
            started.append(pending)
        elif job.requested_processors <= extra:
            cluster.start(job, now)
            extra -= job.requested_processors
            started.append(pending)
    return started


class SchedulerPolicy(Protocol):
    """Anything that picks the next pending job."""

    name: str

    def select(self, queue: Sequence[PendingJob], cluster: ClusterState) -> int:
        ...


class SchedulingEnv:
    """One episode of scheduling a job sequence on an idle cluster.

    The agent picks a pending job; the environment commits it, waiting (and
    backfilling when enabled) until it can start, then advances time until
    another decision is needed. The reward is 0 except on the final step.
    """

    def __init__(
        self,
        goal: Goal = Goal.AVG_BSLD,
        backfilling: bool = False,
        max_obsv_size: int = MAX_OBSV_SIZE,
        mask_non_runnable: bool = False,
        user_feature: bool = False,
        debug_checks: bool = False,
    ):
        self.goal = goal
        self.backfilling = backfilling
        self.max_obsv_size = max_obsv_size
        self.mask_non_runnable = mask_non_runnable
        self.user_feature = user_feature
        self.debug_checks = debug_checks

        self._sequence: Optional[JobSequence] = None
        self._jobs: List[Job] = []
        self._next_arrival = 0
        self._queue: List[Job] = []
        self._starts: Dict[int, int] = {}
        self._order: List[Job] = []
        self._user_waits: Dict[int, List[int]] = defaultdict(list)
        self._observation: Optional[ObservationMatrix] = None
        self.cluster = ClusterState(total_processors=1)
        self.backfilled_jobs = 0

    @property
    def now(self) -> int:
        return self.cluster.now

    @property
    def done(self) -> bool:
        return self._sequence is not None and len(self._starts) == len(self._jobs)

    @property
    def pending(self) -> List[PendingJob]:
        now = self.cluster.now
        return [PendingJob(job, now - job.submit_time) for job in self._queue]

    @property
    def observation_width(self) -> int:
        return JOB_FEATURES + (1 if self.user_feature else 0)

    def load(self, sequence: JobSequence) -> None:
        """Reset to an idle cluster holding `sequence` without building an observation."""
        if self.goal.needs_users and not sequence.has_users:
            raise MissingUserInfo(f"goal {self.goal.value} needs user ids, {sequence.source_name} has none")

        self._sequence = sequence
        self._jobs = sorted(sequence.jobs, key=lambda j: (j.submit_time, j.job_id))
        self._next_arrival = 0
        self._queue = []
        self._starts = {}
        self._order = []
        self._user_waits = defaultdict(list)
        self._observation = None
        self.backfilled_jobs = 0
        self.cluster = ClusterState(
            total_processors=sequence.cluster_size,
            now=self._jobs[0].submit_time,
            time_cap=sequence.time_cap,
        )
        self._process_events(self.cluster.now)

    def reset(self, sequence: JobSequence) -> ObservationMatrix:
        self.load(sequence)
        return self.observe()

    def observe(self) -> ObservationMatrix:
        self._observation = build_observation(
            self.pending,
            self.cluster,
            self.cluster.now,
            max_obsv_size=self.max_obsv_size,
            mask_non_runnable=self.mask_non_runnable,
            user_feature=self.user_feature,
        )
        return self._observation

    def step(self, action: int) -> Tuple[Optional[ObservationMatrix], float, bool]:
        """Commit the job in observation slot `action`.

        Returns (next observation or None when done, reward, done).

        Raises:
            IllegalAction: the slot is padding, masked, or no episode is active
        """
        if self._observation is None:
            raise IllegalAction("step() called without a current observation")
        index = self._observation.queue_index(action)
        done = self.commit(index)
        if done:
            self._observation = None
            return None, sequence_reward(self.metrics(), self.goal), True
        return self.observe(), 0.0, False

    def commit(self, queue_index: int) -> bool:
        """Start the pending job at `queue_index`, waiting for processors if needed."""
        if self.done or self._sequence is None:
            raise IllegalAction("episode is finished")
        if not 0 <= queue_index < len(self._queue):
            raise IllegalAction(f"queue index {queue_index} out of range ({len(self._queue)} pending)")

        job = self._queue[queue_index]
        if not self.cluster.fits(job):
            if self.backfilling:
                self._wait_with_backfill(job)
            else:
                self._wait_for_processors(job)

        self._queue.remove(job)
        self._start(job)
        self._advance_until_pending()
        return self.done

    def record(self) -> ScheduleRecord:
        outcomes = tuple(
            JobOutcome(
                job_id=job.job_id,
                user_id=job.user_id,
                submit=job.submit_time,
                start=self._starts[job.job_id],
                end=self._starts[job.job_id] + job.actual_runtime,
                procs=job.requested_processors,
            )
            for job in self._order
        )
        return ScheduleRecord(outcomes)

    def metrics(self) -> ScheduleMetrics:
        return compute_metrics(self.record(), self.cluster.total_processors)

    def _start(self, job: Job) -> None:
        self.cluster.start(job, self.cluster.now)
        self._record_start(job)

    def _record_start(self, job: Job) -> None:
        now = self.cluster.now
        self._starts[job.job_id] = now
        self._order.append(job)
        waits = self._user_waits[job.user_id]
        waits.append(now - job.submit_time)
        self.cluster.user_mean_wait[job.user_id] = sum(waits) / len(waits)

    def _next_event_time(self) -> Optional[int]:
        candidates = []
        completion = self.cluster.next_completion()
        if completion is not None:
            candidates.append(completion)
        if self._next_arrival < len(self._jobs):
            candidates.append(self._jobs[self._next_arrival].submit_time)
        return min(candidates) if candidates else None

    def _process_events(self, t: int) -> None:
        """Completions at t, then arrivals at t."""
        self.cluster.now = t
        self.cluster.complete_until(t)
        while self._next_arrival < len(self._jobs) and self._jobs[self._next_arrival].submit_time <= t:
            self._queue.append(self._jobs[self._next_arrival])
            self._next_arrival += 1
        if self.debug_checks:
            self.cluster.check_conservation()

    def _advance(self) -> None:
        t = self._next_event_time()
        if t is None:
            raise RuntimeError("simulation stalled with no pending event")
        self._process_events(t)

    def _wait_for_processors(self, job: Job) -> None:
        while not self.cluster.fits(job):
            self._advance()

    def _wait_with_backfill(self, job: Job) -> None:
        while not self.cluster.fits(job):
            now = self.cluster.now
            reserved = PendingJob(job, now - job.submit_time)
            others = [PendingJob(j, now - j.submit_time) for j in self._queue if j is not job]
            for pending in backfill_pass(self.cluster, reserved, others):
                self._queue.remove(pending.job)
                self._record_start(pending.job)
                self.backfilled_jobs += 1
            if self.debug_checks:
                self.cluster.check_conservation()
            self._advance()

    def _advance_until_pending(self) -> None:
        while not self._queue and self._next_arrival < len(self._jobs):
            self._advance()


def run_with_scheduler(
    sequence: JobSequence,
    scheduler: SchedulerPolicy,
    backfilling: bool,
    goal: Goal = Goal.AVG_BSLD,
    **env_options,
) -> ScheduleMetrics:
    """Schedule a whole sequence with `scheduler` and return its metrics."""
    env = SchedulingEnv(goal=goal, backfilling=backfilling, **env_options)
    env.load(sequence)
    while not env.done:
        index = scheduler.select(env.pending, env.cluster)
        env.commit(index)
    return env.metrics()
