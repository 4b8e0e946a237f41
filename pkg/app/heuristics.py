"""Priority-function schedulers.

Each heuristic scores a pending job; the lowest score runs first, ties go
to the earlier submit time and then the lower job id.
"""

import math
from typing import Sequence, Union

from app.exceptions import EmptyQueue
from app.models import HeuristicKind
from app.simulator import ClusterState, PendingJob

F1_ARRIVAL_WEIGHT = 870.0


def score(kind: HeuristicKind, job: PendingJob, now: int) -> float:
    """Priority score of a pending job (lower runs first).

    Requested time is floored at 1 s, the processor count at 2 inside the
    UNICEP logarithm, and the submit time at 1 s inside the F1 logarithm.
    """
    s_t = job.job.submit_time
    r_t = max(job.job.requested_time, 1)
    n_t = job.job.requested_processors
    w_t = max(now - s_t, 0)

    if kind is HeuristicKind.FCFS:
        return float(s_t)
    if kind is HeuristicKind.SJF:
        return float(job.job.requested_time)
    if kind is HeuristicKind.WFP3:
        return -((w_t / r_t) ** 3) * n_t
    if kind is HeuristicKind.UNICEP:
        return -w_t / (math.log2(max(n_t, 2)) * r_t)
    if kind is HeuristicKind.F1:
        return math.log10(r_t) * n_t + F1_ARRIVAL_WEIGHT * math.log10(max(s_t, 1))
    raise ValueError(f"unknown heuristic {kind!r}")


def select(kind: HeuristicKind, queue: Sequence[PendingJob], now: int) -> int:
    """Queue index of the minimal-score job.

    Raises:
        EmptyQueue: nothing is pending
    """
    if not queue:
        raise EmptyQueue("cannot select from an empty queue")
    return min(
        range(len(queue)),
        key=lambda i: (score(kind, queue[i], now), queue[i].job.submit_time, queue[i].job.job_id),
    )


class HeuristicScheduler:
    """SchedulerPolicy wrapper around one heuristic."""

    def __init__(self, kind: Union[HeuristicKind, str]):
        self.kind = HeuristicKind(kind)
        self.name = self.kind.value

    def select(self, queue: Sequence[PendingJob], cluster: ClusterState) -> int:
        return select(self.kind, queue, cluster.now)

    def __repr__(self) -> str:
        return f"HeuristicScheduler({self.name})"


def is_heuristic(name: str) -> bool:
    return name.lower() in {k.value for k in HeuristicKind}


def make_scheduler(name: str) -> HeuristicScheduler:
    """Resolve a command-line heuristic name (fcfs, sjf, wfp3, unicep, f1).

    Raises:
        ValueError: the name is not a heuristic
    """
    if not is_heuristic(name):
        raise ValueError(f"unknown heuristic {name!r}, expected one of "
                         f"{', '.join(k.value for k in HeuristicKind)}")
    return HeuristicScheduler(name.lower())
