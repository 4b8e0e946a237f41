#!/usr/bin/env python3
"""
Scheduling toolkit - Data Models

Pydantic models for jobs, traces, sampled sequences, schedule metrics and
training records. Every model is immutable after construction so it can be
shared read-only between workers.
"""

import hashlib
from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

# user_id sentinel for traces without user information
UNKNOWN_USER = -1


class Goal(str, Enum):
    """Optimization goals (one reward definition each)."""
    AVG_BSLD = "bsld"
    AVG_SLD = "sld"
    AVG_WAIT = "wait"
    AVG_TURNAROUND = "turnaround"
    UTILIZATION = "util"
    FAIR_MAX_USER_BSLD = "fair_max_bsld"
    FAIR_AVG_USER_BSLD = "fair_avg_bsld"

    @property
    def maximize(self) -> bool:
        """True when a larger metric value is better."""
        return self is Goal.UTILIZATION

    @property
    def needs_users(self) -> bool:
        return self in (Goal.FAIR_MAX_USER_BSLD, Goal.FAIR_AVG_USER_BSLD)


class HeuristicKind(str, Enum):
    """Priority-function schedulers."""
    FCFS = "fcfs"
    SJF = "sjf"
    WFP3 = "wfp3"
    UNICEP = "unicep"
    F1 = "f1"


class Job(BaseModel):
    """One batch job as read from a trace."""

    model_config = ConfigDict(frozen=True)

    job_id: int = Field(..., description="Job number")
    submit_time: int = Field(..., ge=0, description="Submit time s_t (s)")
    requested_processors: int = Field(..., ge=1, description="Requested processors n_t")
    requested_time: int = Field(..., ge=0, description="Requested runtime r_t (s), scheduler-visible")
    actual_runtime: int = Field(..., ge=0, description="Actual runtime e_j (s), simulator-only")
    user_id: int = Field(default=UNKNOWN_USER, description="User id or UNKNOWN_USER")

    @property
    def has_user(self) -> bool:
        return self.user_id != UNKNOWN_USER


class JobTrace(BaseModel):
    """An ordered job log together with the cluster it ran on."""

    model_config = ConfigDict(frozen=True)

    jobs: Tuple[Job, ...] = Field(..., description="Jobs sorted by submit time")
    cluster_size: int = Field(..., gt=0, description="Processor count")
    source_name: str = Field(default="trace", description="Trace name")
    dropped_jobs: int = Field(default=0, ge=0, description="Data lines rejected while parsing")
    clamped_jobs: int = Field(default=0, ge=0, description="Jobs clamped to the cluster size")

    @model_validator(mode="after")
    def validate_jobs(self) -> "JobTrace":
        if not self.jobs:
            raise ValueError("trace must contain at least one job")
        previous = -1
        for job in self.jobs:
            if job.submit_time < previous:
                raise ValueError("jobs must be sorted by submit time")
            if job.requested_processors > self.cluster_size:
                raise ValueError(f"job {job.job_id} requests more than {self.cluster_size} processors")
            previous = job.submit_time
        return self

    @property
    def max_requested_time(self) -> int:
        """Normalisation cap for time features."""
        return max(max(job.requested_time for job in self.jobs), 1)

    @property
    def has_users(self) -> bool:
        return all(job.has_user for job in self.jobs)

    def __len__(self) -> int:
        return len(self.jobs)


class TraceStats(BaseModel):
    """Summary statistics of a trace."""

    avg_arrival_interval: float = Field(..., ge=0, description="Mean inter-arrival i_t (s)")
    avg_requested_runtime: float = Field(..., ge=0, description="Mean requested runtime r_t (s)")
    avg_requested_processors: float = Field(..., ge=0, description="Mean requested processors n_t")
    job_count: int = Field(..., ge=0)


class JobSequence(BaseModel):
    """A contiguous window of a trace, re-based to start at t=0."""

    model_config = ConfigDict(frozen=True)

    jobs: Tuple[Job, ...]
    cluster_size: int = Field(..., gt=0)
    source_name: str = Field(default="trace")
    offset: int = Field(default=0, ge=0, description="Index of the first job in the trace")
    time_cap: int = Field(default=0, ge=0, description="Time-feature cap, derived from jobs when 0")

    @model_validator(mode="after")
    def fill_time_cap(self) -> "JobSequence":
        if not self.jobs:
            raise ValueError("sequence must contain at least one job")
        if self.time_cap == 0:
            cap = max(max(job.requested_time for job in self.jobs), 1)
            object.__setattr__(self, "time_cap", cap)
        return self

    @property
    def has_users(self) -> bool:
        return all(job.has_user for job in self.jobs)

    def digest(self) -> str:
        """Stable short hash identifying the jobs of this sequence."""
        h = hashlib.sha1()
        for job in self.jobs:
            h.update(
                f"{job.job_id},{job.submit_time},{job.requested_processors},"
                f"{job.requested_time},{job.actual_runtime};".encode()
            )
        return h.hexdigest()[:12]

    def __len__(self) -> int:
        return len(self.jobs)


class ScheduleMetrics(BaseModel):
    """Scheduling metrics of one fully scheduled sequence."""

    avg_bounded_slowdown: float = Field(..., ge=1.0)
    avg_slowdown: float = Field(..., ge=0)
    avg_wait: float = Field(..., ge=0)
    avg_turnaround: float = Field(..., ge=0)
    utilization: float = Field(..., ge=0, le=1)
    per_user_avg_bsld: Dict[int, float] = Field(default_factory=dict)
    job_count: int = Field(default=0, ge=0)

    @property
    def max_user_bsld(self) -> float:
        return max(self.per_user_avg_bsld.values()) if self.per_user_avg_bsld else 0.0

    @property
    def mean_user_bsld(self) -> float:
        if not self.per_user_avg_bsld:
            return 0.0
        return sum(self.per_user_avg_bsld.values()) / len(self.per_user_avg_bsld)


class FilterRange(BaseModel):
    """Accepted metric range for phase-1 trajectory filtering."""

    model_config = ConfigDict(frozen=True)

    low: float = Field(..., description="Median of the SJF samples")
    high: float = Field(..., description="Twice the mean of the SJF samples")
    skewness: Optional[float] = Field(default=None, description="Sample skewness, informational")
    samples: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def validate_bounds(self) -> "FilterRange":
        if self.low > self.high:
            raise ValueError("filter range low must not exceed high")
        return self

    def contains(self, value: float) -> bool:
        return self.low <= value <= self.high


class CurveRow(BaseModel):
    """One completed training epoch."""

    epoch: int
    mean_metric: float
    std_metric: float
    policy_loss: float
    value_loss: float
    seconds: float
    filter_capped: int = 0


class LearningCurve(BaseModel):
    """Per-epoch training record."""

    rows: List[CurveRow] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)
