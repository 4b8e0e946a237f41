"""Shared fixtures for the scheduling toolkit tests."""

from pathlib import Path
from typing import Callable, Optional, Sequence

import pytest

from app.config import SyntheticConfig
from app.models import UNKNOWN_USER, Job, JobSequence, JobTrace
from app.workload import generate_synthetic, load_trace

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def mini_trace_path() -> Path:
    return DATA_DIR / "mini_trace.swf"


@pytest.fixture
def mini_trace(mini_trace_path) -> JobTrace:
    return load_trace(mini_trace_path)


@pytest.fixture
def make_job() -> Callable[..., Job]:
    def _make(
        job_id: int,
        submit: int = 0,
        procs: int = 1,
        requested: int = 100,
        runtime: Optional[int] = None,
        user: int = UNKNOWN_USER,
    ) -> Job:
        return Job(
            job_id=job_id,
            submit_time=submit,
            requested_processors=procs,
            requested_time=requested,
            actual_runtime=requested if runtime is None else runtime,
            user_id=user,
        )

    return _make


@pytest.fixture
def make_sequence() -> Callable[..., JobSequence]:
    def _make(jobs: Sequence[Job], cluster_size: int = 4, time_cap: int = 0) -> JobSequence:
        ordered = tuple(sorted(jobs, key=lambda j: (j.submit_time, j.job_id)))
        return JobSequence(jobs=ordered, cluster_size=cluster_size, source_name="test", time_cap=time_cap)

    return _make


@pytest.fixture(scope="session")
def small_synthetic_trace() -> JobTrace:
    config = SyntheticConfig(
        cluster_size=64,
        job_count=400,
        arrival_rate=0.01,
        runtime_min=10,
        runtime_max=3600,
        proc_min=1,
        proc_max=32,
        user_count=4,
        estimate_factor_max=2.0,
    )
    return generate_synthetic(config, seed=7)
