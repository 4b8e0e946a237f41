"""End-to-end tests of the command line through click's test runner."""

from pathlib import Path

import pytest
from click.testing import CliRunner

import app.trainer as trainer_module
from app import __version__
from app.exceptions import TrainingDiverged
from app.main import EXIT_DIVERGED, EXIT_INPUT_ERROR, EXIT_MODEL_ERROR, cli
from app.storage import read_curve, read_manifest, read_metrics, read_table


@pytest.fixture
def runner():
    return CliRunner()


def write_swf(path: Path, cluster_size: int, jobs) -> Path:
    """jobs: (job_id, submit, runtime, procs, user) tuples."""
    lines = [f"; MaxProcs: {cluster_size}"]
    for job_id, submit, runtime, procs, user in jobs:
        lines.append(f"{job_id} {submit} 0 {runtime} {procs} -1 -1 {procs} {runtime} -1 1 {user} 1 -1 1 -1 -1 -1")
    path.write_text("\n".join(lines) + "\n")
    return path


def stdout_lines(result):
    return result.output.splitlines()


class TestStats:
    def test_mini_trace(self, runner, mini_trace_path):
        result = runner.invoke(cli, ["stats", str(mini_trace_path)])

        assert result.exit_code == 0, result.output
        assert "64 30 145 4" in stdout_lines(result)

    def test_cluster_override(self, runner, mini_trace_path):
        result = runner.invoke(cli, ["stats", str(mini_trace_path), "--max-procs", "128", "--max-jobs", "10"])

        assert result.exit_code == 0
        assert any(line.startswith("128 ") for line in stdout_lines(result))

    def test_missing_file(self, runner, tmp_path):
        result = runner.invoke(cli, ["stats", str(tmp_path / "nope.swf")])

        assert result.exit_code == EXIT_INPUT_ERROR
        assert "trace not found" in result.output

    def test_empty_file(self, runner, tmp_path):
        empty = tmp_path / "empty.swf"
        empty.write_text("")

        result = runner.invoke(cli, ["stats", str(empty)])

        assert result.exit_code == EXIT_INPUT_ERROR

    def test_version(self, runner):
        result = runner.invoke(cli, ["--version"])

        assert __version__ in result.output


class TestGen:
    def test_generated_trace_reads_back(self, runner, tmp_path):
        out = tmp_path / "synthetic.swf"

        result = runner.invoke(cli, ["gen", str(out), "--jobs", "300", "--cluster-size", "64", "--seed", "3"])
        assert result.exit_code == 0, result.output

        stats = runner.invoke(cli, ["stats", str(out)])
        assert stats.exit_code == 0
        assert any(line.startswith("64 ") and len(line.split()) == 4 for line in stdout_lines(stats))

    def test_invalid_generator_settings(self, runner, tmp_path):
        result = runner.invoke(cli, ["gen", str(tmp_path / "x.swf"), "--cluster-size", "16",
                                     "--set", "synthetic.proc_max=64"])

        assert result.exit_code == EXIT_INPUT_ERROR


class TestEvaluate:
    def test_single_job_never_waits(self, runner, tmp_path):
        trace = write_swf(tmp_path / "one.swf", 4, [(1, 0, 100, 2, 1)])

        result = runner.invoke(cli, ["evaluate", str(trace), "-s", "fcfs", "--goal", "wait", "--reps", "1",
                                     "--length", "1", "--output-dir", str(tmp_path / "out")])

        assert result.exit_code == 0, result.output
        _, rows = read_table(tmp_path / "out" / "table.csv")
        assert rows[("one", True)]["fcfs"] == 0.0

    def test_sjf_beats_fcfs_on_one_processor(self, runner, tmp_path):
        trace = write_swf(tmp_path / "tiny.swf", 1, [(1, 0, 100, 1, 1), (2, 0, 1000, 1, 1), (3, 0, 10, 1, 1)])

        result = runner.invoke(cli, ["evaluate", str(trace), "-s", "fcfs", "-s", "sjf", "--goal", "wait",
                                     "--reps", "1", "--length", "3", "--no-backfill",
                                     "--output-dir", str(tmp_path / "out")])

        assert result.exit_code == 0, result.output
        columns, rows = read_table(tmp_path / "out" / "table.csv")
        assert columns == ["fcfs", "sjf"]
        assert rows[("tiny", False)]["fcfs"] == pytest.approx(400.0)
        assert rows[("tiny", False)]["sjf"] == pytest.approx(40.0)

    def test_repeatable_tables(self, runner, mini_trace_path, tmp_path):
        args = ["evaluate", str(mini_trace_path), "-s", "fcfs", "-s", "wfp3", "--reps", "3", "--length", "50",
                "--seed", "9"]

        first = runner.invoke(cli, args + ["--output-dir", str(tmp_path / "a")])
        second = runner.invoke(cli, args + ["--output-dir", str(tmp_path / "b")])

        assert first.exit_code == 0 and second.exit_code == 0
        assert (tmp_path / "a" / "table.csv").read_text() == (tmp_path / "b" / "table.csv").read_text()

    def test_both_modes_and_long_metrics(self, runner, mini_trace_path, tmp_path):
        out = tmp_path / "out"

        result = runner.invoke(cli, ["evaluate", str(mini_trace_path), "-s", "sjf", "--reps", "2", "--length",
                                     "40", "--both-modes", "--save-records", "--output-dir", str(out)])

        assert result.exit_code == 0, result.output
        _, rows = read_table(out / "table.csv")
        assert set(rows) == {("mini_trace", True), ("mini_trace", False)}
        metrics = {r["metric"] for r in read_metrics(out / "metrics.csv")}
        assert {"avg_bounded_slowdown", "utilization", "max_user_bsld"} <= metrics
        assert (out / "records" / "mini_trace_sjf_bf.csv").is_file()
        assert (out / "records" / "mini_trace_sjf_nobf.csv").is_file()
        assert "config_hash" in read_manifest(out / "manifest.txt")

    def test_garbage_checkpoint(self, runner, mini_trace_path, tmp_path):
        garbage = tmp_path / "policy.bin"
        garbage.write_bytes(b"\x00" * 64)

        result = runner.invoke(cli, ["evaluate", str(mini_trace_path), "-s", str(garbage),
                                     "--output-dir", str(tmp_path / "out")])

        assert result.exit_code == EXIT_MODEL_ERROR

    def test_unknown_scheduler_is_a_usage_error(self, runner, mini_trace_path, tmp_path):
        result = runner.invoke(cli, ["evaluate", str(mini_trace_path), "-s", "nonsense",
                                     "--output-dir", str(tmp_path / "out")])

        assert result.exit_code == EXIT_INPUT_ERROR
        assert "unknown scheduler 'nonsense'" in result.output

    def test_checkpoint_dir_without_policy(self, runner, mini_trace_path, tmp_path):
        empty = tmp_path / "empty_checkpoint"
        empty.mkdir()

        result = runner.invoke(cli, ["evaluate", str(mini_trace_path), "-s", str(empty),
                                     "--output-dir", str(tmp_path / "out")])

        assert result.exit_code == EXIT_MODEL_ERROR

    def test_sequence_longer_than_trace(self, runner, mini_trace_path, tmp_path):
        result = runner.invoke(cli, ["evaluate", str(mini_trace_path), "-s", "fcfs", "--length", "500",
                                     "--output-dir", str(tmp_path / "out")])

        assert result.exit_code == EXIT_INPUT_ERROR

    def test_configuration_precedence(self, runner, mini_trace_path, tmp_path):
        config = tmp_path / "run.toml"
        config.write_text("[evaluation]\nrepetitions = 2\nsequence_length = 20\nschedulers = [\"fcfs\"]\n")
        base = ["evaluate", str(mini_trace_path), "--config", str(config)]

        def repetitions(*extra):
            out = tmp_path / f"out{len(extra)}"
            result = runner.invoke(cli, base + list(extra) + ["--output-dir", str(out)])
            assert result.exit_code == 0, result.output
            return read_manifest(out / "manifest.txt")["repetitions"]

        assert repetitions() == "2"
        assert repetitions("--set", "evaluation.repetitions=3") == "3"
        assert repetitions("--set", "evaluation.repetitions=3", "--reps", "1") == "1"

    def test_environment_is_read_per_invocation(self, runner, mini_trace_path, tmp_path, monkeypatch):
        base = ["evaluate", str(mini_trace_path), "-s", "fcfs", "--length", "20"]

        def repetitions(value):
            monkeypatch.setenv("SCHEDRL_EVALUATION__REPETITIONS", value)
            out = tmp_path / f"env{value}"
            result = runner.invoke(cli, base + ["--output-dir", str(out)])
            assert result.exit_code == 0, result.output
            return read_manifest(out / "manifest.txt")["repetitions"]

        assert repetitions("2") == "2"
        assert repetitions("3") == "3"

    def test_bad_override(self, runner, mini_trace_path):
        result = runner.invoke(cli, ["evaluate", str(mini_trace_path), "--set", "training.clip_ratio=2"])

        assert result.exit_code == EXIT_INPUT_ERROR
        assert "configuration failed" in result.output


class TestTrain:
    @pytest.fixture
    def synthetic_trace(self, runner, tmp_path):
        out = tmp_path / "synthetic.swf"
        result = runner.invoke(cli, ["gen", str(out), "--jobs", "1000", "--cluster-size", "64", "--seed", "1"])
        assert result.exit_code == 0, result.output
        return out

    def test_one_epoch_then_evaluate(self, runner, synthetic_trace, tmp_path):
        out = tmp_path / "run"

        result = runner.invoke(cli, ["train", str(synthetic_trace), "--epochs", "1", "--trajectories", "2",
                                     "--length", "32", "--output-dir", str(out),
                                     "--set", "training.update_iterations=2"])

        assert result.exit_code == 0, result.output
        assert len(read_curve(out / "curve.csv")) == 1
        assert (out / "checkpoints" / "best" / "policy.bin").is_file()
        assert (out / "config.toml").is_file()
        assert read_manifest(out / "manifest.txt")["command"] == "train"

        evaluated = runner.invoke(cli, ["evaluate", str(synthetic_trace), "-s", "sjf",
                                        "-s", str(out / "checkpoints" / "best"), "--reps", "2", "--length", "32",
                                        "--output-dir", str(tmp_path / "eval")])
        assert evaluated.exit_code == 0, evaluated.output
        columns, _ = read_table(tmp_path / "eval" / "table.csv")
        assert len(columns) == 2

    def test_missing_trace(self, runner, tmp_path):
        result = runner.invoke(cli, ["train", str(tmp_path / "absent.swf"), "--output-dir", str(tmp_path / "run")])

        assert result.exit_code == EXIT_INPUT_ERROR

    def test_divergence_exit_code(self, runner, synthetic_trace, tmp_path, monkeypatch):
        def diverge(*args, **kwargs):
            raise TrainingDiverged("non-finite loss")

        monkeypatch.setattr(trainer_module, "ppo_update", diverge)

        result = runner.invoke(cli, ["train", str(synthetic_trace), "--epochs", "3", "--trajectories", "1",
                                     "--length", "16", "--output-dir", str(tmp_path / "run")])

        assert result.exit_code == EXIT_DIVERGED


class TestBench:
    def test_zero_trials_prints_nothing(self, runner):
        result = runner.invoke(cli, ["bench", "--trials", "0", "--log-level", "WARNING"])

        assert result.exit_code == 0
        assert result.output.strip() == ""

    def test_latency_lines(self, runner):
        result = runner.invoke(cli, ["bench", "--trials", "50", "--log-level", "WARNING"])

        assert result.exit_code == 0, result.output
        lines = stdout_lines(result)
        assert any(line.startswith("policy mean_us=") for line in lines)
        assert any(line.startswith("sjf mean_us=") for line in lines)

    def test_missing_checkpoint(self, runner, tmp_path):
        result = runner.invoke(cli, ["bench", str(tmp_path / "absent"), "--trials", "5"])

        assert result.exit_code == EXIT_MODEL_ERROR
