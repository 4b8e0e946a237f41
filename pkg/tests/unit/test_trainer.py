"""Unit tests for rewards, trajectory collection, advantages and PPO updates."""

import numpy as np
import pytest

import app.trainer as trainer_module
from app.config import EnvironmentSection, PpoConfig
from app.exceptions import MissingUserInfo, TrainingDiverged
from app.heuristics import HeuristicScheduler
from app.models import FilterRange, Goal, JobTrace, ScheduleMetrics
from app.neural import PolicyNet, ValueNet, policy_forward, policy_log_probs
from app.rewards import is_better
from app.simulator import ObservationMatrix, run_with_scheduler
from app.storage import ResultStore, read_curve
from app.trainer import (
    EpisodeOptions,
    PolicyScheduler,
    PpoBatch,
    PPOTrainer,
    Trajectory,
    collect_trajectories,
    compute_advantages,
    compute_filter_range,
    filter_range_from_samples,
    goal_metric,
    ppo_update,
    sequence_reward,
    sjf_metric,
    surrogate_objective,
    train,
)
from app.workload import sample_sequence


def small_config(**overrides):
    values = dict(trajectories_per_epoch=2, trajectory_len=16, update_iterations=3, epochs=1, seed=0)
    values.update(overrides)
    return PpoConfig(**values)


def make_metrics(**overrides):
    values = dict(avg_bounded_slowdown=3.0, avg_slowdown=4.0, avg_wait=120.0, avg_turnaround=300.0,
                  utilization=0.7, per_user_avg_bsld={1: 2.0, 2: 5.0}, job_count=10)
    values.update(overrides)
    return ScheduleMetrics(**values)


def nets(options, seed=0):
    policy = PolicyNet.create(seed, job_features=options.job_features, max_obsv_size=options.max_obsv_size)
    value_net = ValueNet.create(seed + 1, job_features=options.job_features, max_obsv_size=options.max_obsv_size)
    return policy, value_net


def trajectory(rewards, values):
    n = len(rewards)
    return Trajectory(
        observations=np.zeros((n, 2, 5)),
        masks=np.ones((n, 2), dtype=bool),
        actions=np.zeros(n, dtype=np.int64),
        log_probs=np.zeros(n),
        values=np.asarray(values, dtype=np.float64),
        rewards=np.asarray(rewards, dtype=np.float64),
        metric=0.0,
    )


class TestRewards:
    def test_goal_metrics(self):
        metrics = make_metrics()

        assert goal_metric(metrics, Goal.AVG_BSLD) == 3.0
        assert goal_metric(metrics, Goal.AVG_WAIT) == 120.0
        assert goal_metric(metrics, Goal.FAIR_MAX_USER_BSLD) == 5.0
        assert goal_metric(metrics, Goal.FAIR_AVG_USER_BSLD) == 3.5

    def test_sequence_reward_sign(self):
        metrics = make_metrics()

        assert sequence_reward(metrics, Goal.AVG_BSLD) == -3.0
        assert sequence_reward(metrics, Goal.AVG_TURNAROUND) == -300.0
        assert sequence_reward(metrics, Goal.UTILIZATION) == 0.7

    def test_fairness_needs_known_users(self):
        with pytest.raises(MissingUserInfo):
            goal_metric(make_metrics(per_user_avg_bsld={-1: 2.0}), Goal.FAIR_MAX_USER_BSLD)

    def test_is_better(self):
        assert is_better(2.0, 3.0, Goal.AVG_BSLD)
        assert is_better(0.8, 0.7, Goal.UTILIZATION)
        assert not is_better(3.0, 3.0, Goal.AVG_WAIT)


class TestFilterRange:
    def test_from_samples(self):
        result = filter_range_from_samples([1, 2, 3, 4, 100])

        assert (result.low, result.high) == (3.0, 44.0)
        assert result.skewness > 0
        assert result.samples == 5
        assert result.contains(3.0) and result.contains(44.0)
        assert not result.contains(44.1)

    def test_no_samples(self):
        with pytest.raises(ValueError):
            filter_range_from_samples([])

    def test_bounds_are_inclusive(self):
        r = FilterRange(low=1.0, high=1460.0)

        assert r.contains(1.0)
        assert r.contains(1460.0)
        assert r.contains(37.5)
        assert not r.contains(0.999)
        assert not r.contains(1460.001)

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_independent_order_statistics(self, mini_trace, seed):
        n_samples = 11
        result = compute_filter_range(mini_trace, Goal.AVG_BSLD, n_samples=n_samples, seed=seed, sequence_length=16)

        rng = np.random.default_rng(seed)
        replay = []
        for _ in range(n_samples):
            seq = sample_sequence(mini_trace, 16, int(rng.integers(2 ** 32)))
            metrics = run_with_scheduler(seq, HeuristicScheduler("sjf"), backfilling=True)
            replay.append(metrics.avg_bounded_slowdown)

        assert result.low == sorted(replay)[n_samples // 2]
        assert result.high == pytest.approx(2.0 * sum(replay) / n_samples, rel=1e-12)
        assert result.samples == n_samples


class TestCollection:
    def test_trajectory_shapes_and_rewards(self, mini_trace):
        config = small_config()
        options = EpisodeOptions.from_settings(config)
        policy, value_net = nets(options)

        batch = collect_trajectories(mini_trace, policy, value_net, config, options, epoch=1)

        assert len(batch) == 2
        for traj in batch.trajectories:
            assert len(traj) == 16
            assert traj.observations.shape == (16, 128, 5)
            assert np.all(traj.rewards[:-1] == 0.0)
            assert traj.rewards[-1] == pytest.approx(-traj.metric)
            assert traj.metric >= 1.0
            assert np.all(traj.masks[np.arange(16), traj.actions])
            assert np.all(traj.log_probs <= 0.0)
        assert batch.steps == 32

    def test_deterministic_per_epoch(self, mini_trace):
        config = small_config()
        options = EpisodeOptions.from_settings(config)
        policy, value_net = nets(options)

        a = collect_trajectories(mini_trace, policy, value_net, config, options, epoch=3)
        b = collect_trajectories(mini_trace, policy, value_net, config, options, epoch=3)

        assert [t.digest for t in a.trajectories] == [t.digest for t in b.trajectories]
        for ta, tb in zip(a.trajectories, b.trajectories):
            assert np.array_equal(ta.actions, tb.actions)

    def test_worker_processes_merge_in_order(self, mini_trace):
        config = small_config(trajectories_per_epoch=4, workers=2)
        options = EpisodeOptions.from_settings(config)
        policy, value_net = nets(options)

        a = collect_trajectories(mini_trace, policy, value_net, config, options, epoch=1)
        b = collect_trajectories(mini_trace, policy, value_net, config, options, epoch=1)

        assert len(a) == 4
        assert [t.digest for t in a.trajectories] == [t.digest for t in b.trajectories]

    def test_impossible_filter_hits_the_cap(self, mini_trace):
        config = small_config(rejection_cap=3)
        options = EpisodeOptions.from_settings(config)
        policy, value_net = nets(options)

        batch = collect_trajectories(mini_trace, policy, value_net, config, options, epoch=1,
                                     filter_range=FilterRange(low=1e9, high=2e9))

        assert len(batch) == 2
        assert batch.filter_capped == 2
        assert batch.rejected == 6

    def test_permissive_filter_accepts_first_draw(self, mini_trace):
        config = small_config()
        options = EpisodeOptions.from_settings(config)
        policy, value_net = nets(options)

        batch = collect_trajectories(mini_trace, policy, value_net, config, options, epoch=1,
                                     filter_range=FilterRange(low=0.0, high=1e9))

        assert batch.filter_capped == 0
        assert batch.rejected == 0


class TestAdvantages:
    def test_terminal_reward_with_zero_values(self):
        adv, ret = compute_advantages([trajectory([0, 0, -5], [0, 0, 0])], gamma=1.0, lam=1.0, normalize=False)

        assert list(ret) == [-5.0, -5.0, -5.0]
        assert list(adv) == [-5.0, -5.0, -5.0]

    def test_matches_explicit_gae_sum(self):
        rng = np.random.default_rng(0)
        rewards = np.append(np.zeros(9), -4.0)
        values = rng.normal(size=10)
        gamma, lam = 0.99, 0.95

        adv, ret = compute_advantages([trajectory(rewards, values)], gamma, lam, normalize=False)

        next_values = np.append(values[1:], 0.0)
        deltas = rewards + gamma * next_values - values
        expected = [sum((gamma * lam) ** k * deltas[t + k] for k in range(10 - t)) for t in range(10)]
        expected_ret = [sum(gamma ** k * rewards[t + k] for k in range(10 - t)) for t in range(10)]
        assert adv == pytest.approx(expected)
        assert ret == pytest.approx(expected_ret)

    def test_trajectories_do_not_leak_into_each_other(self):
        adv, ret = compute_advantages(
            [trajectory([0, -1], [0, 0]), trajectory([0, -9], [0, 0])], gamma=1.0, lam=1.0, normalize=False
        )

        assert list(ret) == [-1.0, -1.0, -9.0, -9.0]

    def test_normalised(self):
        rng = np.random.default_rng(1)
        trajs = [trajectory(np.append(np.zeros(4), -rng.random() * 10), rng.normal(size=5)) for _ in range(6)]

        adv, _ = compute_advantages(trajs, gamma=1.0, lam=0.97)

        assert adv.mean() == pytest.approx(0.0, abs=1e-9)
        assert adv.std() == pytest.approx(1.0, abs=1e-6)


class TestSurrogate:
    def test_identity_at_old_policy(self):
        adv = np.array([1.0, -2.0, 0.5, 3.0])
        logp = np.log([0.1, 0.2, 0.3, 0.4])

        objective, grad = surrogate_objective(logp, logp, adv, clip_ratio=0.2)

        assert objective == pytest.approx(adv.mean())
        assert grad == pytest.approx(adv / 4)

    def test_clipped_steps_have_no_gradient(self):
        old = np.zeros(4)
        new = np.log([1.5, 0.5, 0.5, 1.5])
        adv = np.array([1.0, -1.0, 1.0, -1.0])

        objective, grad = surrogate_objective(new, old, adv, clip_ratio=0.2)

        assert objective == pytest.approx((1.2 - 0.8 + 0.5 - 1.5) / 4)
        assert grad == pytest.approx([0.0, 0.0, 0.5 / 4, -1.5 / 4])


def bandit_batch(policy, size=64):
    """Two-slot observations; slot 0 is always the better arm."""
    values = np.zeros((size, 2, 5), dtype=np.float32)
    values[:, 0, 0] = 1.0
    values[:, 1, 1] = 1.0
    masks = np.ones((size, 2), dtype=bool)
    actions = np.array([0, 1] * (size // 2), dtype=np.int64)
    old, _ = policy_log_probs(policy, values, masks, actions)
    advantages = np.where(actions == 0, 1.0, -1.0)
    return PpoBatch(values, masks, actions, old, advantages, np.zeros(size))


def arm_probability(policy):
    values = np.zeros((2, 5), dtype=np.float32)
    values[0, 0] = 1.0
    values[1, 1] = 1.0
    obs = ObservationMatrix(values, np.ones(2, dtype=bool), np.arange(2))
    return float(policy_forward(policy, obs)[0])


class TestPpoUpdate:
    def test_zero_advantages_leave_policy_unchanged(self):
        policy = PolicyNet.create(0, max_obsv_size=2)
        value_net = ValueNet.create(1, max_obsv_size=2, hidden=(4,))
        batch = bandit_batch(policy)
        batch.advantages = np.zeros(len(batch))

        result = ppo_update(policy, value_net, batch, small_config(update_iterations=5))

        assert np.array_equal(result.policy.params.flat(), policy.params.flat())
        assert result.policy_iterations == 5

    def test_better_arm_becomes_more_likely(self):
        config = small_config(update_iterations=20, learning_rate=1e-3)
        policy = PolicyNet.create(3, max_obsv_size=2)
        value_net = ValueNet.create(4, max_obsv_size=2, hidden=(4,))

        history = [arm_probability(policy)]
        for _ in range(5):
            result = ppo_update(policy, value_net, bandit_batch(policy), config)
            policy, value_net = result.policy, result.value_net
            history.append(arm_probability(policy))

        assert all(b > a for a, b in zip(history, history[1:]))

    def test_value_regression_reduces_loss(self):
        config = small_config(update_iterations=50, learning_rate=1e-2)
        policy = PolicyNet.create(0, max_obsv_size=2)
        value_net = ValueNet.create(1, max_obsv_size=2, hidden=(4,))
        batch = bandit_batch(policy)
        batch.returns = np.full(len(batch), -2.0)

        first = ppo_update(policy, value_net, batch, config)
        second = ppo_update(first.policy, first.value_net, batch, config)

        assert second.value_loss < first.value_loss

    def test_kl_early_stop(self):
        policy = PolicyNet.create(0, max_obsv_size=2)
        value_net = ValueNet.create(1, max_obsv_size=2, hidden=(4,))
        batch = bandit_batch(policy)
        batch.log_probs = batch.log_probs + 1.0

        result = ppo_update(policy, value_net, batch, small_config(update_iterations=10))

        assert result.policy_iterations == 0
        assert result.policy_loss == 0.0


class TestPPOTrainer:
    def test_zero_epochs(self, mini_trace, tmp_path):
        store = ResultStore(tmp_path)

        result = PPOTrainer(mini_trace, small_config(epochs=0), store=store).train()

        assert len(result.curve) == 0
        assert result.best_policy is None
        assert (store.checkpoint_dir("final") / "policy.bin").is_file()

    def test_one_epoch_writes_curve_and_checkpoint(self, mini_trace, tmp_path):
        store = ResultStore(tmp_path)
        trainer = PPOTrainer(mini_trace, small_config(), store=store)

        result = trainer.train()

        assert [row.epoch for row in result.curve.rows] == [1]
        assert len(read_curve(store.curve_path)) == 1
        assert store.load_policy("best").num_params == 865
        assert trainer.get_stats()["episodes"] == 2
        assert trainer.get_stats()["decisions"] == 32

    def test_deterministic(self, mini_trace):
        a, _, curve_a = train(mini_trace, small_config(epochs=2))
        b, _, curve_b = train(mini_trace, small_config(epochs=2))

        assert np.array_equal(a.params.flat(), b.params.flat())
        assert [r.mean_metric for r in curve_a.rows] == [r.mean_metric for r in curve_b.rows]

    def test_filtering_phase(self, mini_trace):
        config = small_config(epochs=2, filtering=True, filter_samples=30)
        trainer = PPOTrainer(mini_trace, config)

        result = trainer.train()

        assert result.filter_range is not None
        assert result.filter_range.samples == 30
        assert len(result.curve) == 2

    def test_filtered_epochs_only_train_on_sequences_in_range(self, mini_trace, monkeypatch):
        real_draw = trainer_module._draw_sequence
        drawn = []

        def recording_draw(task, rng):
            sequence, rejected, capped = real_draw(task, rng)
            drawn.append((task.epoch, task.filter_range, sequence, capped))
            return sequence, rejected, capped

        monkeypatch.setattr(trainer_module, "_draw_sequence", recording_draw)
        config = small_config(epochs=4, trajectories_per_epoch=4, filtering=True, filter_samples=30)
        trainer = PPOTrainer(mini_trace, config)

        result = trainer.train()

        filtered = [(r, s, c) for epoch, r, s, c in drawn if epoch <= config.step1_epochs]
        unfiltered = [r for epoch, r, _, _ in drawn if epoch > config.step1_epochs]
        assert len(filtered) == 4 * config.step1_epochs
        assert all(r == result.filter_range for r, _, _ in filtered)
        assert unfiltered and all(r is None for r in unfiltered)

        capped = 0
        for filter_range, sequence, was_capped in filtered:
            if was_capped:
                capped += 1
                continue
            assert filter_range.contains(sjf_metric(sequence, config.goal))
        assert capped == trainer.get_stats()["filter_capped"]
        assert capped < len(filtered)

    def test_best_checkpoint_holds_the_collecting_policy(self, mini_trace, tmp_path, monkeypatch):
        real_collect = trainer_module.collect_trajectories
        collectors = []

        def recording_collect(trace, policy, value_net, *args, **kwargs):
            collectors.append((policy, value_net))
            return real_collect(trace, policy, value_net, *args, **kwargs)

        monkeypatch.setattr(trainer_module, "collect_trajectories", recording_collect)
        store = ResultStore(tmp_path)

        result = PPOTrainer(mini_trace, small_config(epochs=3), store=store).train()

        best = result.best_epoch
        best_policy, _ = collectors[best - 1]
        updated = collectors[best][0] if best < len(collectors) else result.policy
        assert result.best_policy is best_policy
        saved = store.load_policy("best")
        assert np.allclose(saved.params.flat(), best_policy.params.flat(), atol=1e-6)
        assert not np.allclose(saved.params.flat(), updated.params.flat(), atol=1e-6)

    def test_user_feature_network(self, mini_trace):
        trainer = PPOTrainer(mini_trace, small_config(), EnvironmentSection(user_feature=True))

        result = trainer.train()

        assert result.policy.job_features == 6

    def test_fairness_goal_without_users(self, make_job):
        trace = JobTrace(jobs=(make_job(1), make_job(2)), cluster_size=4)

        with pytest.raises(MissingUserInfo):
            PPOTrainer(trace, small_config(goal=Goal.FAIR_AVG_USER_BSLD))

    def test_repeated_divergence_is_fatal(self, mini_trace, monkeypatch):
        def diverge(*args, **kwargs):
            raise TrainingDiverged("non-finite loss")

        monkeypatch.setattr(trainer_module, "ppo_update", diverge)
        trainer = PPOTrainer(mini_trace, small_config(epochs=5))

        with pytest.raises(TrainingDiverged, match="3 consecutive"):
            trainer.train()
        assert trainer.get_stats()["epochs_diverged"] == 3
        assert trainer.policy_optimizer.t == 0

    def test_recovers_from_isolated_divergence(self, mini_trace, monkeypatch):
        real_update = trainer_module.ppo_update
        calls = {"n": 0}

        def flaky(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] <= 2:
                raise TrainingDiverged("non-finite loss")
            return real_update(*args, **kwargs)

        monkeypatch.setattr(trainer_module, "ppo_update", flaky)

        result = PPOTrainer(mini_trace, small_config(epochs=4)).train()

        assert [row.epoch for row in result.curve.rows] == [3, 4]


class TestPolicyScheduler:
    def test_schedules_a_whole_sequence(self, mini_trace):
        seq = sample_sequence(mini_trace, 32, seed=2)
        scheduler = PolicyScheduler(PolicyNet.create(0))

        metrics = run_with_scheduler(seq, scheduler, backfilling=True)

        assert metrics.job_count == 32

    def test_infers_user_feature(self):
        assert PolicyScheduler(PolicyNet.create(0, job_features=6)).user_feature
        assert not PolicyScheduler(PolicyNet.create(0)).user_feature
