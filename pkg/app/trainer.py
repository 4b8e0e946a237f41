"""PPO training service for the kernel policy.

This service handles:
- Episode collection with the stochastic policy (optionally over worker processes)
- Trajectory filtering against an SJF-derived metric range
- Generalized advantage estimation and reward-to-go returns
- Clipped-surrogate policy updates and value regression
- Epoch loop with best-by-goal checkpoints and divergence recovery
"""

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.config import EnvironmentSection, PpoConfig
from app.exceptions import MissingUserInfo, TrainingDiverged
from app.heuristics import HeuristicScheduler
from app.models import CurveRow, FilterRange, Goal, HeuristicKind, JobSequence, JobTrace, LearningCurve
from app.neural import (
    Adam,
    PolicyNet,
    ValueNet,
    policy_argmax,
    policy_forward,
    policy_log_prob_backward,
    policy_log_probs,
    policy_sample,
    value_batch,
    value_batch_backward,
)
from app.rewards import goal_metric, is_better, sequence_reward
from app.simulator import (
    JOB_FEATURES,
    MAX_OBSV_SIZE,
    ClusterState,
    PendingJob,
    SchedulingEnv,
    build_observation,
    run_with_scheduler,
)
from app.storage import ResultStore
from app.utils.logger import get_logger, log_epoch_summary
from app.workload import sample_sequence

logger = get_logger("trainer")

__all__ = [
    "sequence_reward",
    "goal_metric",
    "EpisodeOptions",
    "Trajectory",
    "TrajectoryBatch",
    "PpoBatch",
    "UpdateResult",
    "EpochResult",
    "TrainResult",
    "PolicyScheduler",
    "compute_filter_range",
    "filter_range_from_samples",
    "collect_trajectories",
    "compute_advantages",
    "surrogate_objective",
    "ppo_update",
    "PPOTrainer",
    "train",
]

SEED_SPACE = 2 ** 32


@dataclass(frozen=True)
class EpisodeOptions:
    """How an episode environment is built."""

    goal: Goal = Goal.AVG_BSLD
    backfilling: bool = False
    max_obsv_size: int = MAX_OBSV_SIZE
    mask_non_runnable: bool = False
    user_feature: bool = False
    debug_checks: bool = False

    @classmethod
    def from_settings(cls, config: PpoConfig, environment: Optional[EnvironmentSection] = None) -> "EpisodeOptions":
        environment = environment or EnvironmentSection()
        return cls(
            goal=config.goal,
            backfilling=config.backfilling,
            max_obsv_size=environment.max_obsv_size,
            mask_non_runnable=environment.mask_non_runnable,
            user_feature=environment.user_feature,
            debug_checks=environment.debug_checks,
        )

    @property
    def job_features(self) -> int:
        return JOB_FEATURES + (1 if self.user_feature else 0)

    def make_env(self) -> SchedulingEnv:
        return SchedulingEnv(
            goal=self.goal,
            backfilling=self.backfilling,
            max_obsv_size=self.max_obsv_size,
            mask_non_runnable=self.mask_non_runnable,
            user_feature=self.user_feature,
            debug_checks=self.debug_checks,
        )


@dataclass
class Trajectory:
    """Decision record of one episode; only the last reward is nonzero."""

    observations: np.ndarray
    masks: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    metric: float
    digest: str = ""

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class TrajectoryBatch:
    trajectories: List[Trajectory]
    filter_capped: int = 0
    rejected: int = 0

    @property
    def metrics(self) -> np.ndarray:
        return np.array([t.metric for t in self.trajectories], dtype=np.float64)

    @property
    def steps(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def __len__(self) -> int:
        return len(self.trajectories)


@dataclass
class PpoBatch:
    """Flattened steps of a trajectory batch, ready for the update."""

    observations: np.ndarray
    masks: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class UpdateResult:
    policy: PolicyNet
    value_net: ValueNet
    policy_loss: float
    value_loss: float
    kl: float
    policy_iterations: int


@dataclass
class EpochResult:
    """Curve row of one epoch plus the networks that collected its batch."""

    row: CurveRow
    policy: PolicyNet
    value_net: ValueNet


@dataclass
class TrainResult:
    policy: PolicyNet
    value_net: ValueNet
    curve: LearningCurve
    best_policy: Optional[PolicyNet] = None
    best_metric: Optional[float] = None
    best_epoch: int = 0
    filter_range: Optional[FilterRange] = None


class PolicyScheduler:
    """Greedy (argmax) scheduler backed by a trained policy network."""

    def __init__(self, policy: PolicyNet, name: str = "policy", mask_non_runnable: bool = False):
        self.policy = policy
        self.name = name
        self.mask_non_runnable = mask_non_runnable
        self.user_feature = policy.job_features == JOB_FEATURES + 1

    def select(self, queue: Sequence[PendingJob], cluster: ClusterState) -> int:
        obs = build_observation(
            queue,
            cluster,
            cluster.now,
            max_obsv_size=self.policy.max_obsv_size,
            mask_non_runnable=self.mask_non_runnable,
            user_feature=self.user_feature,
        )
        return obs.queue_index(policy_argmax(policy_forward(self.policy, obs)))


def run_episode(
    policy: PolicyNet,
    value_net: ValueNet,
    sequence: JobSequence,
    options: EpisodeOptions,
    rng: np.random.Generator,
) -> Trajectory:
    """Schedule `sequence` with actions sampled from the policy."""
    env = options.make_env()
    obs = env.reset(sequence)
    observations, masks, actions, log_probs, rewards = [], [], [], [], []
    done = False
    while not done:
        probs = policy_forward(policy, obs)
        action = policy_sample(probs, rng)
        observations.append(obs.values)
        masks.append(obs.legal_mask)
        actions.append(action)
        log_probs.append(float(np.log(probs[action])))
        obs, reward, done = env.step(action)
        rewards.append(reward)

    stacked = np.stack(observations)
    values, _ = value_batch(value_net, stacked.reshape(len(stacked), -1))
    return Trajectory(
        observations=stacked,
        masks=np.stack(masks),
        actions=np.array(actions, dtype=np.int64),
        log_probs=np.array(log_probs),
        values=values,
        rewards=np.array(rewards, dtype=np.float64),
        metric=goal_metric(env.metrics(), options.goal),
        digest=sequence.digest(),
    )


def sjf_metric(sequence: JobSequence, goal: Goal) -> float:
    """Goal metric of `sequence` scheduled by SJF with backfilling."""
    metrics = run_with_scheduler(sequence, HeuristicScheduler(HeuristicKind.SJF), backfilling=True, goal=goal)
    return goal_metric(metrics, goal)


def sample_skewness(values: Sequence[float]) -> float:
    x = np.asarray(values, dtype=np.float64)
    centred = x - x.mean()
    m2 = float(np.mean(centred ** 2))
    if m2 == 0.0:
        return 0.0
    return float(np.mean(centred ** 3)) / m2 ** 1.5


def filter_range_from_samples(values: Sequence[float]) -> FilterRange:
    """(median, 2 * mean) of the sample values."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no samples to build a filter range from")
    return FilterRange(
        low=float(np.median(x)),
        high=float(2.0 * x.mean()),
        skewness=sample_skewness(x),
        samples=int(x.size),
    )


def compute_filter_range(
    trace: JobTrace,
    goal: Goal,
    n_samples: int,
    seed: int,
    sequence_length: int = 256,
) -> FilterRange:
    """Filter range from SJF (with backfilling) on `n_samples` random sequences."""
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    rng = np.random.default_rng(seed)
    values = [
        sjf_metric(sample_sequence(trace, sequence_length, int(rng.integers(SEED_SPACE))), goal)
        for _ in range(n_samples)
    ]
    result = filter_range_from_samples(values)
    logger.info(
        f"Filter range ({result.low:.3f}, {result.high:.3f}) from {n_samples} SJF samples, "
        f"skewness {result.skewness:.3f}"
    )
    if result.skewness is not None and result.skewness <= 0:
        logger.warning("metric distribution is not right-skewed, filtering is unlikely to help")
    return result


@dataclass(frozen=True)
class CollectionTask:
    """Work unit of one collection worker."""

    worker_id: int
    epoch: int
    count: int
    seed: int
    trace: JobTrace
    policy: PolicyNet
    value_net: ValueNet
    options: EpisodeOptions
    trajectory_len: int
    rejection_cap: int
    filter_range: Optional[FilterRange] = None


def _draw_sequence(task: CollectionTask, rng: np.random.Generator) -> Tuple[JobSequence, int, bool]:
    """Next training sequence; returns (sequence, rejections, hit the cap)."""
    rejected = 0
    while True:
        sequence = sample_sequence(task.trace, task.trajectory_len, int(rng.integers(SEED_SPACE)))
        if task.filter_range is None or task.filter_range.contains(sjf_metric(sequence, task.options.goal)):
            return sequence, rejected, False
        rejected += 1
        if rejected >= task.rejection_cap:
            return sequence, rejected, True


def _collect_worker(task: CollectionTask) -> TrajectoryBatch:
    rng = np.random.default_rng([task.seed ^ task.worker_id, task.epoch])
    batch = TrajectoryBatch(trajectories=[])
    for _ in range(task.count):
        sequence, rejected, capped = _draw_sequence(task, rng)
        batch.rejected += rejected
        batch.filter_capped += int(capped)
        batch.trajectories.append(run_episode(task.policy, task.value_net, sequence, task.options, rng))
    return batch


def _split(total: int, workers: int) -> List[int]:
    base, rest = divmod(total, workers)
    return [base + (1 if i < rest else 0) for i in range(workers)]


def collect_trajectories(
    trace: JobTrace,
    policy: PolicyNet,
    value_net: ValueNet,
    config: PpoConfig,
    options: EpisodeOptions,
    epoch: int,
    filter_range: Optional[FilterRange] = None,
) -> TrajectoryBatch:
    """One epoch of episodes, merged in worker order.

    With a filter range, sequences whose SJF metric falls outside it are
    redrawn up to `rejection_cap` times per slot; a slot that hits the cap
    keeps its last draw and is counted in `filter_capped`.
    """
    workers = min(config.workers, config.trajectories_per_epoch)
    tasks = [
        CollectionTask(
            worker_id=worker_id,
            epoch=epoch,
            count=count,
            seed=config.seed,
            trace=trace,
            policy=policy,
            value_net=value_net,
            options=options,
            trajectory_len=config.trajectory_len,
            rejection_cap=config.rejection_cap,
            filter_range=filter_range,
        )
        for worker_id, count in enumerate(_split(config.trajectories_per_epoch, workers))
    ]

    if workers == 1:
        parts = [_collect_worker(tasks[0])]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_collect_worker, tasks))

    merged = TrajectoryBatch(trajectories=[])
    for part in parts:
        merged.trajectories.extend(part.trajectories)
        merged.filter_capped += part.filter_capped
        merged.rejected += part.rejected
    if merged.filter_capped:
        logger.warning(f"epoch {epoch}: {merged.filter_capped} sequences accepted after hitting the rejection cap")
    return merged


def discount_cumsum(x: np.ndarray, discount: float) -> np.ndarray:
    out = np.zeros(len(x), dtype=np.float64)
    running = 0.0
    for t in range(len(x) - 1, -1, -1):
        running = x[t] + discount * running
        out[t] = running
    return out


def compute_advantages(
    trajectories: Sequence[Trajectory],
    gamma: float,
    lam: float,
    value_net: Optional[ValueNet] = None,
    normalize: bool = True,
) -> Tuple[np.ndarray, np.ndarray]:
    """GAE advantages and reward-to-go returns, concatenated over trajectories.

    Episodes end in a terminal state, so the value after the last step is 0.
    Values recorded at collection time are used unless `value_net` is given.
    """
    advantages, returns = [], []
    for traj in trajectories:
        if value_net is not None:
            values, _ = value_batch(value_net, traj.observations.reshape(len(traj), -1))
        else:
            values = traj.values
        next_values = np.append(values[1:], 0.0)
        deltas = traj.rewards + gamma * next_values - values
        advantages.append(discount_cumsum(deltas, gamma * lam))
        returns.append(discount_cumsum(traj.rewards, gamma))

    adv = np.concatenate(advantages) if advantages else np.zeros(0)
    ret = np.concatenate(returns) if returns else np.zeros(0)
    if normalize and adv.size:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, ret


def build_ppo_batch(batch: TrajectoryBatch, gamma: float, lam: float, normalize: bool = True) -> PpoBatch:
    advantages, returns = compute_advantages(batch.trajectories, gamma, lam, normalize=normalize)
    trajectories = batch.trajectories
    return PpoBatch(
        observations=np.concatenate([t.observations for t in trajectories]),
        masks=np.concatenate([t.masks for t in trajectories]),
        actions=np.concatenate([t.actions for t in trajectories]),
        log_probs=np.concatenate([t.log_probs for t in trajectories]),
        advantages=advantages,
        returns=returns,
    )


def surrogate_objective(
    log_probs: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    clip_ratio: float,
) -> Tuple[float, np.ndarray]:
    """Mean clipped surrogate and its gradient with respect to each log-probability.

    Steps where the clipped term is the minimum contribute no gradient.
    """
    ratio = np.exp(log_probs - old_log_probs)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio) * advantages
    objective = float(np.minimum(unclipped, clipped).mean())
    active = unclipped <= clipped
    grad = np.where(active, unclipped, 0.0) / len(ratio)
    return objective, grad


def ppo_update(
    policy: PolicyNet,
    value_net: ValueNet,
    batch: PpoBatch,
    config: PpoConfig,
    policy_optimizer: Optional[Adam] = None,
    value_optimizer: Optional[Adam] = None,
) -> UpdateResult:
    """Clipped-surrogate policy steps (with KL early stop), then value regression steps.

    Reported losses are the ones measured before the first step.

    Raises:
        TrainingDiverged: a loss or a parameter became non-finite
    """
    policy_optimizer = policy_optimizer or Adam(policy.num_params, config.learning_rate)
    value_optimizer = value_optimizer or Adam(value_net.num_params, config.learning_rate)

    theta = policy.params.flat()
    policy_loss = float("nan")
    kl = 0.0
    iterations = 0
    for i in range(config.update_iterations):
        log_probs, cache = policy_log_probs(policy, batch.observations, batch.masks, batch.actions)
        kl = float(np.mean(batch.log_probs - log_probs))
        if kl > config.target_kl:
            logger.debug(f"early stop after {i} policy steps (kl {kl:.4f})")
            break
        objective, grad_logp = surrogate_objective(log_probs, batch.log_probs, batch.advantages, config.clip_ratio)
        if not np.isfinite(objective):
            raise TrainingDiverged("policy update: non-finite surrogate")
        if i == 0:
            policy_loss = -objective
        grad = policy_log_prob_backward(policy, cache, -grad_logp).flat()
        theta = policy_optimizer.step(theta, grad)
        if not np.isfinite(theta).all():
            raise TrainingDiverged("policy update: non-finite parameters")
        policy = policy.with_params(policy.params.with_flat(theta))
        iterations += 1

    flat_obs = batch.observations.reshape(len(batch), -1)
    phi = value_net.params.flat()
    value_loss = float("nan")
    for i in range(config.update_iterations):
        values, layers = value_batch(value_net, flat_obs)
        err = values - batch.returns
        loss = float(np.mean(err ** 2))
        if not np.isfinite(loss):
            raise TrainingDiverged("value update: non-finite loss")
        if i == 0:
            value_loss = loss
        grad = value_batch_backward(value_net, layers, 2.0 * err / len(err)).flat()
        phi = value_optimizer.step(phi, grad)
        if not np.isfinite(phi).all():
            raise TrainingDiverged("value update: non-finite parameters")
        value_net = value_net.with_params(value_net.params.with_flat(phi))

    if np.isnan(policy_loss):
        policy_loss = 0.0
    return UpdateResult(policy, value_net, policy_loss, value_loss, kl, iterations)


class PPOTrainer:
    """Epoch loop: collect, estimate advantages, update, checkpoint."""

    def __init__(
        self,
        trace: JobTrace,
        config: PpoConfig,
        environment: Optional[EnvironmentSection] = None,
        store: Optional[ResultStore] = None,
        manifest: Optional[Mapping[str, object]] = None,
    ):
        if config.goal.needs_users and not trace.has_users:
            raise MissingUserInfo(f"goal {config.goal.value} needs user ids, {trace.source_name} has none")

        self.trace = trace
        self.config = config
        self.options = EpisodeOptions.from_settings(config, environment)
        self.store = store
        self.manifest = dict(manifest or {})
        self.logger = get_logger("trainer")

        features = self.options.job_features
        self.policy = PolicyNet.create(config.seed, job_features=features, max_obsv_size=self.options.max_obsv_size)
        self.value_net = ValueNet.create(config.seed + 1, job_features=features,
                                         max_obsv_size=self.options.max_obsv_size)
        self.policy_optimizer = Adam(self.policy.num_params, config.learning_rate)
        self.value_optimizer = Adam(self.value_net.num_params, config.learning_rate)

        self.curve = LearningCurve()
        self.filter_range: Optional[FilterRange] = None
        self.best_policy: Optional[PolicyNet] = None
        self.best_metric: Optional[float] = None
        self.best_epoch = 0
        self.stats: Dict[str, int] = {
            "epochs_completed": 0,
            "epochs_diverged": 0,
            "episodes": 0,
            "decisions": 0,
            "filter_capped": 0,
        }

    def prepare_filter(self) -> Optional[FilterRange]:
        if self.config.filtering and self.config.step1_epochs > 0 and self.filter_range is None:
            self.filter_range = compute_filter_range(
                self.trace,
                self.config.goal,
                self.config.filter_samples,
                self.config.seed,
                sequence_length=self.config.trajectory_len,
            )
        return self.filter_range

    def run_epoch(self, epoch: int) -> EpochResult:
        """One epoch; optimizer state is rolled back if the update diverges.

        The row's metric belongs to the networks in place before the update,
        which are returned with it.
        """
        start = time.perf_counter()
        phase_one = self.filter_range is not None and epoch <= self.config.step1_epochs
        collector, collector_value = self.policy, self.value_net
        batch = collect_trajectories(
            self.trace,
            collector,
            collector_value,
            self.config,
            self.options,
            epoch,
            filter_range=self.filter_range if phase_one else None,
        )
        ppo_batch = build_ppo_batch(batch, self.config.gamma, self.config.gae_lambda)

        saved = (self.policy_optimizer.state(), self.value_optimizer.state())
        try:
            result = ppo_update(
                self.policy, self.value_net, ppo_batch, self.config, self.policy_optimizer, self.value_optimizer
            )
        except TrainingDiverged:
            self.policy_optimizer.restore(saved[0])
            self.value_optimizer.restore(saved[1])
            raise

        self.policy, self.value_net = result.policy, result.value_net
        metrics = batch.metrics
        row = CurveRow(
            epoch=epoch,
            mean_metric=float(metrics.mean()),
            std_metric=float(metrics.std()),
            policy_loss=result.policy_loss,
            value_loss=result.value_loss,
            seconds=time.perf_counter() - start,
            filter_capped=batch.filter_capped,
        )
        self.stats["episodes"] += len(batch)
        self.stats["decisions"] += batch.steps
        self.stats["filter_capped"] += batch.filter_capped
        return EpochResult(row, collector, collector_value)

    def _record(self, outcome: EpochResult) -> None:
        row = outcome.row
        self.curve.rows.append(row)
        self.stats["epochs_completed"] += 1
        log_epoch_summary(row.epoch, row.mean_metric, row.policy_loss, row.value_loss, row.seconds)

        improved = self.best_metric is None or is_better(row.mean_metric, self.best_metric, self.config.goal)
        if improved:
            self.best_metric = row.mean_metric
            self.best_epoch = row.epoch
            self.best_policy = outcome.policy

        if self.store is not None:
            self.store.append_curve_row(row)
            if improved:
                self.store.save_checkpoint("best", outcome.policy, outcome.value_net, self._checkpoint_manifest(row))

    def _checkpoint_manifest(self, row: CurveRow) -> Dict[str, object]:
        return {
            **self.manifest,
            "goal": self.config.goal.value,
            "trace": self.trace.source_name,
            "epoch": row.epoch,
            "mean_metric": row.mean_metric,
        }

    def train(self) -> TrainResult:
        """Run every configured epoch.

        Raises:
            TrainingDiverged: `max_diverged_epochs` consecutive epochs diverged
        """
        self.prepare_filter()
        if self.store is not None:
            self.store.start_curve()

        consecutive = 0
        for epoch in range(1, self.config.epochs + 1):
            try:
                outcome = self.run_epoch(epoch)
            except TrainingDiverged as e:
                consecutive += 1
                self.stats["epochs_diverged"] += 1
                self.logger.warning(f"epoch {epoch} aborted: {e}")
                if consecutive >= self.config.max_diverged_epochs:
                    raise TrainingDiverged(f"{consecutive} consecutive epochs diverged, last: {e}") from e
                continue
            consecutive = 0
            self._record(outcome)

        if self.store is not None:
            last = self.curve.rows[-1] if self.curve.rows else None
            fields = {**self.manifest, "goal": self.config.goal.value, "trace": self.trace.source_name,
                      "epoch": last.epoch if last else 0}
            self.store.save_checkpoint("final", self.policy, self.value_net, fields)

        return TrainResult(
            policy=self.policy,
            value_net=self.value_net,
            curve=self.curve,
            best_policy=self.best_policy,
            best_metric=self.best_metric,
            best_epoch=self.best_epoch,
            filter_range=self.filter_range,
        )

    def get_stats(self) -> Dict[str, int]:
        return dict(self.stats)


def train(
    trace: JobTrace,
    config: PpoConfig,
    environment: Optional[EnvironmentSection] = None,
    store: Optional[ResultStore] = None,
) -> Tuple[PolicyNet, ValueNet, LearningCurve]:
    """Train a policy on `trace`; returns the final networks and the learning curve."""
    result = PPOTrainer(trace, config, environment, store).train()
    return result.policy, result.value_net, result.curve
