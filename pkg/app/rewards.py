"""Goal metrics and episode rewards."""

from app.exceptions import MissingUserInfo
from app.models import UNKNOWN_USER, Goal, ScheduleMetrics


def goal_metric(metrics: ScheduleMetrics, goal: Goal) -> float:
    """The metric a goal optimises, in its natural units (lower is better except utilization)."""
    if goal is Goal.AVG_BSLD:
        return metrics.avg_bounded_slowdown
    if goal is Goal.AVG_SLD:
        return metrics.avg_slowdown
    if goal is Goal.AVG_WAIT:
        return metrics.avg_wait
    if goal is Goal.AVG_TURNAROUND:
        return metrics.avg_turnaround
    if goal is Goal.UTILIZATION:
        return metrics.utilization

    if not metrics.per_user_avg_bsld or UNKNOWN_USER in metrics.per_user_avg_bsld:
        raise MissingUserInfo(f"goal {goal.value} needs user ids on every job")
    if goal is Goal.FAIR_MAX_USER_BSLD:
        return metrics.max_user_bsld
    return metrics.mean_user_bsld


def sequence_reward(metrics: ScheduleMetrics, goal: Goal) -> float:
    """Terminal reward of an episode: +utilization, otherwise the negated metric."""
    value = goal_metric(metrics, goal)
    return value if goal.maximize else -value


def is_better(candidate: float, incumbent: float, goal: Goal) -> bool:
    return candidate > incumbent if goal.maximize else candidate < incumbent
