"""Adaptive seeding scheduler.

Tunes the seeding window from per-step feedback (training-cluster idle vs
remote idle), caps the preemptible instance count so rollout never outruns
training, and memoizes the converged window per observed instance count.
"""
from __future__ import annotations

import logging
import math
from dataclasses import replace

from .domain import StepSchedule, StepStats, check_finite

logger = logging.getLogger(__name__)

# Guard against division blow-up when a step trained almost nothing.
EPS_TRAIN_TIME = 1e-3
# n_bar is a time-average; any churn during the step makes it fractional.
N_MATCH_TOL = 1e-6


def initial_schedule(n_resv: int, eta: float, t_init: float) -> StepSchedule:
    """Step-1 schedule: seed for t_init, allow as many remotes as local engines."""
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    return StepSchedule(t_seed=t_init, n_prem_cap=float(n_resv), n_resv=n_resv, eta=eta)


def update_seed_window(schedule: StepSchedule, stats: StepStats) -> float:
    """New seeding window from the idle-time imbalance, clamped at zero."""
    if schedule.eta <= 0:
        raise ValueError(f"eta must be positive, got {schedule.eta}")
    check_finite(t_wait_train=stats.t_wait_train, t_wait_remote=stats.t_wait_remote)
    delta = (stats.t_wait_train - stats.t_wait_remote) / schedule.eta
    return max(0.0, schedule.t_seed + delta)


def update_instance_cap(schedule: StepSchedule, stats: StepStats) -> float:
    """Remote-instance cap: instances needed for rollout to fit under t_train.

    Uses the seeding window that was in effect during the measured step, so
    the numerator reflects the workload actually observed.
    """
    check_finite(t_remote=stats.t_remote, n_bar_prem=stats.n_bar_prem, t_train=stats.t_train)
    if stats.t_train <= EPS_TRAIN_TIME:
        logger.warning(
            "step %d: t_train=%.6fs too small for cap update, keeping %.3f",
            stats.step_index, stats.t_train, schedule.n_prem_cap,
        )
        return schedule.n_prem_cap
    workload = stats.t_remote * stats.n_bar_prem + schedule.t_seed * schedule.n_resv
    return workload / stats.t_train


def memory_commit(
    schedule: StepSchedule, stats: StepStats, t_seed_used: float
) -> dict[int, float]:
    """Memorize the window iff no instance change occurred during the step."""
    memory = dict(schedule.memory)
    if abs(stats.n_bar_prem - stats.n_hat_prem) < N_MATCH_TOL:
        memory[stats.n_hat_prem] = t_seed_used
    return memory


def memory_retrieve(schedule: StepSchedule, n_hat_prem: int) -> float | None:
    """Latest window optimized under n_hat_prem instances, if any."""
    return schedule.memory.get(n_hat_prem)


def plan_step(
    schedule: StepSchedule, last_stats: StepStats | None, *, memory_enabled: bool = True
) -> StepSchedule:
    """Schedule for the next step.

    Applies the window update, the cap update, the memory commit and the
    memory retrieve, in that order.  Pure: same inputs give the same output.
    """
    if last_stats is None:
        return replace(schedule, memory=dict(schedule.memory))
    t_seed = update_seed_window(schedule, last_stats)
    n_prem_cap = update_instance_cap(schedule, last_stats)
    if not memory_enabled:
        return replace(schedule, t_seed=t_seed, n_prem_cap=n_prem_cap, memory={})
    memory = memory_commit(schedule, last_stats, t_seed)
    retrieved = memory.get(last_stats.n_hat_prem)
    if retrieved is not None:
        t_seed = retrieved
    return replace(schedule, t_seed=t_seed, n_prem_cap=n_prem_cap, memory=memory)


def estimate_t_init(expected_tokens: float, aggregate_rate: float) -> float:
    """Default initial window: a quarter of the estimated pure-local rollout time."""
    if aggregate_rate <= 0 or not math.isfinite(expected_tokens):
        return 30.0
    return 0.25 * expected_tokens / aggregate_rate
