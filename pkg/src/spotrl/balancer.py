"""Two-phase load balancer.

Initial placement joins the shortest pending queue with delayed dispatch
(no instance accumulates more than theta pending requests); a continuous
rebalancer migrates pending requests one at a time toward empty queues and,
once all queues are drained, peels executing requests above the batching
plateau off the most loaded instance onto idle ones.

All functions here are pure decisions over a registry snapshot; the rollout
manager serializes snapshot -> decision -> apply.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Sequence

from .domain import ProfileTable


class NoActiveInstancesError(RuntimeError):
    pass


class ProfileNotReadyError(RuntimeError):
    pass


class _MustWait:
    """Sentinel: every instance is at the pending threshold; hold the request
    until any in-flight request completes, then retry."""

    def __repr__(self) -> str:  # pragma: no cover
        return "MUST_WAIT"


MUST_WAIT = _MustWait()


class MigrationKind(enum.Enum):
    PENDING = "pending"
    EXECUTING = "executing"


@dataclass(frozen=True)
class InstanceLoad:
    """Load snapshot of one serving instance.

    ``pending`` lists request ids in routing order; ``executing`` pairs each
    request id with its generated-token count (used to pick cheap migrants).
    """

    instance_id: str
    pending: tuple[str, ...] = ()
    executing: tuple[tuple[str, int], ...] = ()

    @property
    def m_pending(self) -> int:
        return len(self.pending)

    @property
    def m_exec(self) -> int:
        return len(self.executing)


@dataclass(frozen=True)
class MigrationOrder:
    request_ids: tuple[str, ...]
    from_instance: str
    to_instance: str
    kind: MigrationKind

    def __post_init__(self) -> None:
        if not self.request_ids:
            raise ValueError("empty migration order")
        if self.from_instance == self.to_instance:
            raise ValueError(f"self-migration on {self.from_instance}")


def select_instance(
    registry: Sequence[InstanceLoad], theta: int
) -> str | _MustWait:
    """Shortest-pending-queue choice among instances below theta.

    Ties break on the lowest instance id for reproducibility.
    """
    if not registry:
        raise NoActiveInstancesError("no active instances")
    if not any(load.m_pending < theta for load in registry):
        return MUST_WAIT
    best = min(registry, key=lambda load: (load.m_pending, load.instance_id))
    return best.instance_id


def estimate_plateau(
    profile: ProfileTable,
    current_mean_context: float,
    *,
    epsilon: float = 0.05,
    context_factor: Callable[[float], float] | None = None,
) -> int:
    """Batch size where decode throughput stops improving meaningfully.

    Observations are rescaled from their capture-time context to the current
    one, then scanned in batch-size order for the first marginal gain below
    ``epsilon`` (relative).  A strictly improving profile yields the largest
    observed batch.
    """
    if profile.distinct_batch_sizes() < 2:
        raise ProfileNotReadyError("profile not ready")
    scale = 1.0
    if context_factor is not None and profile.context_calibration > 0:
        captured = context_factor(profile.context_calibration)
        if captured > 0:
            scale = context_factor(current_mean_context) / captured

    by_batch: dict[int, list[float]] = {}
    for entry in profile.entries:
        by_batch.setdefault(entry.batch_size, []).append(entry.decode_throughput * scale)
    curve = sorted((b, sum(v) / len(v)) for b, v in by_batch.items())
    for (b, thr), (_, thr_next) in zip(curve, curve[1:]):
        if thr <= 0:
            continue
        if (thr_next - thr) / thr < epsilon:
            return b
    return curve[-1][0]


def lb_tick(
    registry: Sequence[InstanceLoad],
    profile: ProfileTable,
    current_mean_context: float,
    *,
    epsilon: float = 0.05,
    context_factor: Callable[[float], float] | None = None,
) -> list[MigrationOrder]:
    """One rebalancer pass; at most one branch fires, yielding 0 or 1 orders.

    Pending branch: move the oldest pending request from the most loaded
    instance to one with an empty queue.  Executing branch (all queues
    drained): move the requests above the batching plateau, cheapest
    prefixes first, from the most loaded instance to an idle one.  Until
    the profile is established the executing branch is skipped.
    """
    if not registry:
        return []
    drained = [load for load in registry if load.m_pending == 0]
    backlogged = [load for load in registry if load.m_pending > 0]
    if drained and backlogged:
        target = min(drained, key=lambda load: load.instance_id)
        source = min(backlogged, key=lambda load: (-load.m_pending, load.instance_id))
        return [
            MigrationOrder(
                request_ids=(source.pending[0],),
                from_instance=source.instance_id,
                to_instance=target.instance_id,
                kind=MigrationKind.PENDING,
            )
        ]

    idle = [load for load in registry if load.m_exec == 0]
    if idle:
        source = min(registry, key=lambda load: (-load.m_exec, load.instance_id))
        if source.m_exec == 0:
            return []
        try:
            plateau = estimate_plateau(
                profile, current_mean_context,
                epsilon=epsilon, context_factor=context_factor,
            )
        except ProfileNotReadyError:
            return []
        count = max(source.m_exec - plateau, 0)
        if count == 0:
            return []
        target = min(idle, key=lambda load: load.instance_id)
        movers = sorted(source.executing, key=lambda item: (item[1], item[0]))[:count]
        return [
            MigrationOrder(
                request_ids=tuple(req_id for req_id, _ in movers),
                from_instance=source.instance_id,
                to_instance=target.instance_id,
                kind=MigrationKind.EXECUTING,
            )
        ]
    return []
