"""Core data types shared across the engine, plus the reported metrics.

Everything here is a plain value object: safe to copy between contexts,
mutated only by the single-writer module that owns it.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field


class RequestState(enum.Enum):
    UNROUTED = "unrouted"
    PENDING = "pending"
    EXECUTING = "executing"
    COMPLETE = "complete"
    MIGRATING = "migrating"


class InstanceStatus(enum.Enum):
    PROVISIONING = "provisioning"
    PULLING_WEIGHTS = "pulling_weights"
    ACTIVE = "active"
    PREEMPTED = "preempted"


@dataclass
class RouteLeg:
    """One hop in a request's routing history."""

    instance_id: str
    tokens: int = 0


@dataclass
class RolloutRequest:
    """One prompt's generation job with token-granular progress.

    ``target_len`` is assigned by the simulator and hidden from the
    scheduler; ``generated`` is append-only and its length always equals
    the sum of tokens over ``route_history``.
    """

    request_id: str
    prompt_len: int
    target_len: int
    group_id: str
    generated: list[int] = field(default_factory=list)
    state: RequestState = RequestState.UNROUTED
    migrating_from: str | None = None
    route_history: list[RouteLeg] = field(default_factory=list)

    def append_tokens(self, instance_id: str, tokens: list[int]) -> None:
        if not self.route_history or self.route_history[-1].instance_id != instance_id:
            raise ValueError(
                f"{self.request_id}: token stream from {instance_id} does not match "
                f"current route leg"
            )
        self.generated.extend(tokens)
        self.route_history[-1].tokens += len(tokens)

    @property
    def context_len(self) -> int:
        return self.prompt_len + len(self.generated)

    def routed_tokens(self) -> int:
        return sum(leg.tokens for leg in self.route_history)


@dataclass
class InstanceRecord:
    """A rollout instance's liveness, weight version and queue depths."""

    instance_id: str
    gpu_count: int
    status: InstanceStatus = InstanceStatus.PROVISIONING
    weight_version: int = 0
    m_pending: int = 0
    m_exec: int = 0
    cumulative_busy_time: float = 0.0
    joined_at: float = 0.0
    preempted_at: float | None = None

    def set_weight_version(self, version: int) -> None:
        if version < self.weight_version:
            raise ValueError(
                f"{self.instance_id}: weight version {version} < {self.weight_version}"
            )
        self.weight_version = version


@dataclass
class StepSchedule:
    """Control variables driving one step: seeding window and instance cap.

    ``n_prem_cap`` is kept unrounded; admission applies floor().  ``memory``
    maps an instance count to the seeding window last optimized under it.
    """

    t_seed: float
    n_prem_cap: float
    n_resv: int
    eta: float
    memory: dict[int, float] = field(default_factory=dict)


@dataclass
class StepStats:
    """Per-step timing observations feeding the adaptive scheduler."""

    step_index: int
    t_wait_train: float
    t_wait_remote: float
    t_train: float
    t_remote: float
    n_bar_prem: float
    n_hat_prem: int
    tokens_generated: int
    tokens_trained: int
    step_duration: float

    FIELDS = (
        "step_index", "t_wait_train", "t_wait_remote", "t_train", "t_remote",
        "n_bar_prem", "n_hat_prem", "tokens_generated", "tokens_trained",
        "step_duration",
    )


@dataclass
class ProfileEntry:
    batch_size: int
    decode_throughput: float


@dataclass
class ProfileTable:
    """Online-captured batch-size -> decode-throughput curve.

    ``context_calibration`` records the mean context length at capture time
    so observations can be rescaled to the current context.
    """

    entries: list[ProfileEntry] = field(default_factory=list)
    context_calibration: float = 0.0

    def distinct_batch_sizes(self) -> int:
        return len({e.batch_size for e in self.entries})


@dataclass
class CostModel:
    """Hourly instance pricing (public-cloud H100 averages by default)."""

    reserved_rate: float = 83.79
    preemptible_rate: float = 5.32
    reserved_node_count: int = 1


@dataclass
class ThroughputReport:
    """Step throughput under both accounting conventions.

    ``combined`` counts generated and trained tokens separately (raw sum);
    ``trained`` counts each token once.  Tests and reports pin ``trained``.
    """

    combined: float
    trained: float


def compute_throughput(stats: StepStats) -> ThroughputReport:
    """Effective training throughput of one step, tokens/sec."""
    if stats.step_duration <= 0:
        raise ValueError("empty step")
    return ThroughputReport(
        combined=(stats.tokens_generated + stats.tokens_trained) / stats.step_duration,
        trained=stats.tokens_trained / stats.step_duration,
    )


def preemptible_instance_seconds(
    instance_activity: list[tuple[str, float, float]],
) -> float:
    """Total preemptible instance-seconds from (id, start, end) intervals.

    Intervals run from allocation through preemption or shutdown; weight-pull
    time is included (billing starts at allocation).
    """
    total = 0.0
    for instance_id, start, end in instance_activity:
        if end < start:
            raise ValueError(f"negative interval for {instance_id}: [{start}, {end}]")
        total += end - start
    return total


def compute_cost_dollars(
    timeline: list[StepStats],
    instance_activity: list[tuple[str, float, float]],
    cost: CostModel,
) -> float:
    """Total dollars spent over an experiment window."""
    wall_hours = sum(s.step_duration for s in timeline) / 3600.0
    preempt_hours = preemptible_instance_seconds(instance_activity) / 3600.0
    return (
        cost.reserved_rate * cost.reserved_node_count * wall_hours
        + cost.preemptible_rate * preempt_hours
    )


def compute_cost_efficiency(
    timeline: list[StepStats],
    instance_activity: list[tuple[str, float, float]],
    cost: CostModel,
) -> float:
    """Trained tokens per dollar over the experiment."""
    tokens = sum(s.tokens_trained for s in timeline)
    dollars = compute_cost_dollars(timeline, instance_activity, cost)
    if dollars <= 0:
        raise ValueError("zero-cost experiment window")
    return tokens / dollars


def check_finite(**values: float) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise ValueError(f"corrupt stats: {name}={value!r}")
