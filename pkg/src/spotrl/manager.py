"""Rollout manager: the coordination hub.

Owns the instance registry, weight-version gating, every request's
token-granular progress and routing history, preemption handling, and
dynamic microbatch assembly.  Logically a single-writer event loop: the
caller (live server or simulator) funnels all mutations through these
methods in timestamp order.
"""
from __future__ import annotations

import enum
import logging
import math
from collections import deque
from dataclasses import dataclass, field

from . import balancer
from .balancer import MUST_WAIT, InstanceLoad
from .domain import (
    InstanceRecord,
    InstanceStatus,
    RequestState,
    RolloutRequest,
    RouteLeg,
    StepStats,
)
from .events import EventLog

logger = logging.getLogger(__name__)


class ManagerError(RuntimeError):
    pass


class GatingViolation(ManagerError):
    """A token reached the manager from a stale-weight instance."""


class RegistrationResult(enum.Enum):
    ACCEPTED = "accepted"
    REJECTED_CAP_FULL = "rejected_cap_full"


@dataclass
class Microbatch:
    responses: list[RolloutRequest]
    token_count: int
    sealed_at: float


@dataclass
class StepBatch:
    """One step's worth of rollout requests and their progress bitmap.

    The step ends only when every request is Complete and trained.
    """

    prompt_count: int
    group_size: int
    requests: list[RolloutRequest] = field(default_factory=list)
    completion_bitmap: dict[str, bool] = field(default_factory=dict)
    trained_bitmap: dict[str, bool] = field(default_factory=dict)

    def add(self, request: RolloutRequest) -> None:
        self.requests.append(request)
        self.completion_bitmap[request.request_id] = False
        self.trained_bitmap[request.request_id] = False

    def all_complete(self) -> bool:
        return all(self.completion_bitmap.values())

    def all_trained(self) -> bool:
        return all(self.trained_bitmap.values())


@dataclass
class StepAccounting:
    """Timing measurements the clock owner hands to ``record_step``."""

    step_index: int
    step_start: float
    step_end: float
    t_wait_train: float
    t_train: float
    remote_busy_total: float
    n_bar_prem: float
    n_hat_prem: int
    remote_idle_tails: list[float] = field(default_factory=list)


class RolloutManager:
    def __init__(
        self,
        *,
        theta: int,
        m_b: int,
        log: EventLog,
        migration: str = "migrate",
    ):
        self.theta = theta
        self.m_b = m_b
        self.log = log
        self.migration = migration
        self.records: dict[str, InstanceRecord] = {}
        self.local_ids: list[str] = []
        self.requests: dict[str, RolloutRequest] = {}
        self.request_seq: dict[str, int] = {}
        self._next_seq = 0
        self.owner: dict[str, str] = {}
        self.pending_queues: dict[str, list[str]] = {}
        self.executing_sets: dict[str, list[str]] = {}
        self.held: deque[str] = deque()
        self.global_version = 0
        self.n_prem_cap = 0.0
        # per-step state
        self.step_batch = StepBatch(prompt_count=0, group_size=0)
        self.mb_buffer: list[str] = []
        self.sealed_count = 0
        self.tokens_trained = 0

    # -- registry ---------------------------------------------------------

    def alive_remote_ids(self) -> list[str]:
        return [
            rid for rid, rec in self.records.items()
            if rec.status is not InstanceStatus.PREEMPTED
        ]

    def register_instance(
        self, instance_id: str, gpu_count: int, now: float
    ) -> RegistrationResult:
        existing = self.records.get(instance_id)
        if existing is not None and existing.status is not InstanceStatus.PREEMPTED:
            raise ManagerError(f"duplicate registration for {instance_id}")
        if len(self.alive_remote_ids()) >= math.floor(self.n_prem_cap):
            self.log.emit(now, "instance_rejected", instance_id=instance_id)
            return RegistrationResult.REJECTED_CAP_FULL
        self.records[instance_id] = InstanceRecord(
            instance_id=instance_id, gpu_count=gpu_count, joined_at=now,
        )
        self.pending_queues[instance_id] = []
        self.executing_sets[instance_id] = []
        self.log.emit(now, "instance_registered", instance_id=instance_id)
        return RegistrationResult.ACCEPTED

    def mark_pulling(self, instance_id: str, now: float) -> None:
        self.records[instance_id].status = InstanceStatus.PULLING_WEIGHTS

    def mark_active(self, instance_id: str, version: int, now: float) -> None:
        record = self.records[instance_id]
        record.set_weight_version(version)
        record.status = InstanceStatus.ACTIVE
        self.log.emit(now, "instance_active", instance_id=instance_id, version=version)

    def set_local_engines(self, ids: list[str]) -> None:
        self.local_ids = list(ids)
        for local_id in ids:
            self.pending_queues.setdefault(local_id, [])
            self.executing_sets.setdefault(local_id, [])

    def clear_local_engines(self) -> None:
        for local_id in self.local_ids:
            if self.pending_queues.get(local_id) or self.executing_sets.get(local_id):
                raise ManagerError(f"{local_id} still owns requests at seeding end")
        self.local_ids = []

    # -- requests ---------------------------------------------------------

    def create_request(
        self, request_id: str, prompt_len: int, target_len: int, group_id: str,
        now: float,
    ) -> RolloutRequest:
        if request_id in self.requests:
            raise ManagerError(f"duplicate request {request_id}")
        request = RolloutRequest(
            request_id=request_id, prompt_len=prompt_len,
            target_len=target_len, group_id=group_id,
        )
        self.requests[request_id] = request
        self.request_seq[request_id] = self._next_seq
        self._next_seq += 1
        self.step_batch.add(request)
        self.held.append(request_id)
        self.log.emit(
            now, "request_created", request_id=request_id, prompt_len=prompt_len,
            target_len=target_len, group_id=group_id,
        )
        return request

    def serving_ids(self) -> list[str]:
        """Instances that may receive requests right now: the local engines
        while seeding, plus remotes that are Active on the current weights."""
        eligible = list(self.local_ids)
        for rid in self.alive_remote_ids():
            record = self.records[rid]
            if (
                record.status is InstanceStatus.ACTIVE
                and record.weight_version == self.global_version
            ):
                eligible.append(rid)
        return eligible

    def _loads(self, ids: list[str]) -> list[InstanceLoad]:
        return [
            InstanceLoad(
                instance_id=rid,
                pending=tuple(self.pending_queues[rid]),
                executing=tuple(
                    (req_id, len(self.requests[req_id].generated))
                    for req_id in self.executing_sets[rid]
                ),
            )
            for rid in ids
        ]

    def lb_view(self) -> list[InstanceLoad]:
        """Snapshot of serving remotes for the continuous balancer."""
        remote = [rid for rid in self.serving_ids() if rid not in self.local_ids]
        return self._loads(remote)

    def dispatch(self, now: float) -> list[tuple[str, str]]:
        """Route held requests while some instance is below theta.

        Returns (request_id, instance_id) assignments in routing order; stops
        at MustWait (retried after the next completion or activation).
        """
        routed = []
        while self.held:
            serving = self.serving_ids()
            if not serving:
                break
            choice = balancer.select_instance(self._loads(serving), self.theta)
            if choice is MUST_WAIT:
                break
            request_id = self.held.popleft()
            self._route(request_id, choice, now)
            routed.append((request_id, choice))
        return routed

    def _route(self, request_id: str, instance_id: str, now: float) -> None:
        request = self.requests[request_id]
        if request.state not in (RequestState.UNROUTED, RequestState.MIGRATING):
            raise ManagerError(f"cannot route {request_id} in state {request.state}")
        if request_id in self.owner:
            raise ManagerError(f"{request_id} already owned by {self.owner[request_id]}")
        request.state = RequestState.PENDING
        request.migrating_from = None
        request.route_history.append(RouteLeg(instance_id=instance_id))
        self.owner[request_id] = instance_id
        self.pending_queues[instance_id].append(request_id)
        self._record(instance_id).m_pending += 1
        self.log.emit(
            now, "route", request_id=request_id, instance_id=instance_id,
            prefix_len=len(request.generated),
        )

    def route_to(self, request_id: str, instance_id: str, now: float) -> None:
        """Directed placement used when applying a migration order."""
        self._route(request_id, instance_id, now)

    def hold(self, request_id: str, *, front: bool = False) -> None:
        if front:
            self.held.appendleft(request_id)
        else:
            self.held.append(request_id)

    def _record(self, instance_id: str) -> InstanceRecord:
        record = self.records.get(instance_id)
        if record is not None:
            return record
        # local engines keep lightweight records for queue accounting
        if not hasattr(self, "_local_records"):
            self._local_records: dict[str, InstanceRecord] = {}
        if instance_id not in self._local_records:
            self._local_records[instance_id] = InstanceRecord(
                instance_id=instance_id, gpu_count=0,
            )
        return self._local_records[instance_id]

    def admit(self, request_id: str, instance_id: str, now: float) -> None:
        """Pending -> executing on the owning instance."""
        request = self.requests[request_id]
        if self.owner.get(request_id) != instance_id:
            raise ManagerError(f"{request_id} not owned by {instance_id}")
        if request.state is not RequestState.PENDING:
            raise ManagerError(f"cannot admit {request_id} in state {request.state}")
        self.pending_queues[instance_id].remove(request_id)
        self.executing_sets[instance_id].append(request_id)
        request.state = RequestState.EXECUTING
        record = self._record(instance_id)
        record.m_pending -= 1
        record.m_exec += 1

    def on_tokens(self, request_id: str, instance_id: str, count: int, now: float) -> None:
        """Append ``count`` streamed tokens from the owning instance."""
        request = self.requests[request_id]
        if request.state is not RequestState.EXECUTING or self.owner.get(request_id) != instance_id:
            raise ManagerError(f"stream desync: {request_id} from {instance_id}")
        if instance_id not in self.local_ids:
            record = self.records[instance_id]
            if record.weight_version != self.global_version:
                raise GatingViolation(
                    f"{instance_id} emitted tokens at version {record.weight_version}, "
                    f"current {self.global_version}"
                )
        start = len(request.generated)
        request.append_tokens(instance_id, list(range(start, start + count)))
        if len(request.generated) > request.target_len:
            raise ManagerError(f"{request_id} overshot target length")
        self.log.emit(
            now, "tokens", request_id=request_id, instance_id=instance_id,
            count=count, total=len(request.generated), version=self.global_version,
        )

    def complete(self, request_id: str, instance_id: str, now: float) -> None:
        request = self.requests[request_id]
        if request.state is not RequestState.EXECUTING:
            raise ManagerError(f"cannot complete {request_id} in state {request.state}")
        if len(request.generated) != request.target_len:
            raise ManagerError(
                f"{request_id} completed at {len(request.generated)} of "
                f"{request.target_len} tokens"
            )
        self.executing_sets[instance_id].remove(request_id)
        self._record(instance_id).m_exec -= 1
        del self.owner[request_id]
        request.state = RequestState.COMPLETE
        self.step_batch.completion_bitmap[request_id] = True
        self.mb_buffer.append(request_id)
        self.log.emit(
            now, "complete", request_id=request_id, instance_id=instance_id,
            length=len(request.generated),
        )

    def migrate_out(self, request_id: str, now: float, reason: str) -> None:
        """Detach a request from its owner, preserving its partial progress."""
        request = self.requests[request_id]
        instance_id = self.owner.pop(request_id)
        if request.state is RequestState.PENDING:
            self.pending_queues[instance_id].remove(request_id)
            self._record(instance_id).m_pending -= 1
        elif request.state is RequestState.EXECUTING:
            self.executing_sets[instance_id].remove(request_id)
            self._record(instance_id).m_exec -= 1
        else:
            raise ManagerError(f"cannot migrate {request_id} in state {request.state}")
        request.state = RequestState.MIGRATING
        request.migrating_from = instance_id
        if self.migration == "recompute" and reason == "preempt":
            # fault-handling baseline: partial responses are discarded
            request.generated.clear()
            request.route_history.clear()
        self.log.emit(
            now, "migrate_out", request_id=request_id, instance_id=instance_id,
            reason=reason, kept_tokens=len(request.generated),
        )

    def on_preempt(self, instance_id: str, now: float) -> list[str]:
        """Mark an instance preempted; detach its requests for re-routing.

        Idempotent: a second preemption of the same instance is a no-op.
        """
        record = self.records[instance_id]
        if record.status is InstanceStatus.PREEMPTED:
            return []
        displaced = list(self.pending_queues[instance_id]) + list(
            self.executing_sets[instance_id]
        )
        displaced.sort(key=lambda rid: self.request_seq[rid])
        for request_id in displaced:
            self.migrate_out(request_id, now, reason="preempt")
        record.status = InstanceStatus.PREEMPTED
        record.preempted_at = now
        record.m_pending = 0
        record.m_exec = 0
        self.log.emit(now, "preempt", instance_id=instance_id, displaced=len(displaced))
        return displaced

    # -- microbatching ----------------------------------------------------

    def seal_microbatch(self, now: float, *, force: bool = False) -> Microbatch | None:
        """Gather buffered responses once at least m_b arrived (or on flush)."""
        if not self.mb_buffer:
            return None
        if len(self.mb_buffer) < self.m_b and not force:
            return None
        responses = [self.requests[rid] for rid in self.mb_buffer]
        self.mb_buffer = []
        self.sealed_count += 1
        batch = Microbatch(
            responses=responses,
            token_count=sum(r.prompt_len + len(r.generated) for r in responses),
            sealed_at=now,
        )
        self.log.emit(
            now, "mb_seal", size=len(responses), tokens=batch.token_count,
            forced=force,
        )
        return batch

    def on_trained(self, batch: Microbatch, now: float) -> None:
        for request in batch.responses:
            self.step_batch.trained_bitmap[request.request_id] = True
            self.tokens_trained += len(request.generated)
        self.log.emit(now, "train_done", size=len(batch.responses))

    def all_generated(self) -> bool:
        return self.step_batch.all_complete()

    def step_trained(self) -> bool:
        return self.step_batch.all_trained()

    # -- step lifecycle ---------------------------------------------------

    def begin_step(self, version: int, now: float, *, prompt_count: int = 0,
                   group_size: int = 0) -> None:
        if self.held:
            raise ManagerError("held requests left over from previous step")
        self.global_version = version
        self.step_batch = StepBatch(prompt_count=prompt_count,
                                    group_size=group_size)
        self.mb_buffer = []
        self.sealed_count = 0
        self.tokens_trained = 0
        self.log.emit(now, "step_start", version=version)

    def record_step(self, accounting: StepAccounting) -> StepStats:
        if not self.step_trained():
            raise ManagerError("record_step before the step completed")
        tokens_generated = sum(
            len(request.generated) for request in self.step_batch.requests
        )
        if tokens_generated != self.tokens_trained:
            raise ManagerError(
                f"stats closure violated: generated {tokens_generated} != "
                f"trained {self.tokens_trained}"
            )
        duration = accounting.step_end - accounting.step_start
        tails = accounting.remote_idle_tails
        t_wait_remote = sum(tails) / len(tails) if tails else 0.0
        t_remote = (
            accounting.remote_busy_total / accounting.n_bar_prem
            if accounting.n_bar_prem > 0
            else 0.0
        )
        stats = StepStats(
            step_index=accounting.step_index,
            t_wait_train=accounting.t_wait_train,
            t_wait_remote=t_wait_remote,
            t_train=accounting.t_train,
            t_remote=t_remote,
            n_bar_prem=accounting.n_bar_prem,
            n_hat_prem=accounting.n_hat_prem,
            tokens_generated=tokens_generated,
            tokens_trained=self.tokens_trained,
            step_duration=duration,
        )
        if stats.t_wait_train + stats.t_train > duration + 1e-6:
            raise ManagerError(
                f"step {stats.step_index}: training phase "
                f"{stats.t_wait_train + stats.t_train:.3f}s exceeds step "
                f"duration {duration:.3f}s"
            )
        self.log.emit(
            accounting.step_end, "step_end",
            **{name: getattr(stats, name) for name in StepStats.FIELDS},
        )
        return stats
