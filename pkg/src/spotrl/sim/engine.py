"""Deterministic discrete-event simulator of the training cluster and the
preemptible rollout pool.

Time advances through a priority queue keyed by (time, ordering class,
sequence number); the ordering class fixes the outcome of same-timestamp
races.  Generation is processor sharing with piecewise-constant rates:
every unit's per-request decode rate is recomputed at each event touching
it, and predicted completion events are invalidated through epochs.  The
entire experiment is a pure function of (config, trace, seed).
"""
from __future__ import annotations

import enum
import heapq
import logging
import math
import random
from collections import deque
from dataclasses import dataclass, field

from .. import balancer
from .. import scheduler as seedsched
from ..domain import (
    InstanceStatus,
    ProfileEntry,
    ProfileTable,
    StepStats,
    compute_cost_dollars,
    compute_cost_efficiency,
)
from ..events import EventLog
from ..manager import Microbatch, RolloutManager, StepAccounting
from ..traces import TraceEvent, TraceEventKind
from ..transfer import TransferPool, build_agents
from .config import Mode, SimConfig, balanced_pool_size
from .models import instance_throughput, sample_response_length

logger = logging.getLogger(__name__)

REMOTE_GPU_COUNT = 2


class SimulationError(RuntimeError):
    pass


class Ev(enum.IntEnum):
    """Processing order for events sharing a timestamp."""

    PREEMPT = 0
    ALLOCATE = 1
    PREFILL_DONE = 2
    COMPLETION = 3
    SEED_EXPIRY = 4
    LB_TICK = 5
    PULL_DONE = 6
    STAGE_DONE = 7
    MB_CHECK = 8
    TRAIN_DONE = 9
    MODE_SWITCH = 10


class GenUnit:
    """Continuous-batching state of one serving engine (local or remote)."""

    def __init__(self, unit_id: str, speed: float, is_local: bool, now: float):
        self.unit_id = unit_id
        self.speed = speed
        self.is_local = is_local
        self.prefill: deque[tuple[str, int]] = deque()  # (request_id, tokens)
        self.prefill_epoch = 0
        self.decoding: dict[str, float] = {}  # request_id -> fractional carry
        self.per_request_rate = 0.0
        self.last_advance = now
        self.epoch = 0
        self.busy_since: float | None = None
        self.step_busy = 0.0
        self.step_last_token: float | None = None
        self.eligible_at: float | None = None

    @property
    def exec_count(self) -> int:
        return len(self.prefill) + len(self.decoding)


@dataclass
class ExperimentResult:
    config: SimConfig
    timeline: list[StepStats]
    activity: list[tuple[str, float, float]]
    log: EventLog
    schedules: list[dict] = field(default_factory=list)
    profile: ProfileTable = field(default_factory=ProfileTable)

    def total_duration(self) -> float:
        return sum(s.step_duration for s in self.timeline)

    def summary(self) -> dict:
        duration = self.total_duration()
        trained = sum(s.tokens_trained for s in self.timeline)
        generated = sum(s.tokens_generated for s in self.timeline)
        out = {
            "steps": len(self.timeline),
            "duration_seconds": duration,
            "tokens_trained": trained,
            "tokens_generated": generated,
            "throughput_trained": trained / duration if duration > 0 else 0.0,
            "throughput_combined": (
                (trained + generated) / duration if duration > 0 else 0.0
            ),
            "preemptible_instance_seconds": sum(
                end - start for _, start, end in self.activity
            ),
            "instances_used": len({iid for iid, _, _ in self.activity}),
            "preemptions_survived": len(
                self.log.of_type("preempt")
            ),
            "cost_dollars": compute_cost_dollars(
                self.timeline, self.activity, self.config.cost
            ),
        }
        out["avg_instances_used"] = (
            out["preemptible_instance_seconds"] / duration if duration > 0 else 0.0
        )
        out["tokens_per_dollar"] = (
            compute_cost_efficiency(self.timeline, self.activity, self.config.cost)
            if out["cost_dollars"] > 0
            else 0.0
        )
        return out


class Engine:
    def __init__(self, config: SimConfig, trace: list[TraceEvent],
                 log: EventLog | None = None):
        self.cfg = config
        self.trace = trace
        self.log = log if log is not None else EventLog()
        self.rng = random.Random(config.seed)
        self.manager = RolloutManager(
            theta=config.load_balancer.theta,
            m_b=config.m_b,
            log=self.log,
            migration=config.migration,
        )
        agents = build_agents(
            config.cost.reserved_node_count,
            config.transfer.agents_per_node,
            config.transfer.agent_egress,
        )
        self.pool = TransferPool(agents)
        self.paired_agent: dict[str, str] = {}
        self.model_bytes = config.transfer.resolved_model_bytes()

        self.now = 0.0
        self.heap: list = []
        self._seq = 0
        self._epoch_counter = 0
        self.running = True
        self.steps_done = 0
        self.step_index = 0
        self.version = 0
        self.phase = "idle"  # idle | seeding | switching | training
        self.fallback_seeding = False
        self._in_end_seeding = False
        self.seed_session = 0
        self.switch_session = 0
        self.units: dict[str, GenUnit] = {}
        # instances allocated at t=0 are present before the first step starts,
        # so they catch the first step-boundary weight broadcast
        self.available: deque[tuple[str, int]] = deque(
            (e.instance_id, REMOTE_GPU_COUNT)
            for e in trace
            if e.kind is TraceEventKind.ALLOCATE and e.at == 0.0
        )
        deferred = [
            e for e in trace
            if not (e.kind is TraceEventKind.ALLOCATE and e.at == 0.0)
        ]
        self.future_allocates = sum(
            1 for e in deferred if e.kind is TraceEventKind.ALLOCATE
        )
        self.trace_end = trace[-1].at if trace else None

        # trainer
        self.trainer_busy = False
        self.trainer_queue: deque[Microbatch] = deque()
        self.trainer_free_since = 0.0
        self.t_train_acc = 0.0
        self.t_wait_train_acc = 0.0

        # availability accounting
        self.alive_integral = 0.0
        self.alive_mark = 0.0
        self.activity_open: dict[str, float] = {}
        self.activity: list[tuple[str, float, float]] = []

        # per-step state
        self.step_start_time = 0.0
        self.requests_incomplete = 0
        self.closed_remote_busy = 0.0
        self.profile_prev = ProfileTable()
        self.profile_acc: dict[int, list[float]] = {}
        self.profile_ctx_sum = 0.0
        self.profile_ctx_n = 0

        self.timeline: list[StepStats] = []
        self.schedules: list[dict] = []
        self.disagg_pool = 0

        if config.mode is Mode.COLOCATED:
            t_init = math.inf
        elif config.mode is Mode.DISAGG_BALANCED or not config.scheduler.seeding_enabled:
            t_init = 0.0
        elif config.scheduler.t_init_seconds > 0:
            t_init = config.scheduler.t_init_seconds
        else:
            expected_tokens = config.requests_per_step * config.length.mean_tokens
            local_rate = (
                config.n_resv * config.generation.t_plateau * config.local_speed_factor
            )
            t_init = seedsched.estimate_t_init(expected_tokens, local_rate)
        self.schedule = seedsched.initial_schedule(
            n_resv=config.n_resv, eta=config.scheduler.eta, t_init=t_init
        )
        if config.mode is Mode.COLOCATED:
            self.schedule.n_prem_cap = 0.0
        elif config.mode is Mode.DISAGG_BALANCED:
            self.disagg_pool = (
                config.disagg_pool_size
                if config.disagg_pool_size >= 0
                else balanced_pool_size(config)
            )
            self.schedule.n_prem_cap = float(self.disagg_pool)
        self.manager.n_prem_cap = self.schedule.n_prem_cap

        for event in deferred:
            cls = Ev.PREEMPT if event.kind is TraceEventKind.PREEMPT else Ev.ALLOCATE
            self._push(event.at, cls, ("trace", event))

    # -- event plumbing ----------------------------------------------------

    def _push(self, t: float, cls: Ev, payload) -> None:
        self._seq += 1
        heapq.heappush(self.heap, (t, int(cls), self._seq, payload))

    def _next_epoch(self) -> int:
        self._epoch_counter += 1
        return self._epoch_counter

    def run(self) -> ExperimentResult:
        self._start_step()
        guard = 0
        while self.running:
            if not self.heap:
                raise SimulationError(
                    f"event queue drained mid-step at t={self.now:.3f} "
                    f"(step {self.step_index}, phase {self.phase})"
                )
            t, cls, _, payload = heapq.heappop(self.heap)
            if t < self.now - 1e-9:
                raise SimulationError(f"causality violated: {t} < {self.now}")
            self.now = max(self.now, t)
            self._handle(Ev(cls), payload)
            guard += 1
            if guard > 50_000_000:
                raise SimulationError("event budget exhausted; likely livelock")
        end = self.now
        for iid, start in sorted(self.activity_open.items()):
            self.activity.append((iid, start, end))
        self.activity_open.clear()
        return ExperimentResult(
            config=self.cfg,
            timeline=self.timeline,
            activity=sorted(self.activity),
            log=self.log,
            schedules=self.schedules,
            profile=self.profile_prev,
        )

    def _handle(self, cls: Ev, payload) -> None:
        kind = payload[0]
        if kind == "trace":
            event: TraceEvent = payload[1]
            if event.kind is TraceEventKind.ALLOCATE:
                self.future_allocates -= 1
                self._on_allocate(event.instance_id)
            else:
                self._on_trace_preempt(event.instance_id)
        elif kind == "prefill":
            _, unit_id, epoch = payload
            unit = self.units.get(unit_id)
            if unit is not None and unit.prefill_epoch == epoch:
                self._on_prefill_done(unit)
        elif kind == "completion":
            _, unit_id, epoch = payload
            unit = self.units.get(unit_id)
            if unit is not None and unit.epoch == epoch:
                self._sync_unit(unit)
        elif kind == "seed_expiry":
            if payload[1] == self.seed_session and self.phase == "seeding":
                self._end_seeding()
        elif kind == "lb_tick":
            self._on_lb_tick()
        elif kind == "pull_done":
            _, instance_id, epoch = payload
            if epoch == self.pool.epoch and instance_id in self.pool.jobs:
                self._on_pull_done(instance_id)
        elif kind == "stage_done":
            self._on_stage_done(payload[1])
        elif kind == "mb_check":
            self._mb_check()
        elif kind == "train_done":
            self._on_train_done(payload[1])
        elif kind == "mode_switch":
            _, direction, session = payload
            if session == self.switch_session:
                self._on_mode_switch(direction)
        else:  # pragma: no cover
            raise SimulationError(f"unknown event {kind}")

    # -- step lifecycle ----------------------------------------------------

    def _start_step(self) -> None:
        now = self.now
        self.step_index += 1
        self.version += 1
        self.step_start_time = now
        self.manager.begin_step(
            self.version, now,
            prompt_count=self.cfg.prompt_count, group_size=self.cfg.group_size,
        )
        self.schedules.append(
            {
                "step_index": self.step_index,
                "t_seed": self.schedule.t_seed,
                "n_prem_cap": self.schedule.n_prem_cap,
            }
        )
        if self.cfg.mode is Mode.HYBRID:
            self.log.emit(
                now, "schedule", t_seed=self.schedule.t_seed,
                n_prem_cap=self.schedule.n_prem_cap,
            )
        self.t_train_acc = 0.0
        self.t_wait_train_acc = 0.0
        self.closed_remote_busy = 0.0
        self._bump_alive()

        for unit in self.units.values():
            if unit.exec_count:
                raise SimulationError(f"{unit.unit_id} busy across step boundary")
            unit.step_busy = 0.0
            unit.busy_since = None
            unit.step_last_token = None
            unit.eligible_at = None

        for p in range(self.cfg.prompt_count):
            group_id = f"s{self.step_index:03d}p{p:03d}"
            prompt_len = self.rng.randint(self.cfg.prompt_len_min, self.cfg.prompt_len_max)
            for g in range(self.cfg.group_size):
                target = sample_response_length(
                    self.rng, self.cfg.length, self.cfg.max_response_len,
                    step_index=self.step_index,
                )
                self.manager.create_request(
                    f"{group_id}g{g}", prompt_len, target, group_id, now
                )
        self.requests_incomplete = self.cfg.requests_per_step

        # stage new weights; seeding must not wait for this
        self.log.emit(now, "stage_start", version=self.version)
        self._push(now + self.cfg.transfer.staging_delay, Ev.STAGE_DONE,
                   ("stage_done", self.version))
        if self.cfg.mode is Mode.DISAGG_BALANCED and self.step_index == 1:
            if self.disagg_pool <= 0:
                raise SimulationError(
                    "rollout deadlock: DisaggBalanced with an empty rollout pool"
                )
            for k in range(self.disagg_pool):
                self.available.append((f"resv{k:02d}", REMOTE_GPU_COUNT))
        self._accept_available()
        self._refresh_stale_instances()

        t_seed = self.schedule.t_seed
        if self.cfg.mode is Mode.DISAGG_BALANCED or t_seed <= 0:
            self.phase = "training"
            self.trainer_free_since = now
            self.log.emit(now, "train_ready")
        else:
            self._enter_seeding(fallback=False)
            if math.isfinite(t_seed):
                self._push(now + t_seed, Ev.SEED_EXPIRY,
                           ("seed_expiry", self.seed_session))
        if self.step_index == 1:
            # the tick chain reschedules itself for the whole experiment
            self._push(now + self.cfg.load_balancer.lb_tick_seconds,
                       Ev.LB_TICK, ("lb_tick",))
        self._pump()
        self._check_stranded()

    def _end_step(self) -> None:
        now = self.now
        self._bump_alive()
        duration = now - self.step_start_time
        if duration <= 0:
            raise SimulationError(f"step {self.step_index} has zero duration")
        alive = self.manager.alive_remote_ids()
        n_bar = self.alive_integral / duration
        self.alive_integral = 0.0
        remote_busy = self.closed_remote_busy
        tails = []
        for rid in sorted(alive):
            unit = self.units.get(rid)
            record = self.manager.records[rid]
            if unit is not None:
                if unit.busy_since is not None:
                    raise SimulationError(f"{rid} still busy at step end")
                remote_busy += unit.step_busy
            if record.status is InstanceStatus.ACTIVE and unit is not None:
                ref = unit.step_last_token
                if ref is None:
                    ref = unit.eligible_at if unit.eligible_at is not None else now
                tails.append(now - ref)
        accounting = StepAccounting(
            step_index=self.step_index,
            step_start=self.step_start_time,
            step_end=now,
            t_wait_train=self.t_wait_train_acc,
            t_train=self.t_train_acc,
            remote_busy_total=remote_busy,
            n_bar_prem=n_bar,
            n_hat_prem=len(alive),
            remote_idle_tails=tails,
        )
        stats = self.manager.record_step(accounting)
        self.timeline.append(stats)
        self.steps_done += 1
        logger.debug(
            "step %d done in %.1fs (%d tokens, n_bar=%.2f)",
            stats.step_index, stats.step_duration, stats.tokens_trained,
            stats.n_bar_prem,
        )

        self.profile_prev = self._finalize_profile()

        if self.steps_done >= self.cfg.steps:
            self.running = False
            return
        if self.trace_end is not None and self.trace_end > 0 and now >= self.trace_end:
            # the replayed availability window is over
            self.running = False
            return
        if self.cfg.mode is Mode.HYBRID:
            self.schedule = seedsched.plan_step(
                self.schedule, stats,
                memory_enabled=self.cfg.scheduler.memory_enabled,
            )
            if not self.cfg.scheduler.seeding_enabled:
                self.schedule.t_seed = 0.0
            self.manager.n_prem_cap = self.schedule.n_prem_cap
        self._start_step()

    # -- seeding -----------------------------------------------------------

    def _enter_seeding(self, *, fallback: bool) -> None:
        now = self.now
        self.phase = "seeding"
        self.fallback_seeding = fallback
        local_ids = [f"local{k:02d}" for k in range(self.cfg.n_resv)]
        for local_id in local_ids:
            self.units[local_id] = GenUnit(
                local_id, self.cfg.local_speed_factor, is_local=True, now=now
            )
        self.manager.set_local_engines(local_ids)
        self.log.emit(now, "seeding_start", engines=len(local_ids), fallback=fallback)

    def _end_seeding(self) -> None:
        now = self.now
        self._in_end_seeding = True
        try:
            local_ids = list(self.manager.local_ids)
            for local_id in local_ids:
                self._sync_unit(self.units[local_id])
            owned: list[str] = []
            for local_id in local_ids:
                owned.extend(self.manager.pending_queues[local_id])
                owned.extend(self.manager.executing_sets[local_id])
            if owned and self._no_remote_prospects():
                # nothing to hand off to and nothing coming: keep generating
                # locally until work finishes or a remote turns up
                self.fallback_seeding = True
                self.log.emit(now, "seeding_fallback")
                return
            for local_id in local_ids:
                unit = self.units[local_id]
                for rid in list(self.manager.pending_queues[local_id]):
                    self.manager.migrate_out(rid, now, reason="seed_handoff")
                for rid in list(self.manager.executing_sets[local_id]):
                    self._detach_from_unit(unit, rid)
                    self.manager.migrate_out(rid, now, reason="seed_handoff")
            for rid in sorted(owned, key=lambda r: self.manager.request_seq[r],
                              reverse=True):
                self.manager.hold(rid, front=True)
            for local_id in local_ids:
                unit = self.units.pop(local_id)
                self._update_busy(unit)
            self.manager.clear_local_engines()
            self.seed_session += 1
            self.phase = "switching"
            self.switch_session += 1
            self.log.emit(now, "seeding_end", handed_off=len(owned))
            self._push(now + self.cfg.mode_switch_delay, Ev.MODE_SWITCH,
                       ("mode_switch", "train", self.switch_session))
        finally:
            self._in_end_seeding = False
        self._pump()

    def _no_remote_prospects(self) -> bool:
        """No remote is serving, pulling, or plausibly arriving this step."""
        for rid in self.manager.serving_ids():
            if rid not in self.manager.local_ids:
                return False
        if self.pool.jobs or self.pool.queued:
            return False
        if self.cfg.transfer.synchronized:
            # joiners only receive weights at the next step boundary
            return True
        cap = math.floor(self.manager.n_prem_cap)
        if cap <= 0:
            return True
        if len(self.manager.alive_remote_ids()) < cap and (
            self.available or self.future_allocates > 0
        ):
            return False
        return True

    def _on_mode_switch(self, direction: str) -> None:
        now = self.now
        if direction == "train":
            self.phase = "training"
            self.trainer_free_since = now
            self.log.emit(now, "train_ready")
            self._maybe_start_training()
            self._check_stranded()
        else:
            self._enter_seeding(fallback=True)
            self._pump()

    def _check_stranded(self) -> None:
        """Rollout work left but nothing can generate and nothing is coming."""
        if not self.running or self.requests_incomplete == 0:
            return
        if self.phase != "training" or self.trainer_busy or self.trainer_queue:
            return
        if any(u.exec_count for u in self.units.values()):
            return
        if not self._no_remote_prospects():
            return
        if self.cfg.mode is Mode.DISAGG_BALANCED:
            raise SimulationError(
                "rollout deadlock: no instances available in DisaggBalanced mode"
            )
        self.phase = "switching"
        self.switch_session += 1
        self.log.emit(self.now, "reseed_switch")
        self._push(self.now + self.cfg.mode_switch_delay, Ev.MODE_SWITCH,
                   ("mode_switch", "seed", self.switch_session))

    # -- instance pool -----------------------------------------------------

    def _on_allocate(self, instance_id: str) -> None:
        if self.cfg.mode is Mode.DISAGG_BALANCED:
            return  # reserved pool only; the availability trace does not apply
        self.available.append((instance_id, REMOTE_GPU_COUNT))
        self.log.emit(self.now, "instance_available", instance_id=instance_id)
        self._accept_available()
        self._pump()
        self._check_stranded()

    def _accept_available(self) -> None:
        now = self.now
        while self.available:
            instance_id, gpu_count = self.available[0]
            result = self.manager.register_instance(instance_id, gpu_count, now)
            if result.value != "accepted":
                break
            self.available.popleft()
            self._bump_alive()
            self.activity_open[instance_id] = now
            agent_id = self.pool.pair_agent(instance_id)
            self.paired_agent[instance_id] = agent_id
            self.log.emit(now, "paired", instance_id=instance_id, agent_id=agent_id)
            if not self.cfg.transfer.synchronized:
                self._start_pull(instance_id)
            # synchronized mode: provisioned instances idle until the next
            # step-boundary broadcast

    def _start_pull(self, instance_id: str) -> None:
        now = self.now
        self.manager.mark_pulling(instance_id, now)
        started = self.pool.request_pull(
            instance_id,
            self.paired_agent[instance_id],
            self.version,
            self.model_bytes,
            self.cfg.transfer.instance_ingress,
            now,
        )
        self.log.emit(
            now, "pull_request", instance_id=instance_id, version=self.version,
            started=started,
        )
        self._push_pull_predictions()

    def _refresh_stale_instances(self) -> None:
        """Step start: every alive remote must fetch the new weights."""
        now = self.now
        for rid in sorted(self.manager.alive_remote_ids()):
            record = self.manager.records[rid]
            if record.weight_version >= self.version:
                continue
            jobs = [self.pool.jobs[rid]] if rid in self.pool.jobs else []
            jobs += [j for j in self.pool.queued if j.instance_id == rid]
            if any(j.version >= self.version for j in jobs):
                continue  # already fetching the current weights
            if jobs:
                self.pool.abort(rid, now)  # restart for the new version
                self._push_pull_predictions()
            self._start_pull(rid)

    def _on_stage_done(self, version: int) -> None:
        now = self.now
        started = self.pool.stage_complete(version, now)
        self.log.emit(now, "staged", version=version, pulls_started=len(started))
        self._push_pull_predictions()

    def _push_pull_predictions(self) -> None:
        for t, instance_id in self.pool.predictions():
            self._push(t, Ev.PULL_DONE, ("pull_done", instance_id, self.pool.epoch))

    def _on_pull_done(self, instance_id: str) -> None:
        now = self.now
        job = self.pool.finish(instance_id, now)
        self._push_pull_predictions()
        self.manager.mark_active(instance_id, job.version, now)
        unit = GenUnit(instance_id, 1.0, is_local=False, now=now)
        unit.eligible_at = now
        self.units[instance_id] = unit
        self.log.emit(
            now, "pull_done", instance_id=instance_id, version=job.version,
            seconds=now - job.started_at,
        )
        if self.phase == "seeding" and self.fallback_seeding:
            self._end_seeding()
        self._pump()

    def _on_trace_preempt(self, instance_id: str) -> None:
        now = self.now
        if self.cfg.mode is Mode.DISAGG_BALANCED:
            return
        for k, (iid, _) in enumerate(self.available):
            if iid == instance_id:
                del self.available[k]
                self.log.emit(now, "instance_withdrawn", instance_id=instance_id)
                return
        record = self.manager.records.get(instance_id)
        if record is None or record.status is InstanceStatus.PREEMPTED:
            return
        unit = self.units.get(instance_id)
        if unit is not None:
            self._sync_unit(unit)
        displaced = self.manager.on_preempt(instance_id, now)
        if unit is not None:
            unit = self.units.pop(instance_id)
            unit.decoding = {}
            unit.prefill.clear()
            self._update_busy(unit)
            self.closed_remote_busy += unit.step_busy
        self.pool.abort(instance_id, now)
        self._push_pull_predictions()
        self._bump_alive()
        start = self.activity_open.pop(instance_id)
        self.activity.append((instance_id, start, now))
        for rid in sorted(displaced, key=lambda r: self.manager.request_seq[r],
                          reverse=True):
            self.manager.hold(rid, front=True)
        self._accept_available()
        self._pump()
        self._check_stranded()

    def _bump_alive(self) -> None:
        now = self.now
        self.alive_integral += len(self.activity_open) * (now - self.alive_mark)
        self.alive_mark = now

    # -- generation --------------------------------------------------------

    def _pump(self) -> None:
        """Route held requests and admit pending ones until nothing moves."""
        now = self.now
        while True:
            routed = self.manager.dispatch(now)
            admitted = 0
            for unit_id in sorted(self.units):
                queue = self.manager.pending_queues.get(unit_id)
                if not queue:
                    continue
                unit = self.units[unit_id]
                while queue and unit.exec_count < self.cfg.max_concurrency:
                    rid = queue[0]
                    self.manager.admit(rid, unit_id, now)
                    request = self.manager.requests[rid]
                    tokens = request.prompt_len + len(request.generated)
                    self._enqueue_prefill(unit, rid, tokens)
                    admitted += 1
            if not routed and not admitted:
                break

    def _enqueue_prefill(self, unit: GenUnit, request_id: str, tokens: int) -> None:
        was_empty = not unit.prefill
        unit.prefill.append((request_id, tokens))
        self._update_busy(unit)
        if was_empty:
            self._schedule_prefill_head(unit)

    def _schedule_prefill_head(self, unit: GenUnit) -> None:
        unit.prefill_epoch = self._next_epoch()
        if not unit.prefill:
            return
        _, tokens = unit.prefill[0]
        rate = self.cfg.generation.prefill_rate * unit.speed
        self._push(self.now + tokens / rate, Ev.PREFILL_DONE,
                   ("prefill", unit.unit_id, unit.prefill_epoch))

    def _on_prefill_done(self, unit: GenUnit) -> None:
        self._sync_unit(unit)
        if not unit.prefill:
            return
        request_id, _ = unit.prefill.popleft()
        unit.decoding[request_id] = 0.0
        self._refresh_rate(unit)
        self._schedule_prefill_head(unit)

    def _sync_unit(self, unit: GenUnit) -> None:
        """Advance progress to now, harvest completions, refresh the rate."""
        now = self.now
        dt = now - unit.last_advance
        unit.last_advance = now
        completed: list[str] = []
        if unit.decoding and dt > 0 and unit.per_request_rate > 0:
            emitted = False
            updates: dict[str, float] = {}
            for rid, carry in unit.decoding.items():
                request = self.manager.requests[rid]
                carry += dt * unit.per_request_rate
                remaining = request.target_len - len(request.generated)
                if carry >= remaining - 1e-7:
                    k = remaining
                else:
                    k = int(carry + 1e-9)
                if k > 0:
                    self.manager.on_tokens(rid, unit.unit_id, k, now)
                    carry -= k
                    emitted = True
                if len(request.generated) >= request.target_len:
                    completed.append(rid)
                else:
                    updates[rid] = carry
            unit.decoding = updates
            if emitted and not unit.is_local:
                unit.step_last_token = now
        for rid in completed:
            self.manager.complete(rid, unit.unit_id, now)
            self.requests_incomplete -= 1
        self._refresh_rate(unit)
        if completed:
            self._push(now, Ev.MB_CHECK, ("mb_check",))
            if self._in_end_seeding:
                return
            if self.phase == "seeding" and self.requests_incomplete == 0:
                self._end_seeding()
            else:
                self._pump()

    def _refresh_rate(self, unit: GenUnit) -> None:
        unit.epoch = self._next_epoch()
        self._update_busy(unit)
        b = len(unit.decoding)
        if b == 0:
            unit.per_request_rate = 0.0
            return
        contexts = [self.manager.requests[rid].context_len for rid in unit.decoding]
        c_mean = sum(contexts) / b
        total = instance_throughput(self.cfg.generation, b, c_mean) * unit.speed
        unit.per_request_rate = total / b
        if not unit.is_local:
            acc = self.profile_acc.setdefault(b, [0.0, 0.0])
            acc[0] += total
            acc[1] += 1.0
            self.profile_ctx_sum += c_mean
            self.profile_ctx_n += 1
        if unit.per_request_rate <= 0:
            return
        horizon = min(
            (self.manager.requests[rid].target_len
             - len(self.manager.requests[rid].generated) - carry)
            for rid, carry in unit.decoding.items()
        ) / unit.per_request_rate
        self._push(self.now + max(horizon, 0.0), Ev.COMPLETION,
                   ("completion", unit.unit_id, unit.epoch))

    def _update_busy(self, unit: GenUnit) -> None:
        now = self.now
        busy = unit.exec_count > 0
        if busy and unit.busy_since is None:
            unit.busy_since = now
        elif not busy and unit.busy_since is not None:
            unit.step_busy += now - unit.busy_since
            unit.busy_since = None

    def _detach_from_unit(self, unit: GenUnit, request_id: str) -> None:
        """Remove a request from the unit's timing structures (manager state
        is adjusted by the caller via migrate_out)."""
        if request_id in unit.decoding:
            del unit.decoding[request_id]
            self._refresh_rate(unit)
            return
        for k, (rid, _) in enumerate(unit.prefill):
            if rid == request_id:
                del unit.prefill[k]
                if k == 0:
                    self._schedule_prefill_head(unit)
                self._update_busy(unit)
                return
        raise SimulationError(f"{request_id} not executing on {unit.unit_id}")

    # -- load balancing ----------------------------------------------------

    def _mean_remote_context(self) -> float:
        total, n = 0.0, 0
        for unit in self.units.values():
            if unit.is_local:
                continue
            for rid in unit.decoding:
                total += self.manager.requests[rid].context_len
                n += 1
        return total / n if n else self.cfg.generation.c_ref

    def _on_lb_tick(self) -> None:
        now = self.now
        if self.requests_incomplete > 0:
            for rid in sorted(self.units):
                if not self.units[rid].is_local:
                    self._sync_unit(self.units[rid])
            views = self.manager.lb_view()
            orders = balancer.lb_tick(
                views,
                self.profile_prev,
                self._mean_remote_context(),
                epsilon=self.cfg.load_balancer.epsilon_plateau,
                context_factor=self.cfg.generation.context_factor,
            )
            for order in orders:
                self._apply_order(order)
            if orders:
                self._pump()
        self._push(now + self.cfg.load_balancer.lb_tick_seconds, Ev.LB_TICK,
                   ("lb_tick",))

    def _apply_order(self, order: balancer.MigrationOrder) -> None:
        now = self.now
        source_unit = self.units.get(order.from_instance)
        self.log.emit(
            now, "lb_order", kind=order.kind.value, source=order.from_instance,
            target=order.to_instance, count=len(order.request_ids),
        )
        for rid in order.request_ids:
            if order.kind is balancer.MigrationKind.EXECUTING:
                self._detach_from_unit(source_unit, rid)
            self.manager.migrate_out(rid, now, reason=f"lb_{order.kind.value}")
            self.manager.route_to(rid, order.to_instance, now)

    # -- training ----------------------------------------------------------

    def _mb_check(self) -> None:
        now = self.now
        force = self.requests_incomplete == 0
        batch = self.manager.seal_microbatch(now, force=force)
        if batch is not None:
            self.trainer_queue.append(batch)
            self._maybe_start_training()

    def _maybe_start_training(self) -> None:
        now = self.now
        if self.phase != "training" or self.trainer_busy or not self.trainer_queue:
            return
        batch = self.trainer_queue.popleft()
        gap = now - self.trainer_free_since
        if gap < -1e-9:
            raise SimulationError("trainer time ran backwards")
        self.t_wait_train_acc += max(gap, 0.0)
        duration = self.cfg.trainer.duration(batch.token_count)
        self.trainer_busy = True
        self.t_train_acc += duration
        self.log.emit(now, "train_start", size=len(batch.responses),
                      tokens=batch.token_count, seconds=duration)
        self._push(now + duration, Ev.TRAIN_DONE, ("train_done", batch))

    def _on_train_done(self, batch: Microbatch) -> None:
        now = self.now
        self.trainer_busy = False
        self.trainer_free_since = now
        self.manager.on_trained(batch, now)
        if self.trainer_queue:
            self._maybe_start_training()
        elif (
            self.requests_incomplete == 0
            and not self.manager.mb_buffer
            and self.manager.step_trained()
        ):
            self._end_step()
        else:
            self._check_stranded()

    # -- profile -----------------------------------------------------------

    def _finalize_profile(self) -> ProfileTable:
        entries = [
            ProfileEntry(batch_size=b, decode_throughput=acc[0] / acc[1])
            for b, acc in sorted(self.profile_acc.items())
        ]
        calibration = (
            self.profile_ctx_sum / self.profile_ctx_n if self.profile_ctx_n else 0.0
        )
        self.profile_acc = {}
        self.profile_ctx_sum = 0.0
        self.profile_ctx_n = 0
        return ProfileTable(entries=entries, context_calibration=calibration)


def run_experiment(
    config: SimConfig, trace: list[TraceEvent], log: EventLog | None = None
) -> ExperimentResult:
    """Run a full experiment; deterministic in (config, trace, seed)."""
    return Engine(config, trace, log).run()
