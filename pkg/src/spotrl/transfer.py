"""Pull-based weight distribution.

Each training node hosts a sender agent with the freshest weights staged in
a host buffer.  Rollout instances are paired round-robin with agents and pull
independently; an agent's egress is split equally among its concurrent pulls
and each pull is further capped by the instance's ingress.  Rates are
piecewise-constant, recomputed at every pull start/finish.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)


@dataclass
class TransferAgent:
    agent_id: str
    node_id: str
    egress_bandwidth: float  # bytes/sec
    buffer_version: int = 0
    active_pulls: set[str] = field(default_factory=set)


@dataclass
class PullJob:
    instance_id: str
    agent_id: str
    bytes_total: float
    version: int
    ingress_bandwidth: float
    started_at: float
    bytes_done: float = 0.0
    rate: float = 0.0


class TransferPool:
    """State machine for all agents and in-flight pulls.

    The caller owns the clock: it asks for completion predictions after every
    mutation and calls :meth:`finish` at the predicted instant.  ``epoch``
    increments whenever predictions are invalidated.
    """

    def __init__(self, agents: list[TransferAgent]):
        if not agents:
            raise ValueError("no transfer agents")
        self.agents = {a.agent_id: a for a in sorted(agents, key=lambda a: a.agent_id)}
        self._rr_order = sorted(self.agents)
        self._rr_cursor = 0
        self.staged_version = 0
        self.jobs: dict[str, PullJob] = {}
        self.queued: list[PullJob] = []
        self.epoch = 0
        self._last_update = 0.0

    def pair_agent(self, instance_id: str) -> str:
        """Next agent in the global round-robin; re-pairing is not sticky."""
        agent_id = self._rr_order[self._rr_cursor % len(self._rr_order)]
        self._rr_cursor += 1
        return agent_id

    def stage_complete(self, version: int, now: float) -> list[str]:
        """Weights for ``version`` are in every agent's host buffer.

        Returns the instance ids whose queued pulls just started.
        """
        self._advance(now)
        self.staged_version = version
        for agent in self.agents.values():
            agent.buffer_version = version
        started = []
        still_queued = []
        for job in self.queued:
            if job.version <= version:
                job.started_at = now
                self.jobs[job.instance_id] = job
                self.agents[job.agent_id].active_pulls.add(job.instance_id)
                started.append(job.instance_id)
            else:
                still_queued.append(job)
        self.queued = still_queued
        self._recompute_rates(now)
        return started

    def request_pull(
        self,
        instance_id: str,
        agent_id: str,
        version: int,
        bytes_total: float,
        ingress_bandwidth: float,
        now: float,
    ) -> bool:
        """Start a pull, or queue it until the version is staged.

        Returns True when the transfer started immediately.
        """
        if instance_id in self.jobs:
            raise ValueError(f"{instance_id} already pulling")
        job = PullJob(
            instance_id=instance_id,
            agent_id=agent_id,
            bytes_total=bytes_total,
            version=version,
            ingress_bandwidth=ingress_bandwidth,
            started_at=now,
        )
        if self.agents[agent_id].buffer_version >= version:
            self._advance(now)
            self.jobs[instance_id] = job
            self.agents[agent_id].active_pulls.add(instance_id)
            self._recompute_rates(now)
            return True
        self.queued.append(job)
        return False

    def abort(self, instance_id: str, now: float) -> None:
        """Drop a pull (instance preempted mid-transfer); no version change."""
        self.queued = [j for j in self.queued if j.instance_id != instance_id]
        job = self.jobs.pop(instance_id, None)
        if job is not None:
            self._advance(now)
            self.agents[job.agent_id].active_pulls.discard(instance_id)
            self._recompute_rates(now)

    def finish(self, instance_id: str, now: float) -> PullJob:
        """Complete a pull whose predicted finish time has arrived."""
        self._advance(now)
        job = self.jobs.pop(instance_id)
        remaining = job.bytes_total - job.bytes_done
        if remaining > 1e-6 * max(job.bytes_total, 1.0):
            raise RuntimeError(
                f"pull for {instance_id} finished early: {remaining:.0f} bytes left"
            )
        job.bytes_done = job.bytes_total
        self.agents[job.agent_id].active_pulls.discard(instance_id)
        self._recompute_rates(now)
        return job

    def predictions(self) -> list[tuple[float, str]]:
        """(finish_time, instance_id) for every in-flight pull, current rates."""
        out = []
        for job in self.jobs.values():
            if job.rate <= 0:
                continue
            remaining = max(job.bytes_total - job.bytes_done, 0.0)
            out.append((self._last_update + remaining / job.rate, job.instance_id))
        out.sort()
        return out

    def _advance(self, now: float) -> None:
        dt = now - self._last_update
        if dt < 0:
            raise ValueError(f"time went backwards: {self._last_update} -> {now}")
        for job in self.jobs.values():
            job.bytes_done = min(job.bytes_total, job.bytes_done + job.rate * dt)
        self._last_update = now

    def _recompute_rates(self, now: float) -> None:
        self._last_update = now
        for agent in self.agents.values():
            active = [self.jobs[i] for i in sorted(agent.active_pulls)]
            if not active:
                continue
            share = agent.egress_bandwidth / len(active)
            for job in active:
                job.rate = min(share, job.ingress_bandwidth)
        self.epoch += 1


def build_agents(
    node_count: int, agents_per_node: int, egress_bandwidth: float
) -> list[TransferAgent]:
    agents = []
    for node in range(node_count):
        for k in range(agents_per_node):
            agents.append(
                TransferAgent(
                    agent_id=f"agent-{node}.{k}",
                    node_id=f"node-{node}",
                    egress_bandwidth=egress_bandwidth,
                )
            )
    return agents
