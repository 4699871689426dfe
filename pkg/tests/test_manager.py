import pytest

from spotrl.domain import InstanceStatus, RequestState
from spotrl.events import EventLog
from spotrl.manager import ManagerError, RegistrationResult, RolloutManager


def make_manager(theta=4, m_b=8, cap=4.0, migration="migrate"):
    mgr = RolloutManager(theta=theta, m_b=m_b, log=EventLog(), migration=migration)
    mgr.n_prem_cap = cap
    mgr.begin_step(version=1, now=0.0)
    return mgr


def activate(mgr, instance_id, now=0.0, version=1):
    assert mgr.register_instance(instance_id, 2, now) is RegistrationResult.ACCEPTED
    mgr.mark_pulling(instance_id, now)
    mgr.mark_active(instance_id, version, now)


def add_request(mgr, rid, target=10, prompt=4, now=0.0):
    return mgr.create_request(rid, prompt, target, f"g-{rid}", now)


def test_cap_floor_rejects_above():
    mgr = make_manager(cap=6.8)
    for k in range(6):
        assert mgr.register_instance(f"i{k}", 2, 0.0) is RegistrationResult.ACCEPTED
    assert mgr.register_instance("i6", 2, 0.0) is RegistrationResult.REJECTED_CAP_FULL


def test_cap_zero_rejects_all():
    mgr = make_manager(cap=0.0)
    assert mgr.register_instance("i0", 2, 0.0) is RegistrationResult.REJECTED_CAP_FULL


def test_rejected_instance_accepted_after_preemption_frees_slot():
    mgr = make_manager(cap=1.0)
    assert mgr.register_instance("i0", 2, 0.0) is RegistrationResult.ACCEPTED
    assert mgr.register_instance("i1", 2, 1.0) is RegistrationResult.REJECTED_CAP_FULL
    mgr.on_preempt("i0", 2.0)
    assert mgr.register_instance("i1", 2, 3.0) is RegistrationResult.ACCEPTED


def test_duplicate_registration_errors():
    mgr = make_manager()
    mgr.register_instance("i0", 2, 0.0)
    with pytest.raises(ManagerError, match="duplicate"):
        mgr.register_instance("i0", 2, 1.0)


def test_preempted_id_may_reregister():
    mgr = make_manager()
    activate(mgr, "i0")
    mgr.on_preempt("i0", 5.0)
    assert mgr.register_instance("i0", 2, 6.0) is RegistrationResult.ACCEPTED


def test_version_gating_excludes_stale_instances():
    mgr = make_manager()
    activate(mgr, "fresh", version=1)
    mgr.register_instance("stale", 2, 0.0)
    mgr.mark_active("stale", 1, 0.0)
    mgr.begin_step(version=2, now=10.0)
    mgr.mark_pulling("fresh", 10.0)
    mgr.mark_active("fresh", 2, 11.0)
    assert mgr.serving_ids() == ["fresh"]


def test_dispatch_respects_theta_and_holds_rest():
    mgr = make_manager(theta=2)
    activate(mgr, "i0")
    for k in range(5):
        add_request(mgr, f"r{k}")
    routed = mgr.dispatch(1.0)
    assert [rid for rid, _ in routed] == ["r0", "r1"]
    assert len(mgr.held) == 3
    assert mgr.records["i0"].m_pending == 2


def test_token_stream_and_completion():
    mgr = make_manager()
    activate(mgr, "i0")
    add_request(mgr, "r0", target=5)
    mgr.dispatch(1.0)
    mgr.admit("r0", "i0", 1.0)
    mgr.on_tokens("r0", "i0", 3, 2.0)
    assert len(mgr.requests["r0"].generated) == 3
    mgr.on_tokens("r0", "i0", 2, 3.0)
    mgr.complete("r0", "i0", 3.0)
    assert mgr.requests["r0"].state is RequestState.COMPLETE
    assert mgr.records["i0"].m_exec == 0


def test_tokens_for_unowned_request_is_stream_desync():
    mgr = make_manager()
    activate(mgr, "i0")
    add_request(mgr, "r0")
    with pytest.raises(ManagerError, match="stream desync"):
        mgr.on_tokens("r0", "i0", 1, 1.0)


def test_tokens_on_stale_version_raise():
    mgr = make_manager()
    activate(mgr, "i0")
    add_request(mgr, "r0", target=50)
    mgr.dispatch(1.0)
    mgr.admit("r0", "i0", 1.0)
    mgr.global_version = 2  # step advanced; instance still at v1
    with pytest.raises(ManagerError, match="version"):
        mgr.on_tokens("r0", "i0", 1, 2.0)


def test_migration_preserves_tokens_across_instances():
    mgr = make_manager()
    activate(mgr, "i0")
    activate(mgr, "i1")
    add_request(mgr, "r0", target=10)
    mgr.route_to("r0", "i0", 1.0)
    mgr.admit("r0", "i0", 1.0)
    mgr.on_tokens("r0", "i0", 4, 2.0)
    mgr.migrate_out("r0", 3.0, reason="preempt")
    assert mgr.requests["r0"].state is RequestState.MIGRATING
    assert len(mgr.requests["r0"].generated) == 4
    mgr.route_to("r0", "i1", 4.0)
    mgr.admit("r0", "i1", 4.0)
    mgr.on_tokens("r0", "i1", 6, 5.0)
    mgr.complete("r0", "i1", 5.0)
    req = mgr.requests["r0"]
    assert [leg.tokens for leg in req.route_history] == [4, 6]
    assert len(req.generated) == req.target_len == 10


def test_at_most_one_owner():
    mgr = make_manager()
    activate(mgr, "i0")
    activate(mgr, "i1")
    add_request(mgr, "r0")
    mgr.route_to("r0", "i0", 1.0)
    with pytest.raises(ManagerError):
        mgr.route_to("r0", "i1", 1.0)


def test_preempt_displaces_requests_with_prefixes_and_is_idempotent():
    mgr = make_manager()
    activate(mgr, "i0")
    for k in range(3):
        add_request(mgr, f"r{k}", target=20)
        mgr.route_to(f"r{k}", "i0", 1.0)
    mgr.admit("r0", "i0", 1.0)
    mgr.on_tokens("r0", "i0", 7, 2.0)
    displaced = mgr.on_preempt("i0", 3.0)
    assert displaced == ["r0", "r1", "r2"]
    assert mgr.records["i0"].status is InstanceStatus.PREEMPTED
    assert mgr.records["i0"].m_pending == 0 and mgr.records["i0"].m_exec == 0
    assert len(mgr.requests["r0"].generated) == 7
    assert mgr.on_preempt("i0", 4.0) == []


def test_preempt_during_pull_displaces_nothing():
    mgr = make_manager()
    mgr.register_instance("i0", 2, 0.0)
    mgr.mark_pulling("i0", 0.0)
    assert mgr.on_preempt("i0", 1.0) == []


def test_recompute_policy_discards_progress():
    mgr = make_manager(migration="recompute")
    activate(mgr, "i0")
    add_request(mgr, "r0", target=20)
    mgr.route_to("r0", "i0", 1.0)
    mgr.admit("r0", "i0", 1.0)
    mgr.on_tokens("r0", "i0", 7, 2.0)
    mgr.on_preempt("i0", 3.0)
    assert mgr.requests["r0"].generated == []
    assert mgr.requests["r0"].route_history == []


def complete_n(mgr, instance_id, count, start, target=6, now=None):
    out = []
    for k in range(count):
        rid = f"c{start + k}"
        add_request(mgr, rid, target=target)
        mgr.route_to(rid, instance_id, now or 0.0)
        mgr.admit(rid, instance_id, now or 0.0)
        mgr.on_tokens(rid, instance_id, target, now or 0.0)
        mgr.complete(rid, instance_id, now or 0.0)
        out.append(rid)
    return out


def test_microbatch_gathers_everything_past_threshold():
    mgr = make_manager(m_b=8)
    activate(mgr, "i0")
    complete_n(mgr, "i0", 3, 0)
    assert mgr.seal_microbatch(1.0) is None
    complete_n(mgr, "i0", 3, 3)
    assert mgr.seal_microbatch(2.0) is None
    complete_n(mgr, "i0", 3, 6)
    batch = mgr.seal_microbatch(3.0)
    assert batch is not None and len(batch.responses) == 9


def test_microbatch_burst_in_single_batch():
    mgr = make_manager(m_b=8)
    activate(mgr, "i0")
    complete_n(mgr, "i0", 20, 0)
    batch = mgr.seal_microbatch(1.0)
    assert len(batch.responses) == 20


def test_final_flush_below_threshold():
    mgr = make_manager(m_b=8)
    activate(mgr, "i0")
    complete_n(mgr, "i0", 5, 0)
    assert mgr.seal_microbatch(1.0) is None
    batch = mgr.seal_microbatch(1.0, force=True)
    assert len(batch.responses) == 5


def test_record_step_requires_completion():
    from spotrl.manager import StepAccounting

    mgr = make_manager()
    activate(mgr, "i0")
    add_request(mgr, "r0")
    with pytest.raises(ManagerError, match="before the step completed"):
        mgr.record_step(
            StepAccounting(step_index=1, step_start=0.0, step_end=10.0,
                           t_wait_train=0.0, t_train=1.0, remote_busy_total=0.0,
                           n_bar_prem=0.0, n_hat_prem=0)
        )
