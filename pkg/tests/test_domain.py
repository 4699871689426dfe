import pytest
from hypothesis import given, strategies as st

from spotrl.domain import (
    CostModel,
    InstanceRecord,
    RolloutRequest,
    RouteLeg,
    StepStats,
    compute_cost_dollars,
    compute_cost_efficiency,
    compute_throughput,
    preemptible_instance_seconds,
)


def make_stats(**kw) -> StepStats:
    base = dict(
        step_index=1, t_wait_train=0.0, t_wait_remote=0.0, t_train=10.0,
        t_remote=0.0, n_bar_prem=0.0, n_hat_prem=0, tokens_generated=0,
        tokens_trained=0, step_duration=1.0,
    )
    base.update(kw)
    return StepStats(**base)


def test_throughput_trained_convention():
    stats = make_stats(tokens_generated=131072, tokens_trained=131072,
                       step_duration=128.0)
    report = compute_throughput(stats)
    assert report.trained == pytest.approx(1024.0)
    assert report.combined == pytest.approx(2048.0)


def test_throughput_zero_duration_errors():
    with pytest.raises(ValueError, match="empty step"):
        compute_throughput(make_stats(step_duration=0.0))


def test_cost_efficiency_reserved_only():
    timeline = [make_stats(tokens_trained=10**7, step_duration=7200.0)]
    eff = compute_cost_efficiency(timeline, [], CostModel())
    assert eff == pytest.approx(10**7 / (83.79 * 2))


def test_cost_efficiency_with_preemptible():
    timeline = [make_stats(tokens_trained=10**7, step_duration=7200.0)]
    activity = [("i0", 0.0, 7200.0)]
    dollars = compute_cost_dollars(timeline, activity, CostModel())
    assert dollars == pytest.approx(167.58 + 10.64)


def test_negative_interval_errors():
    with pytest.raises(ValueError, match="negative interval"):
        preemptible_instance_seconds([("i0", 10.0, 5.0)])


def test_request_token_append_tracks_route_tail():
    req = RolloutRequest(request_id="r", prompt_len=4, target_len=10, group_id="g")
    req.route_history.append(RouteLeg("a"))
    req.append_tokens("a", [0, 1, 2])
    assert len(req.generated) == 3
    assert req.route_history[-1].tokens == 3
    with pytest.raises(ValueError):
        req.append_tokens("b", [3])


@given(st.lists(st.integers(min_value=0, max_value=20), min_size=1, max_size=6))
def test_route_history_sums_to_generated(chunks):
    req = RolloutRequest(request_id="r", prompt_len=4, target_len=1000, group_id="g")
    for k, n in enumerate(chunks):
        inst = f"i{k}"
        req.route_history.append(RouteLeg(inst))
        req.append_tokens(inst, list(range(n)))
    assert req.routed_tokens() == len(req.generated)


def test_weight_version_monotone():
    record = InstanceRecord(instance_id="i", gpu_count=2)
    record.set_weight_version(3)
    record.set_weight_version(3)
    with pytest.raises(ValueError):
        record.set_weight_version(2)
