import random

import pytest

from spotrl.sim.models import (
    GenerationModel,
    LengthDistribution,
    TrainerModel,
    instance_throughput,
    sample_response_length,
)

from oracles import censored_lognormal_mean


def test_idle_instance_produces_nothing():
    assert instance_throughput(GenerationModel(), 0, 512.0) == 0.0


def test_single_request_at_reference_context():
    model = GenerationModel()
    assert instance_throughput(model, 1, model.c_ref) == pytest.approx(model.r_single)


def test_plateau_caps_throughput():
    model = GenerationModel(r_single=50.0, t_plateau=500.0, gamma=0.0)
    assert instance_throughput(model, 100, model.c_ref) == pytest.approx(500.0)
    assert instance_throughput(model, 5, model.c_ref) == pytest.approx(250.0)


def test_context_growth_decays_throughput():
    model = GenerationModel()
    near = instance_throughput(model, 8, model.c_ref)
    far = instance_throughput(model, 8, 8 * model.c_ref)
    assert far < near


def test_negative_batch_rejected():
    with pytest.raises(ValueError):
        instance_throughput(GenerationModel(), -1, 100.0)


def test_analytic_plateau():
    assert GenerationModel(r_single=50.0, t_plateau=500.0).analytic_plateau() == 10
    assert GenerationModel(r_single=30.0, t_plateau=400.0).analytic_plateau() == 14


def test_model_validation():
    with pytest.raises(ValueError):
        GenerationModel(r_single=0.0)
    with pytest.raises(ValueError):
        GenerationModel(r_single=100.0, t_plateau=50.0)


def test_trainer_duration():
    trainer = TrainerModel(fixed_overhead=0.5, per_token_time=1e-4)
    assert trainer.duration(10_000) == pytest.approx(1.5)


def test_zero_variance_lengths_are_constant():
    rng = random.Random(0)
    params = LengthDistribution(mean_tokens=200.0, sigma=0.0)
    draws = {sample_response_length(rng, params, 14336) for _ in range(50)}
    assert draws == {200}


def test_lengths_respect_cap_and_floor():
    rng = random.Random(1)
    params = LengthDistribution(mean_tokens=5000.0, sigma=1.5)
    for _ in range(20_000):
        n = sample_response_length(rng, params, 14336)
        assert 1 <= n <= 14336


def test_growth_inflates_later_steps():
    params = LengthDistribution(mean_tokens=100.0, sigma=0.0,
                                growth_per_step=1.1)
    rng = random.Random(0)
    first = sample_response_length(rng, params, 14336, step_index=1)
    tenth = sample_response_length(rng, params, 14336, step_index=10)
    assert tenth == pytest.approx(first * 1.1**9, rel=0.01)


def test_empirical_mean_matches_censored_analytic():
    params = LengthDistribution(mean_tokens=320.0, sigma=0.6)
    cap = 14336
    rng = random.Random(42)
    n = 100_000
    total = sum(sample_response_length(rng, params, cap) for _ in range(n))
    analytic = censored_lognormal_mean(params.mu(), params.sigma, 1.0, float(cap))
    assert total / n == pytest.approx(analytic, rel=0.05)


def test_empirical_mean_with_tight_cap():
    # heavy censoring regime: the cap actually bites
    params = LengthDistribution(mean_tokens=320.0, sigma=1.0)
    cap = 500
    rng = random.Random(7)
    n = 100_000
    total = sum(sample_response_length(rng, params, cap) for _ in range(n))
    analytic = censored_lognormal_mean(params.mu(), params.sigma, 1.0, float(cap))
    assert total / n == pytest.approx(analytic, rel=0.05)
