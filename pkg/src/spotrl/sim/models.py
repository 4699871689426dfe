"""Performance models for the simulated cluster.

The generation model is the simplest shape exhibiting the two phenomena the
control loops rely on: decode throughput that rises linearly with batch size
until a plateau, and a hyperbolic decline as the mean context of the
continuous batch grows.  All coefficients are config-exposed.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass


@dataclass
class GenerationModel:
    r_single: float = 50.0        # tokens/sec for a lone request
    t_plateau: float = 500.0      # max decode throughput, tokens/sec
    gamma: float = 5e-4           # per-token context decay coefficient
    prefill_rate: float = 12000.0 # tokens/sec, separate lane from decode
    c_ref: float = 512.0          # context length the rates are quoted at

    def __post_init__(self) -> None:
        if min(self.r_single, self.t_plateau, self.prefill_rate, self.c_ref) <= 0:
            raise ValueError("generation model rates must be positive")
        if self.t_plateau < self.r_single:
            raise ValueError("t_plateau below single-request rate")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")

    def context_factor(self, c_mean: float) -> float:
        return (1.0 + self.gamma * self.c_ref) / (1.0 + self.gamma * c_mean)

    def analytic_plateau(self) -> int:
        """Batch size where the linear regime meets the plateau."""
        return math.ceil(self.t_plateau / self.r_single)


def instance_throughput(model: GenerationModel, b: int, c_mean: float) -> float:
    """Aggregate decode tokens/sec of one instance at batch size ``b``.

    Shared equally among the ``b`` executing requests.
    """
    if b < 0:
        raise ValueError(f"negative batch size {b}")
    if b == 0:
        return 0.0
    return min(b * model.r_single, model.t_plateau) * model.context_factor(c_mean)


@dataclass
class TrainerModel:
    # per_token_time calibrated so co-located rollout:train sits near 7:3
    # under the desk-scale defaults
    fixed_overhead: float = 0.3   # sec per microbatch
    per_token_time: float = 1.25e-4

    def __post_init__(self) -> None:
        if self.fixed_overhead < 0 or self.per_token_time < 0:
            raise ValueError("trainer model times must be non-negative")

    def duration(self, token_count: int) -> float:
        return self.fixed_overhead + self.per_token_time * token_count


@dataclass
class LengthDistribution:
    """Log-normal response lengths, truncated to [1, max_response_len]."""

    mean_tokens: float = 320.0
    sigma: float = 0.6
    growth_per_step: float = 1.0  # optional per-step inflation of the mean

    def __post_init__(self) -> None:
        if self.mean_tokens <= 0 or self.sigma < 0 or self.growth_per_step <= 0:
            raise ValueError("invalid length distribution parameters")

    def mu(self) -> float:
        return math.log(self.mean_tokens) - 0.5 * self.sigma**2


def sample_response_length(
    rng: random.Random,
    params: LengthDistribution,
    max_response_len: int,
    step_index: int = 1,
) -> int:
    inflation = params.growth_per_step ** (step_index - 1)
    if params.sigma == 0:
        raw = params.mean_tokens * inflation
    else:
        raw = rng.lognormvariate(params.mu(), params.sigma) * inflation
    return max(1, min(max_response_len, int(round(raw))))
