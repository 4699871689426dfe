"""Experiment configuration and the flat key/value config-file format.

Config files are plain text, one ``namespace.key = value`` per line, with
``#`` comments.  Namespaces map to the sections below; unknown namespaces or
keys are errors so typos fail loudly.
"""
from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Iterable

from ..domain import CostModel
from .models import GenerationModel, LengthDistribution, TrainerModel


class ConfigError(ValueError):
    pass


class Mode(enum.Enum):
    HYBRID = "hybrid"
    COLOCATED = "colocated"
    DISAGG_BALANCED = "disagg_balanced"


MODEL_BYTES_PRESETS = {  # 2 bytes/param
    "8b": 16e9,
    "14b": 28e9,
    "32b": 64e9,
}


@dataclass
class SchedulerConfig:
    # eta must exceed n_resv / min_expected_instances or the window update
    # oscillates (the feedback loop's gain is ~n_resv / (instances * eta))
    eta: float = 4.0
    t_init_seconds: float = 0.0  # 0 = estimate from the generation model
    memory_enabled: bool = True
    seeding_enabled: bool = True  # False = blind offload (ablation baseline)


@dataclass
class LoadBalancerConfig:
    theta: int = 4
    epsilon_plateau: float = 0.05
    lb_tick_seconds: float = 1.0


@dataclass
class TransferConfig:
    model_bytes: float = 28e9        # 14B preset
    model_preset: str = ""           # "8b" / "14b" / "32b"; overrides model_bytes
    agent_egress: float = 25e9       # bytes/sec (200 Gbps NIC)
    instance_ingress: float = 6.25e9 # bytes/sec (50 Gbps vNIC)
    staging_delay: float = 0.0       # GPU -> host buffer copy, unquantified upstream
    synchronized: bool = False       # baseline: broadcast only at step boundaries
    agents_per_node: int = 1

    def resolved_model_bytes(self) -> float:
        if self.model_preset:
            key = self.model_preset.lower()
            if key not in MODEL_BYTES_PRESETS:
                raise ConfigError(f"unknown model preset {self.model_preset!r}")
            return MODEL_BYTES_PRESETS[key]
        return self.model_bytes


@dataclass
class SimConfig:
    """Desk-scale defaults; see ``paper_scale_config`` for the reference setup."""

    seed: int = 0
    steps: int = 20
    prompt_count: int = 128
    group_size: int = 4
    m_b: int = 16
    max_response_len: int = 14336
    prompt_len_min: int = 128
    prompt_len_max: int = 384
    mode: Mode = Mode.HYBRID
    n_resv: int = 4
    local_speed_factor: float = 1.0
    mode_switch_delay: float = 2.0
    max_concurrency: int = 16  # engine admission cap, ~1.5x the batching plateau
    migration: str = "migrate"       # "migrate" | "recompute" (fault-handling ablation)
    disagg_pool_size: int = -1       # -1 = closed-form balanced size
    generation: GenerationModel = field(default_factory=GenerationModel)
    trainer: TrainerModel = field(default_factory=TrainerModel)
    length: LengthDistribution = field(default_factory=LengthDistribution)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    load_balancer: LoadBalancerConfig = field(default_factory=LoadBalancerConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    cost: CostModel = field(default_factory=CostModel)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.prompt_count <= 0 or self.group_size <= 0:
            raise ConfigError("prompt_count and group_size must be positive")
        if self.m_b <= 0:
            raise ConfigError("m_b must be positive")
        if not 0 < self.prompt_len_min <= self.prompt_len_max:
            raise ConfigError("bad prompt length range")
        if self.migration not in ("migrate", "recompute"):
            raise ConfigError(f"unknown migration policy {self.migration!r}")
        if self.n_resv <= 0:
            raise ConfigError("n_resv must be positive")
        if self.max_concurrency <= 0:
            raise ConfigError("max_concurrency must be positive")

    @property
    def requests_per_step(self) -> int:
        return self.prompt_count * self.group_size


def desk_config(**overrides) -> SimConfig:
    """The calibrated desk-scale profile used by reports and ablations."""
    return dataclasses.replace(SimConfig(), **overrides)


def paper_scale_config(**overrides) -> SimConfig:
    """Reference workload shape: 128 prompts x group size 8."""
    cfg = SimConfig(prompt_count=128, group_size=8)
    return dataclasses.replace(cfg, **overrides)


def balanced_pool_size(config: SimConfig) -> int:
    """Smallest remote pool making pure-remote rollout fit under training time."""
    requests = config.requests_per_step
    gen_tokens = requests * config.length.mean_tokens
    mean_prompt = (config.prompt_len_min + config.prompt_len_max) / 2.0
    trained_tokens = requests * (mean_prompt + config.length.mean_tokens)
    t_train = (
        config.trainer.fixed_overhead * math.ceil(requests / config.m_b)
        + config.trainer.per_token_time * trained_tokens
    )
    if t_train <= 0:
        raise ConfigError("trainer model yields zero training time")
    c_mid = mean_prompt + config.length.mean_tokens / 2.0
    per_instance = config.generation.t_plateau * config.generation.context_factor(c_mid)
    return max(1, math.ceil(gen_tokens / (per_instance * t_train)))


_SECTIONS = {
    "sim": None,  # root-level fields
    "scheduler": "scheduler",
    "load_balancer": "load_balancer",
    "generation": "generation",
    "trainer": "trainer",
    "length": "length",
    "transfer": "transfer",
    "cost": "cost",
}

_ROOT_EXCLUDED = set(_SECTIONS.values()) - {None}


def _coerce(raw: str, target_type, key: str):
    raw = raw.strip()
    if target_type is bool:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected bool, got {raw!r}")
    if target_type is int:
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected int, got {raw!r}") from exc
    if target_type is float:
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected float, got {raw!r}") from exc
    if isinstance(target_type, type) and issubclass(target_type, enum.Enum):
        try:
            return target_type(raw.lower())
        except ValueError as exc:
            raise ConfigError(
                f"{key}: expected one of {[m.value for m in target_type]}, got {raw!r}"
            ) from exc
    return raw.strip("\"'")


def apply_overrides(config: SimConfig, items: Iterable[tuple[str, str, int]]) -> SimConfig:
    """Apply (dotted_key, raw_value, lineno) overrides onto a config copy."""
    cfg = dataclasses.replace(config)
    for section_name in _ROOT_EXCLUDED:
        setattr(cfg, section_name, dataclasses.replace(getattr(cfg, section_name)))
    for dotted, raw, lineno in items:
        where = f"line {lineno}: {dotted}"
        if "." not in dotted:
            raise ConfigError(f"{where}: keys are namespaced as section.key")
        section, key = dotted.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"{where}: unknown section {section!r}")
        target = cfg if _SECTIONS[section] is None else getattr(cfg, _SECTIONS[section])
        fields = {f.name: f for f in dataclasses.fields(target)}
        if section == "sim":
            fields = {k: v for k, v in fields.items() if k not in _ROOT_EXCLUDED}
        if key not in fields:
            raise ConfigError(f"{where}: unknown key {key!r} in section {section!r}")
        current = getattr(target, key)
        target_type = type(current) if current is not None else str
        setattr(target, key, _coerce(raw, target_type, where))
    cfg.validate()
    cfg.generation.__post_init__()
    cfg.trainer.__post_init__()
    cfg.length.__post_init__()
    return cfg


def parse_config_text(text: str, base: SimConfig | None = None) -> SimConfig:
    items = []
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw_line!r}")
        key, value = line.split("=", 1)
        items.append((key.strip(), value.strip(), lineno))
    return apply_overrides(base or SimConfig(), items)


def load_config(path: str, base: SimConfig | None = None) -> SimConfig:
    with open(path) as fh:
        return parse_config_text(fh.read(), base)


def config_to_text(config: SimConfig) -> str:
    """Dump every key in config-file syntax (round-trips through the parser)."""
    lines = []
    for section, attr in _SECTIONS.items():
        target = config if attr is None else getattr(config, attr)
        for f in dataclasses.fields(target):
            if section == "sim" and f.name in _ROOT_EXCLUDED:
                continue
            value = getattr(target, f.name)
            if isinstance(value, enum.Enum):
                value = value.value
            lines.append(f"{section}.{f.name} = {value}")
    return "\n".join(lines) + "\n"
