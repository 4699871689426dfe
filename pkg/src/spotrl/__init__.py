"""Hybrid RL rollout offload onto preemptible instances: orchestration
engine plus a deterministic desk-scale cluster simulator."""

__version__ = "0.1.0"
