"""Sampling-based trajectory optimisation (MPPI, CEM, TOPDM) and TD3 with demo restarts."""

from .sim import ContractViolation, Env, EnvState, Observation, StepResult
from .envs import make_env
from .planner import PlannerConfig, plan_action, run_episode

__all__ = [
    "ContractViolation",
    "Env",
    "EnvState",
    "Observation",
    "StepResult",
    "PlannerConfig",
    "make_env",
    "plan_action",
    "run_episode",
]
