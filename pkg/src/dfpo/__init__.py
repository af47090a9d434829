"""Differential policy optimisation for continuous-time control with black-box costs.

A policy is the explicit Euler step of Hamiltonian dynamics driven by a
learned scalar score ``g(s, p)``; training fits ``g`` stage by stage from
scores observed along the policy's own trajectories.
"""
from .diffcore import ScoreNet, batch_loss, finite_diff_check, forward, grad_input, grad_params
from .environments import ConfigError, Environment, EnvSpec, make_env
from .evalharness import EvalReport, RegretCurve, eval_terminal, pointwise_error, regret_estimate
from .hamiltonian import AnalyticHamiltonian, DynamicsOperator, rollout, step
from .trainer import NetConfig, OptConfig, StageSchedule, TrainHistory, make_schedule, policy, train

__version__ = "0.1.0"
