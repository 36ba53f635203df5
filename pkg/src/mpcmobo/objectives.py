"""The four closed-loop objectives scored by the multi-objective optimizer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cdpg import CriticParams, EpisodeLog, policy_gradient, value_approx

NAMES = ("f1", "f2", "f3", "f4")


@dataclass(frozen=True)
class ObjectiveVector:
    f1: float
    f2: float
    f3: float
    f4: float

    def __post_init__(self):
        vals = self.to_array()
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"objectives must be finite, got {vals}")
        if min(self.f2, self.f3, self.f4) < 0:
            raise ValueError("f2, f3 and f4 are nonnegative by construction")

    def to_array(self) -> np.ndarray:
        return np.array([self.f1, self.f2, self.f3, self.f4], dtype=float)


def f1(log: EpisodeLog, gamma: float) -> float:
    """``(1/T) sum_{k=0}^{T} gamma^k L(x_k, pi(x_k))``; the sum includes the terminal state."""
    c = log.cost_pi_trace
    T = len(log)
    return float(np.sum(gamma ** np.arange(T + 1) * c) / T)


def f2(log: EpisodeLog, w) -> float:
    """Mean norm of the per-step policy gradients."""
    return float(np.mean(policy_gradient(log, w)[1]))


def critic_sum(log: EpisodeLog, nu) -> float:
    """``V^c = sum_k V^nu(x_k)`` over the episode."""
    return float(np.sum(value_approx(nu, log.v, log.grad_v)))


def f3(current_vc: float, previous_vc: Optional[float]) -> float:
    """Increase of the critic sum over the previous episode; zero for the first episode."""
    if previous_vc is None:
        return 0.0
    return max(0.0, float(current_vc) - float(previous_vc))


def lyapunov_penalty(values, beta: float = 1.0) -> float:
    """``beta * sum max(0, V_{k+1} - V_k)`` along a value sequence."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    v = np.asarray(values, dtype=float)
    return float(beta * np.sum(np.maximum(0.0, np.diff(v))))


def f4(log: EpisodeLog, beta: float = 1.0) -> float:
    return lyapunov_penalty(log.value_trace, beta)


@dataclass(frozen=True)
class EpisodeScores:
    """Objectives that depend only on one episode, plus the critic sum feeding ``f3``."""

    f1: float
    f2: float
    f4: float
    critic_sum: float

    def with_previous(self, previous_vc: Optional[float]) -> ObjectiveVector:
        return ObjectiveVector(self.f1, self.f2, f3(self.critic_sum, previous_vc), self.f4)


def score_episode(log: EpisodeLog, critic: CriticParams, gamma: float, beta: float = 1.0) -> EpisodeScores:
    return EpisodeScores(f1(log, gamma), f2(log, critic.w), f4(log, beta), critic_sum(log, critic.nu))
