"""Steady-state velocity Kalman filter decoder and oracle-assist blending.

The decoder is the affine recursion

    v' = F_v n + b_v + G_v v
    p' = p + dt v

Position integrates the *previous* velocity; neural activity drives velocity
only. The learnable blocks are packed as ``W = [F_v | b_v | G_v]`` acting on
the covariate ``z = [n; 1; v]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np


@dataclass(frozen=True)
class EffectorState:
    position: np.ndarray
    velocity: np.ndarray
    dt: float = 1.0

    @classmethod
    def at_rest(cls, position, dt: float = 1.0) -> "EffectorState":
        p = np.array(position, dtype=float)
        return cls(p, np.zeros_like(p), dt)


@dataclass(frozen=True)
class DecoderParams:
    F_v: np.ndarray
    b_v: np.ndarray
    G_v: np.ndarray

    @classmethod
    def zeros(cls, d_dof: int, n_neurons: int) -> "DecoderParams":
        return cls(np.zeros((d_dof, n_neurons)), np.zeros(d_dof), np.zeros((d_dof, d_dof)))

    @classmethod
    def from_matrix(cls, W: np.ndarray, n_neurons: int) -> "DecoderParams":
        W = np.asarray(W, dtype=float)
        return cls(W[:, :n_neurons].copy(), W[:, n_neurons].copy(), W[:, n_neurons + 1:].copy())

    @property
    def d_dof(self) -> int:
        return self.F_v.shape[0]

    @property
    def n_neurons(self) -> int:
        return self.F_v.shape[1]

    def as_matrix(self) -> np.ndarray:
        return np.hstack([self.F_v, self.b_v[:, None], self.G_v])


@dataclass(frozen=True)
class AssistSpec:
    """Oracle-assist schedule. ``betas[k-1]`` applies to reach ``k``; the last
    value repeats past the end of the sequence."""

    betas: Sequence[float] = (1.0, 0.0)
    mode: Literal["linear_mix", "probabilistic_mix"] = "linear_mix"
    init_action_noise_sigma: float = 0.0

    def __post_init__(self):
        if len(self.betas) == 0:
            raise ValueError("betas must be nonempty")
        if any(not 0.0 <= b <= 1.0 for b in self.betas):
            raise ValueError("every beta must lie in [0, 1]")
        if self.mode not in ("linear_mix", "probabilistic_mix"):
            raise ValueError(f"unknown assist mode {self.mode!r}")
        if self.init_action_noise_sigma < 0:
            raise ValueError("init_action_noise_sigma must be nonnegative")

    def beta(self, k: int) -> float:
        return float(self.betas[min(k, len(self.betas)) - 1])


def covariate(neural, state: EffectorState) -> np.ndarray:
    return np.concatenate([np.asarray(neural, dtype=float), [1.0], state.velocity])


def decoded_velocity(params: DecoderParams, neural, velocity) -> np.ndarray:
    return params.F_v @ neural + params.b_v + params.G_v @ velocity


def clamp_to_limits(position: np.ndarray, velocity: np.ndarray, limits: np.ndarray | None):
    """Clip positions into ``limits`` (rows ``[min, max]``) and zero the
    velocity of every clipped coordinate."""
    if limits is None:
        return position, velocity
    clipped = np.clip(position, limits[:, 0], limits[:, 1])
    hit = clipped != position
    if hit.any():
        velocity = np.where(hit, 0.0, velocity)
    return clipped, velocity


def advance(state: EffectorState, new_velocity: np.ndarray, limits: np.ndarray | None = None) -> EffectorState:
    """Apply the state transition given the next velocity."""
    p = state.position + state.dt * state.velocity
    p, v = clamp_to_limits(p, np.asarray(new_velocity, dtype=float), limits)
    return EffectorState(p, v, state.dt)


def decode_step(params: DecoderParams, neural, state: EffectorState,
                limits: np.ndarray | None = None) -> EffectorState:
    return advance(state, decoded_velocity(params, neural, state.velocity), limits)


def blend_action(assist: AssistSpec, k: int, oracle_action, decoder_action,
                 rng: np.random.Generator | None = None, *, uniform: float | None = None,
                 noise: np.ndarray | None = None) -> np.ndarray:
    """Executed action for reach ``k``.

    ``uniform`` (a U[0,1) draw for probabilistic mixing) and ``noise``
    (standard-normal, one per coordinate) may be supplied pre-drawn.
    """
    beta = assist.beta(k)
    oracle_action = np.asarray(oracle_action, dtype=float)
    if beta == 1.0:
        if assist.init_action_noise_sigma > 0:
            if noise is None:
                noise = rng.standard_normal(oracle_action.shape)
            return oracle_action + assist.init_action_noise_sigma * noise
        return oracle_action
    if beta == 0.0:
        return np.asarray(decoder_action, dtype=float)
    if assist.mode == "linear_mix":
        return beta * oracle_action + (1.0 - beta) * np.asarray(decoder_action, dtype=float)
    if uniform is None:
        uniform = rng.random()
    return oracle_action if uniform < beta else np.asarray(decoder_action, dtype=float)
