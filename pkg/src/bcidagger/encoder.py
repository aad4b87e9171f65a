"""Synthetic linear-Gaussian neural encoding of intended velocity.

Neural activity is ``n = A @ intent + c`` with ``c ~ N(0, sigma^2 I)``. The
user's intent is the oracle action, optionally corrupted by an intention
mismatch (a fixed linear operator or additive random noise).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

MismatchMode = Literal["none", "linear_operator", "additive_noise"]


@dataclass(frozen=True)
class EncoderModel:
    A: np.ndarray
    noise_sigma: float = 0.0

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        if A.ndim != 2:
            raise ValueError("encoding matrix must be 2-D")
        if not np.all(np.isfinite(A)):
            raise ValueError("encoding matrix has non-finite entries")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        object.__setattr__(self, "A", A)

    @property
    def n_neurons(self) -> int:
        return self.A.shape[0]

    @property
    def d_dof(self) -> int:
        return self.A.shape[1]


@dataclass(frozen=True)
class IntentMismatchSpec:
    mode: MismatchMode = "none"
    operator: np.ndarray | None = None
    noise_fraction: float = 0.0

    def __post_init__(self):
        if self.mode not in ("none", "linear_operator", "additive_noise"):
            raise ValueError(f"unknown mismatch mode {self.mode!r}")
        if self.noise_fraction < 0:
            raise ValueError("noise_fraction must be nonnegative")
        if self.mode == "linear_operator":
            if self.operator is None:
                raise ValueError("linear_operator mismatch needs an operator")
            op = np.asarray(self.operator, dtype=float)
            if op.ndim != 2 or op.shape[0] != op.shape[1] or not np.all(np.isfinite(op)):
                raise ValueError("mismatch operator must be a finite square matrix")
            object.__setattr__(self, "operator", op)


def sample_encoder(rng: np.random.Generator, n_neurons: int, d_dof: int,
                   mode: Literal["gaussian", "rectified"] = "gaussian") -> EncoderModel:
    """Draw ``A`` with i.i.d. standard-normal entries.

    In ``rectified`` mode negative entries are set to zero, so each neuron
    only encodes a subset of the degrees of freedom. Noise is left at zero;
    use :func:`calibrate_snr` to set it.
    """
    if n_neurons < 1 or d_dof < 1:
        raise ValueError("n_neurons and d_dof must be positive")
    A = rng.standard_normal((n_neurons, d_dof))
    if mode == "rectified":
        A = np.maximum(A, 0.0)
    elif mode != "gaussian":
        raise ValueError(f"unknown encoder mode {mode!r}")
    return EncoderModel(A=A, noise_sigma=0.0)


def signal_variance(model: EncoderModel, intent_samples: np.ndarray) -> np.ndarray:
    """Per-neuron variance of ``A @ o`` over a set of intents (population variance)."""
    X = np.atleast_2d(np.asarray(intent_samples, dtype=float))
    return np.var(X @ model.A.T, axis=0)


def calibrate_snr(model: EncoderModel, intent_samples, target_snr: float) -> EncoderModel:
    """Set the noise level so the neuron-averaged SNR equals ``target_snr``.

    SNR for neuron ``i`` is ``var(A_i . o) / sigma^2`` over ``intent_samples``;
    since sigma is shared, ``sigma^2 = mean_i var_i / target_snr``.
    """
    if target_snr <= 0:
        raise ValueError("target_snr must be positive")
    X = np.atleast_2d(np.asarray(intent_samples, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("degenerate calibration set")
    mean_var = float(np.mean(signal_variance(model, X)))
    if not mean_var > 0.0:
        raise ValueError("degenerate calibration set")
    return replace(model, noise_sigma=float(np.sqrt(mean_var / target_snr)))


def empirical_snr(model: EncoderModel, intent_samples) -> float:
    if model.noise_sigma == 0:
        return float("inf")
    return float(np.mean(signal_variance(model, intent_samples)) / model.noise_sigma**2)


def emit(model: EncoderModel, true_intent, rng: np.random.Generator | None = None,
         noise: np.ndarray | None = None) -> np.ndarray:
    """Neural vector for one time step.

    Standard-normal ``noise`` may be passed in pre-drawn (the harness draws a
    block per reach); otherwise it is drawn from ``rng``.
    """
    mean = model.A @ np.asarray(true_intent, dtype=float)
    if model.noise_sigma == 0.0:
        return mean
    if noise is None:
        noise = rng.standard_normal(model.n_neurons)
    return mean + model.noise_sigma * noise


def random_unit_vector(rng: np.random.Generator, d: int) -> np.ndarray:
    g = rng.standard_normal(d)
    return g / np.linalg.norm(g)


def apply_intent_mismatch(spec: IntentMismatchSpec, oracle_action, rng: np.random.Generator | None = None,
                          direction: np.ndarray | None = None) -> np.ndarray:
    """Map the oracle action to the user's actual intent.

    ``direction`` is the random unit vector for additive noise; it is drawn
    from ``rng`` when not supplied.
    """
    o = np.asarray(oracle_action, dtype=float)
    if spec.mode == "none":
        return o
    if spec.mode == "linear_operator":
        return spec.operator @ o
    if spec.noise_fraction == 0.0:
        return o
    if direction is None:
        direction = random_unit_vector(rng, o.shape[0])
    return o + spec.noise_fraction * np.linalg.norm(o) * direction
