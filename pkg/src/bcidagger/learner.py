"""Dataset aggregation and decoder update rules.

All rules act on the packed decoder matrix ``W = [F_v | b_v | G_v]`` with the
squared loss ``||W z - o||^2``:

* ``ogd`` -- one gradient step on the latest reach, step size ``eta0/sqrt(k)``
* ``ma``  -- ``(1 - lam) W + lam W*_k`` with ``W*_k`` the ridge fit to the latest reach
* ``ftl`` -- ridge fit to every aggregated pair
* ``rls`` -- the same fit maintained by rank-one Sherman-Morrison updates
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .decoder import DecoderParams

RuleKind = Literal["ogd", "ma", "ftl", "rls"]


class DivergenceError(FloatingPointError):
    pass


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass
class AggregatedDataset:
    """Append-only store of ``(z, o)`` pairs grouped by reach."""

    z_dim: int
    o_dim: int
    _Z: list = field(default_factory=list, repr=False)
    _O: list = field(default_factory=list, repr=False)
    steps: list = field(default_factory=list)

    def append_reach(self, Z, O) -> None:
        Z = np.asarray(Z, dtype=float).reshape(-1, self.z_dim)
        O = np.asarray(O, dtype=float).reshape(-1, self.o_dim)
        if Z.shape[0] != O.shape[0]:
            raise ValueError("covariates and oracle actions differ in length")
        self._Z.append(Z)
        self._O.append(O)
        self.steps.append(Z.shape[0])

    @property
    def n_reaches(self) -> int:
        return len(self.steps)

    @property
    def n_pairs(self) -> int:
        return int(sum(self.steps))

    @property
    def reach_boundaries(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.steps)]).astype(int)

    def reach(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Pairs from reach ``k`` (1-based)."""
        return self._Z[k - 1], self._O[k - 1]

    def stacked(self, upto: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        Zs, Os = self._Z[:upto], self._O[:upto]
        if not Zs:
            return np.zeros((0, self.z_dim)), np.zeros((0, self.o_dim))
        return np.vstack(Zs), np.vstack(Os)


@dataclass(frozen=True)
class UpdateRule:
    kind: RuleKind = "ftl"
    eta0: float = 1e-3
    lam: float = 0.9
    reg: float = 0.0
    k_expected: int = 1
    per_step: bool = False

    def __post_init__(self):
        if self.kind not in ("ogd", "ma", "ftl", "rls"):
            raise ValueError(f"unknown update rule {self.kind!r}")
        if self.reg < 0:
            raise ValueError("reg must be nonnegative")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.eta0 <= 0:
            raise ValueError("eta0 must be positive")
        if self.per_step and self.kind != "rls":
            raise ValueError("per-step updates are only supported for rls")

    def step_size(self, k: int) -> float:
        return self.eta0 / np.sqrt(k)


def loss(W, z, o) -> float:
    W = W.as_matrix() if isinstance(W, DecoderParams) else np.asarray(W, dtype=float)
    r = W @ np.asarray(z, dtype=float) - np.asarray(o, dtype=float)
    return float(r @ r)


def batch_losses(W: np.ndarray, Z: np.ndarray, O: np.ndarray) -> np.ndarray:
    R = Z @ W.T - O
    return np.einsum("ij,ij->i", R, R)


def objective_gradient(W: np.ndarray, Z: np.ndarray, O: np.ndarray, penalty: float = 0.0) -> np.ndarray:
    """Gradient of ``sum ||W z - o||^2 + penalty ||W||_F^2``."""
    return 2.0 * (W @ Z.T - O.T) @ Z + 2.0 * penalty * W


def ridge(Z: np.ndarray, O: np.ndarray, reg: float) -> np.ndarray:
    """Solve ``(Z^T Z + reg I) W^T = Z^T O`` for ``W``."""
    p = Z.shape[1]
    M = Z.T @ Z
    if reg > 0:
        M[np.diag_indices(p)] += reg
    B = Z.T @ O
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise RankDeficientError("rank deficient: increase regularization") from None
    if reg == 0 and np.min(np.diag(L)) ** 2 < 1e-12 * max(np.max(np.diag(M)), 1e-300):
        raise RankDeficientError("rank deficient: increase regularization")
    Wt = np.linalg.solve(L.T, np.linalg.solve(L, B))
    return Wt.T


def ftl_update(dataset: AggregatedDataset, reg: float, n_neurons: int | None = None):
    """Follow-the-regularized-leader: ridge fit to all aggregated pairs.

    Returns the packed matrix, or :class:`DecoderParams` if ``n_neurons`` is
    given.
    """
    Z, O = dataset.stacked()
    if Z.shape[0] == 0:
        if reg <= 0:
            raise RankDeficientError("rank deficient: increase regularization")
        W = np.zeros((dataset.o_dim, dataset.z_dim))
    else:
        W = ridge(Z, O, reg)
    return W if n_neurons is None else DecoderParams.from_matrix(W, n_neurons)


def ogd_update(W: np.ndarray, rule: UpdateRule, Z: np.ndarray, O: np.ndarray, k: int) -> np.ndarray:
    """One gradient step on the latest reach with penalty ``reg / K_expected``."""
    with np.errstate(over="ignore", invalid="ignore"):
        grad = objective_gradient(W, Z, O, rule.reg / rule.k_expected)
        if not np.all(np.isfinite(grad)):
            raise DivergenceError("divergence: reduce step size")
        W_new = W - rule.step_size(k) * grad
    if not np.all(np.isfinite(W_new)):
        raise DivergenceError("divergence: reduce step size")
    return W_new


def ma_update(W: np.ndarray, rule: UpdateRule, Z: np.ndarray, O: np.ndarray) -> np.ndarray:
    """Moving average toward the latest reach's ridge solution."""
    if rule.lam == 0.0:
        return np.array(W, dtype=float)
    W_star = ridge(Z, O, rule.reg) if Z.shape[0] else np.zeros_like(W)
    if rule.lam == 1.0:
        return W_star
    return (1.0 - rule.lam) * W + rule.lam * W_star


@dataclass
class RLSState:
    """Running ``P = (Z^T Z + reg I)^{-1}`` and ``W`` for exact incremental FTL."""

    P: np.ndarray
    W: np.ndarray
    reg: float

    @classmethod
    def initial(cls, z_dim: int, o_dim: int, reg: float) -> "RLSState":
        if reg <= 0:
            raise ValueError("RLS needs reg > 0 to initialize P")
        return cls(np.eye(z_dim) / reg, np.zeros((o_dim, z_dim)), reg)


class RLSBreakdown(FloatingPointError):
    pass


def rls_update(state: RLSState, Z, O) -> RLSState:
    """Fold new pairs into ``state`` one at a time (Sherman-Morrison)."""
    P = state.P.copy()
    W = state.W.copy()
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    O = np.atleast_2d(np.asarray(O, dtype=float))
    for z, o in zip(Z, O):
        Pz = P @ z
        denom = 1.0 + z @ Pz
        gain = Pz / denom
        W += np.outer(o - W @ z, gain)
        P -= np.outer(gain, Pz)
    # symmetrize against round-off drift
    P = 0.5 * (P + P.T)
    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(W))):
        raise RLSBreakdown("RLS numerical breakdown")
    return RLSState(P, W, state.reg)


def rls_resolve(dataset: AggregatedDataset, reg: float) -> RLSState:
    """Exact re-solve used to recover from an RLS breakdown."""
    Z, _ = dataset.stacked()
    M = Z.T @ Z + reg * np.eye(dataset.z_dim)
    return RLSState(np.linalg.inv(M), ftl_update(dataset, reg), reg)


@dataclass
class Learner:
    """Holds the decoder matrix and applies one rule after each reach."""

    rule: UpdateRule
    n_neurons: int
    d_dof: int
    W: np.ndarray = None
    rls: RLSState | None = None

    def __post_init__(self):
        z_dim = self.n_neurons + 1 + self.d_dof
        if self.W is None:
            self.W = np.zeros((self.d_dof, z_dim))
        if self.rule.kind == "rls" and self.rls is None:
            self.rls = RLSState.initial(z_dim, self.d_dof, self.rule.reg)

    @property
    def params(self) -> DecoderParams:
        return DecoderParams.from_matrix(self.W, self.n_neurons)

    def observe_step(self, z, o, dataset: AggregatedDataset | None = None) -> None:
        """Per-step RLS refresh (only when ``rule.per_step``)."""
        if self.rule.per_step:
            self._rls_fold(np.atleast_2d(z), np.atleast_2d(o), dataset)

    def _rls_fold(self, Z, O, dataset):
        try:
            self.rls = rls_update(self.rls, Z, O)
        except RLSBreakdown:
            if dataset is None:
                raise
            self.rls = rls_resolve(dataset, self.rule.reg)
        self.W = self.rls.W

    def end_of_reach(self, dataset: AggregatedDataset, k: int) -> None:
        """Update after reach ``k`` has been appended to ``dataset``."""
        Z, O = dataset.reach(k)
        kind = self.rule.kind
        if kind == "ftl":
            self.W = ftl_update(dataset, self.rule.reg)
        elif kind == "ogd":
            if Z.shape[0]:
                self.W = ogd_update(self.W, self.rule, Z, O, k)
        elif kind == "ma":
            if Z.shape[0]:
                self.W = ma_update(self.W, self.rule, Z, O)
        elif not self.rule.per_step:
            self._rls_fold(Z, O, dataset)


@dataclass(frozen=True)
class RegretReport:
    cumulative_loss: float
    hindsight_loss: float
    regret: float
    gamma_K: float
    per_reach_loss: tuple[float, ...]


def hindsight_loss(Z: np.ndarray, O: np.ndarray, reg: float = 0.0) -> float:
    """Data loss of the best fixed decoder for the realized pairs."""
    if Z.shape[0] == 0:
        return 0.0
    W = ridge(Z, O, reg)
    return float(np.sum(batch_losses(W, Z, O)))


def regret(per_reach_losses, dataset: AggregatedDataset, reg: float = 0.0) -> RegretReport:
    """Cumulative executed loss minus the loss of the hindsight-optimal
    decoder fit (ridge with ``reg``) on the same realized data."""
    per_reach = tuple(float(x) for x in per_reach_losses)
    cum = float(sum(per_reach))
    Z, O = dataset.stacked()
    best = hindsight_loss(Z, O, reg)
    r = cum - best
    K = max(len(per_reach), 1)
    return RegretReport(cum, best, r, r / K, per_reach)


class RunningRegret:
    """Regret after every reach from prefix Gram sums (no re-stacking)."""

    def __init__(self, z_dim: int, o_dim: int, reg: float = 0.0):
        self.reg = reg
        self.ZZ = np.zeros((z_dim, z_dim))
        self.ZO = np.zeros((z_dim, o_dim))
        self.OO = 0.0
        self.cumulative = 0.0

    def add(self, Z: np.ndarray, O: np.ndarray, executed_loss: float) -> float:
        self.ZZ += Z.T @ Z
        self.ZO += Z.T @ O
        self.OO += float(np.sum(O * O))
        self.cumulative += executed_loss
        return self.cumulative - self.best()

    def best(self) -> float:
        M = self.ZZ.copy()
        if self.reg > 0:
            M[np.diag_indices_from(M)] += self.reg
            Wt = np.linalg.solve(M, self.ZO)
        else:
            Wt, *_ = np.linalg.lstsq(M, self.ZO, rcond=None)
        # sum ||W z - o||^2 = tr(W ZZ W^T) - 2 tr(W ZO) + sum o^2
        val = float(np.sum(Wt * (self.ZZ @ Wt)) - 2.0 * np.sum(Wt * self.ZO) + self.OO)
        return max(val, 0.0)
