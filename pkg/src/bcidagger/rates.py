"""Regret-rate experiments on a stationary linear-Gaussian stream.

Every round draws a batch of covariates ``z ~ N(0, I)`` (plus a constant
column) and targets ``o = W* z + noise``. Each rule commits to a decoder
before seeing the round, and the running regret is measured against the
best fixed decoder on everything seen so far. Because the regret at ``K`` is
the running regret after round ``K``, one long run per repeat yields the
whole regret-vs-K curve.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .learner import RLSState, RunningRegret, UpdateRule, batch_losses, ma_update, ogd_update, rls_update
from .rng import Purpose, stream


@dataclass(frozen=True)
class StreamConfig:
    n_features: int = 5
    o_dim: int = 2
    batch: int = 10
    noise: float = 0.5
    log2_k_min: int = 4
    log2_k_max: int = 12
    n_repeats: int = 20
    base_seed: int = 0
    eta0: float = 0.02
    lam: float = 0.9
    reg: float = 1e-3

    def __post_init__(self):
        for name in ("n_features", "o_dim", "batch", "n_repeats"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.log2_k_min < self.log2_k_max:
            raise ValueError("need 0 <= log2_k_min < log2_k_max")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        UpdateRule(kind="ma", eta0=self.eta0, lam=self.lam, reg=self.reg)
        if self.reg <= 0:
            raise ValueError("reg must be positive (it seeds the incremental solver)")

    @property
    def z_dim(self) -> int:
        return self.n_features + 1

    @property
    def k_max(self) -> int:
        return 2 ** self.log2_k_max

    @property
    def grid(self) -> np.ndarray:
        return 2 ** np.arange(self.log2_k_min, self.log2_k_max + 1)


def draw_stream(config: StreamConfig, repeat: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(W*, Z, O)`` with ``Z`` of shape ``(K, batch, z_dim)``."""
    rng = stream(config.base_seed, Purpose.STREAM, repeat)
    W_star = rng.standard_normal((config.o_dim, config.z_dim))
    K, m = config.k_max, config.batch
    Z = np.empty((K, m, config.z_dim))
    Z[:, :, :-1] = rng.standard_normal((K, m, config.n_features))
    Z[:, :, -1] = 1.0
    O = Z @ W_star.T + config.noise * rng.standard_normal((K, m, config.o_dim))
    return W_star, Z, O


def regret_curve(config: StreamConfig, algo: str, Z: np.ndarray, O: np.ndarray) -> np.ndarray:
    """Running regret after every round (length ``K``)."""
    rule = UpdateRule(kind=algo, eta0=config.eta0, lam=config.lam, reg=config.reg, k_expected=config.k_max)
    W = np.zeros((config.o_dim, config.z_dim))
    rls = RLSState.initial(config.z_dim, config.o_dim, config.reg) if algo in ("ftl", "rls") else None
    tracker = RunningRegret(config.z_dim, config.o_dim)
    out = np.empty(len(Z))
    for i, (Zk, Ok) in enumerate(zip(Z, O)):
        out[i] = tracker.add(Zk, Ok, float(batch_losses(W, Zk, Ok).sum()))
        k = i + 1
        if rls is not None:
            # exact incremental follow-the-leader
            rls = rls_update(rls, Zk, Ok)
            W = rls.W
        elif algo == "ogd":
            W = ogd_update(W, rule, Zk, Ok, k)
        elif algo == "ma":
            W = ma_update(W, rule, Zk, Ok)
        else:
            raise ValueError(f"unknown update rule {algo!r}")
    return out


@dataclass(frozen=True)
class RateFit:
    ftl_r2_logk: float
    ogd_sqrt_ratio: float
    ma_linear_ratio: float


def r_squared(x: np.ndarray, y: np.ndarray) -> float:
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else float("nan")


def run_rates(config: StreamConfig, algos=("ftl", "ogd", "ma")) -> dict[str, np.ndarray]:
    """Regret at every grid ``K`` for every repeat: ``{algo: (repeats, len(grid))}``."""
    idx = config.grid - 1
    out = {a: np.empty((config.n_repeats, len(idx))) for a in algos}
    for r in range(config.n_repeats):
        _, Z, O = draw_stream(config, r)
        for a in algos:
            out[a][r] = regret_curve(config, a, Z, O)[idx]
    return out


def fit_rates(config: StreamConfig, curves: dict[str, np.ndarray]) -> RateFit:
    """Summary statistics for the three growth laws, on repeat-averaged curves.

    * ``ftl_r2_logk``: R^2 of a linear fit of regret against ``log K``
    * ``ogd_sqrt_ratio``: ``(regret/sqrt K)`` at the largest K over the value at
      ``K = 2^8`` (or the smallest K when 2^8 is off the grid)
    * ``ma_linear_ratio``: ``(regret/K)`` at the largest K over the value at half that K
    """
    grid = config.grid.astype(float)
    ftl = curves["ftl"].mean(axis=0)
    ogd = curves["ogd"].mean(axis=0) / np.sqrt(grid)
    ma = curves["ma"].mean(axis=0) / grid
    hit = np.flatnonzero(config.grid == 2 ** 8)
    i8 = int(hit[0]) if hit.size else 0
    return RateFit(r_squared(np.log(grid), ftl), float(ogd[-1] / ogd[i8]), float(ma[-1] / ma[-2]))


def rate_rows(config: StreamConfig, curves: dict[str, np.ndarray]) -> list[dict]:
    rows = []
    n = config.n_repeats
    for algo, M in curves.items():
        for j, K in enumerate(config.grid):
            col = M[:, j]
            se = float(col.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
            rows.append({"algorithm": algo, "K": int(K), "mean_regret": float(col.mean()), "se": se,
                         "regret_over_logK": float(col.mean() / np.log(K)),
                         "regret_over_sqrtK": float(col.mean() / np.sqrt(K)),
                         "regret_over_K": float(col.mean() / K)})
    return rows
