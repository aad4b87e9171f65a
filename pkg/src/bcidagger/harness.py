"""Closed-loop decoder training experiments (dataset aggregation).

A repeat draws a fresh encoder, starts from the all-zero decoder and runs
``K`` reaches. Each reach queries the oracle, simulates neural activity from
the user's intent, decodes, blends with the oracle per the assist schedule,
and appends ``(covariate, oracle action)`` pairs to the aggregated dataset.
The decoder is updated once per reach by the configured rule.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Literal, Sequence

import numpy as np

from . import encoder as enc
from .decoder import AssistSpec, EffectorState, advance, blend_action
from .kinematics import ArmModel, default_arm, load_chain
from .learner import AggregatedDataset, Learner, RunningRegret, UpdateRule
from .oracle import (ArmOracleSettings, ArmWorkspace, CursorWorkspace, GoalSpec, arm_control,
                     cursor_oracle, sample_goal, wand_points_for)
from .rng import Purpose, stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    task: Literal["cursor", "arm"] = "cursor"
    n_neurons: int = 10
    d_dof: int = 3
    K: int = 50
    T_max: int = 200
    n_repeats: int = 100
    base_seed: int = 0
    algo: Literal["ogd", "ma", "ftl", "rls"] = "ftl"
    eta0: float = 1e-3
    lam: float = 0.9
    reg: float | None = None
    hindsight_reg: float = 0.0
    per_step_rls: bool = False
    betas: tuple[float, ...] = (1.0, 0.0)
    assist_mode: Literal["linear_mix", "probabilistic_mix"] = "linear_mix"
    action_noise: float | None = None
    snr: float = 1.0
    encoder_mode: Literal["gaussian", "rectified"] = "gaussian"
    calibration_samples: int = 1000
    mismatch_mode: Literal["none", "linear_operator", "additive_noise"] = "none"
    mismatch_rho: float = 0.0
    mismatch_operator: str = "random_orthogonal"
    speed: float = 0.1
    epsilon: float = 0.05
    half_width: float = 1.0
    mu: float = 0.1
    max_step: float = 0.05
    delta: float = 0.15
    arm_epsilon: float = 0.01
    arm_low: tuple[float, float, float] = (0.6, -0.8, -1.4)
    arm_high: tuple[float, float, float] = (1.5, 0.8, -0.2)
    arm_chain: str | None = None
    continue_from_end: bool = False
    correlation: bool = False
    correlation_reg: float = 1e-6
    dt: float = 1.0

    def __post_init__(self):
        if self.task not in ("cursor", "arm"):
            raise ValueError(f"unknown task {self.task!r}")
        for name in ("n_neurons", "d_dof", "K", "T_max", "n_repeats", "calibration_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("snr", "speed", "epsilon", "half_width", "mu", "max_step", "delta",
                     "arm_epsilon", "dt", "eta0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.mismatch_rho < 0:
            raise ValueError("mismatch_rho must be nonnegative")
        if self.reg is not None and self.reg < 0:
            raise ValueError("reg must be nonnegative")
        if self.hindsight_reg < 0:
            raise ValueError("hindsight_reg must be nonnegative")
        if self.action_noise is not None and self.action_noise < 0:
            raise ValueError("action_noise must be nonnegative")
        # validate the sub-specs eagerly
        self.update_rule()
        self.assist()

    @property
    def z_dim(self) -> int:
        return self.n_neurons + 1 + self.d_dof

    @property
    def effective_reg(self) -> float:
        return 1e-3 * self.z_dim if self.reg is None else self.reg

    @property
    def oracle_speed(self) -> float:
        return self.speed if self.task == "cursor" else self.max_step

    def update_rule(self) -> UpdateRule:
        return UpdateRule(kind=self.algo, eta0=self.eta0, lam=self.lam, reg=self.effective_reg,
                          k_expected=self.K, per_step=self.per_step_rls)

    def assist(self) -> AssistSpec:
        noise = 0.1 * self.oracle_speed if self.action_noise is None else self.action_noise
        return AssistSpec(tuple(self.betas), self.assist_mode, noise)


@dataclass
class ReachMetrics:
    repeat: int
    k: int
    sse: float
    mse: float
    steps: int
    acquired: bool
    running_regret: float
    gamma_k: float
    assisted: bool


@dataclass
class ReachTrace:
    positions: np.ndarray
    velocities: np.ndarray
    oracle: np.ndarray
    decoded: np.ndarray
    executed: np.ndarray


@dataclass
class RepeatResult:
    repeat: int
    metrics: list[ReachMetrics] = field(default_factory=list)
    correlations: list[tuple[int, int, int, float | None]] = field(default_factory=list)
    traces: dict[int, ReachTrace] = field(default_factory=dict)
    params: list[np.ndarray] = field(default_factory=list)
    dataset: AggregatedDataset | None = None
    encoder: enc.EncoderModel | None = None
    regret: float = float("nan")
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


# --- tasks -----------------------------------------------------------------

class CursorTask:
    def __init__(self, config: ExperimentConfig):
        self.config = config
        h = config.half_width
        self.workspace = CursorWorkspace(np.full(config.d_dof, -h), np.full(config.d_dof, h))
        # the cursor cannot leave the screen; an untrained decoder with an
        # unstable velocity feedback would otherwise run off to infinity
        self.limits = np.column_stack([self.workspace.low, self.workspace.high])

    def rest_state(self) -> EffectorState:
        return EffectorState.at_rest(np.zeros(self.config.d_dof), self.config.dt)

    def sample_goal(self, rng) -> GoalSpec:
        return sample_goal("cursor", rng, self.workspace, epsilon=self.config.epsilon)

    def observe(self, state: EffectorState, goal: GoalSpec) -> tuple[bool, np.ndarray]:
        """(acquired, oracle action) at ``state``."""
        o = cursor_oracle(state, goal, self.config.speed)
        diff = goal.target - state.position
        return bool(diff @ diff <= goal.epsilon**2), o

    def calibration_actions(self, rng, n: int) -> np.ndarray:
        rest = self.rest_state()
        return np.array([cursor_oracle(rest, self.sample_goal(rng), self.config.speed) for _ in range(n)])


class ArmTask:
    def __init__(self, config: ExperimentConfig, arm: ArmModel | None = None):
        self.config = config
        if arm is None:
            arm = load_chain(config.arm_chain, config.delta) if config.arm_chain else default_arm(config.delta)
        if arm.d_dof != config.d_dof:
            raise ValueError(f"arm has {arm.d_dof} joints but d_dof={config.d_dof}")
        self.arm = arm
        self.limits = np.asarray(arm.limits)
        self.settings = ArmOracleSettings(mu=config.mu, max_step=config.max_step)
        self.workspace = ArmWorkspace(np.asarray(config.arm_low, float), np.asarray(config.arm_high, float),
                                      epsilon=config.arm_epsilon, horizon=config.T_max)

    def rest_state(self) -> EffectorState:
        return EffectorState.at_rest(self.arm.rest_pose(), self.config.dt)

    def sample_goal(self, rng) -> GoalSpec:
        return sample_goal("arm", rng, self.workspace, arm=self.arm, settings=self.settings)

    def observe(self, state: EffectorState, goal: GoalSpec) -> tuple[bool, np.ndarray]:
        cost, phase, dq = arm_control(self.arm, state.position, goal, state.dt, self.settings)
        return bool(phase == "grasp" and cost < goal.epsilon), dq

    def calibration_actions(self, rng, n: int) -> np.ndarray:
        """Oracle actions at the rest pose toward anchors drawn uniformly from
        the workspace box (no reachability screening)."""
        rest = self.arm.rest_pose()
        wand = wand_points_for(self.arm, rest)
        out = []
        for _ in range(n):
            goal = GoalSpec(rng.uniform(self.workspace.low, self.workspace.high), self.workspace.epsilon, wand)
            out.append(arm_control(self.arm, rest, goal, self.config.dt, self.settings)[2])
        return np.array(out)


def make_task(config: ExperimentConfig):
    return CursorTask(config) if config.task == "cursor" else ArmTask(config)


# --- encoder setup ---------------------------------------------------------

def calibration_actions(config: ExperimentConfig, task=None) -> np.ndarray:
    """Oracle actions shared by every repeat for SNR calibration."""
    task = make_task(config) if task is None else task
    return task.calibration_actions(stream(config.base_seed, Purpose.CALIBRATION), config.calibration_samples)


def build_encoder(config: ExperimentConfig, repeat: int, calib: np.ndarray) -> enc.EncoderModel:
    model = enc.sample_encoder(stream(config.base_seed, Purpose.ENCODER, repeat),
                               config.n_neurons, config.d_dof, config.encoder_mode)
    return enc.calibrate_snr(model, calib, config.snr)


def random_orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    return Q * np.sign(np.diag(R))


def mismatch_spec(config: ExperimentConfig, repeat: int) -> enc.IntentMismatchSpec:
    if config.mismatch_mode == "none":
        return enc.IntentMismatchSpec()
    if config.mismatch_mode == "additive_noise":
        return enc.IntentMismatchSpec("additive_noise", noise_fraction=config.mismatch_rho)
    spec = config.mismatch_operator.strip()
    if spec == "random_orthogonal":
        op = random_orthogonal(stream(config.base_seed, Purpose.MISMATCH, repeat, 0), config.d_dof)
    elif spec == "identity":
        op = np.eye(config.d_dof)
    else:
        vals = np.array([float(v) for v in spec.split(",")])
        if vals.size != config.d_dof**2:
            raise ValueError("mismatch_operator needs d_dof*d_dof comma-separated values")
        op = vals.reshape(config.d_dof, config.d_dof)
    return enc.IntentMismatchSpec("linear_operator", operator=op)


# --- the closed loop -------------------------------------------------------

@dataclass
class ReachOutcome:
    Z: np.ndarray
    O: np.ndarray
    sse: float
    steps: int
    acquired: bool
    final_state: EffectorState
    trace: ReachTrace | None


def run_reach(task, encoder_model: enc.EncoderModel, learner: Learner, assist: AssistSpec,
              mismatch: enc.IntentMismatchSpec, goal: GoalSpec, state: EffectorState, k: int,
              T_max: int, rngs: dict, dataset: AggregatedDataset | None = None,
              keep_trace: bool = False) -> ReachOutcome:
    """One reach of the closed loop.

    ``rngs`` maps :class:`Purpose` to generators for this reach; each is
    consumed as a ``T_max``-row block so row ``t`` belongs to step ``t``.
    """
    N, D = encoder_model.n_neurons, encoder_model.d_dof
    A = encoder_model.A
    sigma = encoder_model.noise_sigma
    neural_noise = rngs[Purpose.NEURAL].standard_normal((T_max, N))
    assist_noise = rngs[Purpose.ASSIST].standard_normal((T_max, D))
    mix_u = rngs[Purpose.MIXING].random(T_max)
    directions = rngs[Purpose.MISMATCH].standard_normal((T_max, D))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    beta = assist.beta(k)
    limits = task.limits

    Z = np.empty((T_max, N + 1 + D))
    O = np.empty((T_max, D))
    trace_rows = [] if keep_trace else None
    sse = 0.0
    t = 0
    acquired, o = task.observe(state, goal)
    while not acquired and t < T_max:
        intent = enc.apply_intent_mismatch(mismatch, o, direction=directions[t])
        n = A @ intent
        if sigma:
            n = n + sigma * neural_noise[t]
        z = Z[t]
        z[:N] = n
        z[N] = 1.0
        z[N + 1:] = state.velocity
        O[t] = o
        W = learner.W
        decoded = W @ z
        r = decoded - o
        sse += float(r @ r)
        if beta == 0.0:
            executed = decoded
        else:
            executed = blend_action(assist, k, o, decoded, uniform=mix_u[t], noise=assist_noise[t])
        if keep_trace:
            trace_rows.append((state.position, state.velocity, o, decoded, executed))
        if learner.rule.per_step:
            learner.observe_step(z, o, dataset)
        state = advance(state, executed, limits)
        if not np.all(np.isfinite(state.position)):
            raise FloatingPointError(f"effector state diverged in reach {k}")
        t += 1
        acquired, o = task.observe(state, goal)

    trace = None
    if keep_trace:
        if trace_rows:
            cols = [np.array(c) for c in zip(*trace_rows)]
        else:
            cols = [np.zeros((0, D))] * 5
        trace = ReachTrace(*cols)
    return ReachOutcome(Z[:t].copy(), O[:t].copy(), sse, t, acquired, state, trace)


class EncoderRegression:
    """Running ridge estimate of the encoding matrix from aggregated pairs."""

    def __init__(self, n_neurons: int, d_dof: int, reg: float):
        self.OO = np.zeros((d_dof, d_dof))
        self.ON = np.zeros((d_dof, n_neurons))
        self.reg = reg

    def add(self, O: np.ndarray, Nrl: np.ndarray) -> None:
        self.OO += O.T @ O
        self.ON += O.T @ Nrl

    def estimate(self) -> np.ndarray:
        d = self.OO.shape[0]
        return np.linalg.solve(self.OO + self.reg * np.eye(d), self.ON).T


def pearson(x: np.ndarray, y: np.ndarray, tol: float = 1e-12) -> float | None:
    """Pearson correlation, or ``None`` when either input is constant."""
    xc = x - x.mean()
    yc = y - y.mean()
    nx = np.sqrt(xc @ xc)
    ny = np.sqrt(yc @ yc)
    if nx <= tol * max(1.0, np.abs(x).max()) or ny <= tol * max(1.0, np.abs(y).max()):
        return None
    return float(np.clip((xc @ yc) / (nx * ny), -1.0, 1.0))


def encoder_correlation(O: np.ndarray, neural: np.ndarray, A_true: np.ndarray,
                        reg: float = 1e-6) -> list[float | None]:
    """Fit ``n ~ A o`` by ridge and correlate each estimated column with the
    true one across neurons."""
    if O.shape[0] < 2:
        raise ValueError("need at least 2 pairs")
    est = EncoderRegression(A_true.shape[0], A_true.shape[1], reg)
    est.add(O, neural)
    A_hat = est.estimate()
    return [pearson(A_hat[:, d], A_true[:, d]) for d in range(A_true.shape[1])]


class _RepeatBook:
    """Per-repeat state shared by the scalar and batched engines: learner,
    aggregated data, running regret and metric rows."""

    def __init__(self, config: ExperimentConfig, repeat: int, encoder_model: enc.EncoderModel,
                 keep_params: bool = False):
        N, D = config.n_neurons, config.d_dof
        if encoder_model.A.shape != (N, D):
            raise ValueError("encoder shape does not match config")
        self.config = config
        self.encoder = encoder_model
        self.mismatch = mismatch_spec(config, repeat)
        self.learner = Learner(config.update_rule(), N, D)
        self.dataset = AggregatedDataset(config.z_dim, D)
        self.running = RunningRegret(config.z_dim, D, config.hindsight_reg)
        self.corr_fit = EncoderRegression(N, D, config.correlation_reg) if config.correlation else None
        self.keep_params = keep_params
        self.result = RepeatResult(repeat, encoder=encoder_model)

    def start_reach(self) -> None:
        if self.keep_params:
            self.result.params.append(self.learner.W.copy())

    def finish_reach(self, k: int, Z, O, sse: float, steps: int, acquired: bool, beta: float) -> None:
        cfg = self.config
        N = cfg.n_neurons
        self.dataset.append_reach(Z, O)
        regret_k = self.running.add(Z, O, sse)
        self.learner.end_of_reach(self.dataset, k)
        if not np.all(np.isfinite(self.learner.W)):
            raise FloatingPointError(f"decoder diverged after reach {k}")
        r = self.result
        r.metrics.append(ReachMetrics(r.repeat, k, sse, sse / steps if steps else 0.0, steps,
                                      acquired, regret_k, regret_k / k, beta > 0))
        if self.corr_fit is not None:
            self.corr_fit.add(O, Z[:, :N])
            if self.dataset.n_pairs >= 2:
                A_hat = self.corr_fit.estimate()
                for d in range(cfg.d_dof):
                    r.correlations.append((r.repeat, k, d, pearson(A_hat[:, d], self.encoder.A[:, d])))

    def close(self, keep_dataset: bool = False) -> RepeatResult:
        r = self.result
        if self.keep_params:
            r.params.append(self.learner.W.copy())
        if keep_dataset:
            r.dataset = self.dataset
        r.regret = r.metrics[-1].running_regret if r.metrics else 0.0
        return r

    def fail(self, exc: Exception) -> RepeatResult:
        log.warning("repeat %d failed: %s", self.result.repeat, exc)
        self.result.error = f"{type(exc).__name__}: {exc}"
        return self.result


_FAILURES = (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError)


def reach_streams(config: ExperimentConfig, repeat: int, k: int) -> dict:
    return {p: stream(config.base_seed, p, repeat, k)
            for p in (Purpose.NEURAL, Purpose.ASSIST, Purpose.MIXING, Purpose.MISMATCH)}


def run_repeat(config: ExperimentConfig, repeat: int, calib: np.ndarray | None = None,
               encoder_model: enc.EncoderModel | None = None, keep_traces: bool = False,
               keep_params: bool = False, keep_dataset: bool = False, task=None) -> RepeatResult:
    """One repeat through the scalar (reference) closed loop."""
    task = make_task(config) if task is None else task
    if encoder_model is None:
        if calib is None:
            calib = calibration_actions(config, task)
        encoder_model = build_encoder(config, repeat, calib)
    try:
        book = _RepeatBook(config, repeat, encoder_model, keep_params)
    except _FAILURES as exc:
        return RepeatResult(repeat, encoder=encoder_model, error=f"{type(exc).__name__}: {exc}")
    assist = config.assist()
    try:
        state = task.rest_state()
        for k in range(1, config.K + 1):
            if not config.continue_from_end or k == 1:
                state = task.rest_state()
            goal = task.sample_goal(stream(config.base_seed, Purpose.GOAL, repeat, k))
            book.start_reach()
            out = run_reach(task, encoder_model, book.learner, assist, book.mismatch, goal, state, k,
                            config.T_max, reach_streams(config, repeat, k), book.dataset, keep_traces)
            state = out.final_state
            if keep_traces:
                book.result.traces[k] = out.trace
            book.finish_reach(k, out.Z, out.O, out.sse, out.steps, out.acquired, assist.beta(k))
    except _FAILURES as exc:
        return book.fail(exc)
    return book.close(keep_dataset)


def _rowdot(M: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Batched ``M[r] @ x[r]`` as an explicit product-and-sum, so each row's
    result does not depend on the batch it was computed in."""
    return (M * x[:, None, :]).sum(axis=-1)


def run_cursor_batch(config: ExperimentConfig, encoders: Sequence[enc.EncoderModel],
                     repeats: Sequence[int], keep_params: bool = False,
                     keep_dataset: bool = False) -> list[RepeatResult]:
    """Cursor repeats advanced in lockstep, one reach at a time.

    Each repeat consumes exactly the random blocks the scalar loop would, so
    the two engines agree to round-off; this one is just much faster.
    """
    if config.task != "cursor" or config.per_step_rls:
        raise ValueError("batched engine supports the cursor task without per-step updates")
    N, D = config.n_neurons, config.d_dof
    T, dt = config.T_max, config.dt
    task = CursorTask(config)
    assist = config.assist()
    lo, hi = task.limits[:, 0], task.limits[:, 1]
    eps2 = config.epsilon ** 2

    books: list[_RepeatBook | None] = []
    results: dict[int, RepeatResult] = {}
    for rep, model in zip(repeats, encoders):
        try:
            books.append(_RepeatBook(config, rep, model, keep_params))
        except _FAILURES as exc:
            books.append(None)
            results[rep] = RepeatResult(rep, encoder=model, error=f"{type(exc).__name__}: {exc}")
    A = np.array([m.A for m in encoders])
    sigma = np.array([m.noise_sigma for m in encoders])
    mode = config.mismatch_mode
    if mode == "linear_operator":
        ops = np.array([b.mismatch.operator if b is not None else np.eye(D) for b in books])
    rho = config.mismatch_rho

    R = len(books)
    pos = np.zeros((R, D))
    vel = np.zeros((R, D))
    for k in range(1, config.K + 1):
        live = [i for i, b in enumerate(books) if b is not None]
        if not live:
            break
        if not config.continue_from_end or k == 1:
            pos[:] = 0.0
            vel[:] = 0.0
        beta = assist.beta(k)
        goals = np.zeros((R, D))
        noise_n = np.zeros((R, T, N))
        noise_a = np.zeros((R, T, D))
        mix_u = np.zeros((R, T))
        dirs = np.ones((R, T, D))
        for i in live:
            rep = books[i].result.repeat
            goals[i] = task.sample_goal(stream(config.base_seed, Purpose.GOAL, rep, k)).target
            rngs = reach_streams(config, rep, k)
            noise_n[i] = rngs[Purpose.NEURAL].standard_normal((T, N))
            noise_a[i] = rngs[Purpose.ASSIST].standard_normal((T, D))
            mix_u[i] = rngs[Purpose.MIXING].random(T)
            dirs[i] = rngs[Purpose.MISMATCH].standard_normal((T, D))
        dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
        for b in books:
            if b is not None:
                b.start_reach()
        W = np.zeros((R, D, config.z_dim))
        for i in live:
            W[i] = books[i].learner.W

        active = np.zeros(R, dtype=bool)
        active[live] = True
        acquired = np.zeros(R, dtype=bool)
        steps = np.zeros(R, dtype=int)
        sse = np.zeros(R)
        Zs = np.zeros((R, T, config.z_dim))
        Os = np.zeros((R, T, D))
        for t in range(T + 1):
            diff = goals - pos
            d2 = (diff * diff).sum(axis=1)
            acquired |= active & (d2 <= eps2)
            active &= ~acquired
            if t == T or not active.any():
                break
            dist = np.sqrt(d2)
            with np.errstate(divide="ignore", invalid="ignore"):
                scale = np.where(dist > config.epsilon, np.minimum(config.speed, dist / dt) / dist, 0.0)
            o = diff * scale[:, None]
            if mode == "linear_operator":
                intent = _rowdot(ops, o)
            elif mode == "additive_noise":
                intent = o + (rho * np.sqrt((o * o).sum(axis=1)))[:, None] * dirs[:, t]
            else:
                intent = o
            n = _rowdot(A, intent) + sigma[:, None] * noise_n[:, t]
            z = np.concatenate([n, np.ones((R, 1)), vel], axis=1)
            decoded = _rowdot(W, z)
            r = decoded - o
            sse += np.where(active, (r * r).sum(axis=1), 0.0)
            Zs[:, t] = z
            Os[:, t] = o
            if beta == 0.0:
                executed = decoded
            elif beta == 1.0:
                executed = o + assist.init_action_noise_sigma * noise_a[:, t] if assist.init_action_noise_sigma > 0 else o
            elif assist.mode == "linear_mix":
                executed = beta * o + (1.0 - beta) * decoded
            else:
                executed = np.where((mix_u[:, t] < beta)[:, None], o, decoded)
            new_pos = pos + dt * vel
            clipped = np.clip(new_pos, lo, hi)
            new_vel = np.where(clipped != new_pos, 0.0, executed)
            pos = np.where(active[:, None], clipped, pos)
            vel = np.where(active[:, None], new_vel, vel)
            steps += active

        for i in live:
            b = books[i]
            n_i = steps[i]
            try:
                b.finish_reach(k, Zs[i, :n_i].copy(), Os[i, :n_i].copy(), float(sse[i]), int(n_i),
                               bool(acquired[i]), beta)
            except _FAILURES as exc:
                results[b.result.repeat] = b.fail(exc)
                books[i] = None
    for b in books:
        if b is not None:
            results[b.result.repeat] = b.close(keep_dataset)
    return [results[rep] for rep in repeats]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    repeats: list[RepeatResult]

    @property
    def metrics(self) -> list[ReachMetrics]:
        return [m for r in self.repeats for m in r.metrics]

    @property
    def failed(self) -> list[RepeatResult]:
        return [r for r in self.repeats if r.failed]

    def sse_matrix(self) -> np.ndarray:
        """(completed repeats) x K array of per-reach SSE."""
        rows = [[m.sse for m in r.metrics] for r in self.repeats if not r.failed]
        return np.array(rows, dtype=float).reshape(len(rows), self.config.K)

    def correlation_array(self) -> np.ndarray:
        """(completed repeats, K, d_dof) correlations; NaN marks undefined."""
        done = [r for r in self.repeats if not r.failed]
        out = np.full((len(done), self.config.K, self.config.d_dof), np.nan)
        for i, r in enumerate(done):
            for _, k, d, val in r.correlations:
                if val is not None:
                    out[i, k - 1, d] = val
        return out


def _worker(args):
    config, repeats, calib, keep_traces = args
    task = make_task(config)
    if config.task == "cursor" and not keep_traces and not config.per_step_rls:
        return run_cursor_batch(config, [build_encoder(config, r, calib) for r in repeats], repeats)
    return [run_repeat(config, r, calib, keep_traces=keep_traces, task=task) for r in repeats]


def thread_cap() -> int:
    env = os.environ.get("BCI_SIM_THREADS")
    if env:
        return max(1, int(env))
    return 1


def run_experiment(config: ExperimentConfig, keep_traces: bool = False, workers: int | None = None,
                   encoder_factory: Callable[[int], enc.EncoderModel] | None = None,
                   keep_params: bool = False, keep_dataset: bool = False,
                   batched: bool | None = None) -> ExperimentResult:
    """Run every repeat. Results are ordered by repeat index regardless of
    how the repeats were scheduled.

    Cursor experiments use the lockstep batched engine unless traces or
    per-step updates are requested (or ``batched=False``).
    """
    task = make_task(config)
    repeats = list(range(config.n_repeats))
    if encoder_factory is not None:
        encoders = [encoder_factory(r) for r in repeats]
        calib = None
        for model in encoders:
            if model.A.shape != (config.n_neurons, config.d_dof):
                raise ValueError("encoder shape does not match config")
    else:
        calib = calibration_actions(config, task)
        encoders = None
    can_batch = config.task == "cursor" and not keep_traces and not config.per_step_rls
    batched = can_batch if batched is None else batched and can_batch
    workers = thread_cap() if workers is None else workers
    if workers > 1 and encoders is None and not keep_params and not keep_dataset:
        chunks = [repeats[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = [r for part in pool.map(_worker, [(config, c, calib, keep_traces) for c in chunks]) for r in part]
    else:
        if encoders is None:
            encoders = [build_encoder(config, r, calib) for r in repeats]
        if batched:
            out = run_cursor_batch(config, encoders, repeats, keep_params, keep_dataset)
        else:
            out = [run_repeat(config, r, encoder_model=encoders[r], keep_traces=keep_traces,
                              keep_params=keep_params, keep_dataset=keep_dataset, task=task)
                   for r in repeats]
    out.sort(key=lambda r: r.repeat)
    return ExperimentResult(config, out)


def mismatch_sweep(config: ExperimentConfig, noise_fractions: Sequence[float], **kwargs) -> dict[float, ExperimentResult]:
    """Additive intention-noise sweep with shared seeds across fractions."""
    out = {}
    for rho in noise_fractions:
        if rho < 0:
            raise ValueError("noise fractions must be nonnegative")
        mode = "additive_noise" if rho > 0 else "none"
        out[rho] = run_experiment(replace(config, mismatch_mode=mode, mismatch_rho=float(rho)), **kwargs)
    return out


# --- summaries ---------------------------------------------------------------

def final_sse(result: ExperimentResult, last: int = 10) -> np.ndarray:
    """Per-repeat mean SSE over the last ``last`` reaches."""
    S = result.sse_matrix()
    return S[:, -last:].mean(axis=1)


def summarize(result: ExperimentResult) -> list[dict]:
    """Per-reach median/mean SSE with a two-standard-error band."""
    S = result.sse_matrix()
    rows = []
    n = S.shape[0]
    for k in range(result.config.K):
        col = S[:, k]
        mean = float(col.mean()) if n else float("nan")
        se = float(col.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
        rows.append({"k": k + 1, "median_sse": float(np.median(col)) if n else float("nan"),
                     "mean_sse": mean, "lo_2se": mean - 2 * se, "hi_2se": mean + 2 * se})
    return rows


def crossing_reach(curve: np.ndarray, threshold: float) -> int | None:
    """First 1-based reach index where ``curve`` reaches ``threshold``."""
    hits = np.flatnonzero(np.nan_to_num(curve, nan=-np.inf) >= threshold)
    return int(hits[0]) + 1 if hits.size else None
