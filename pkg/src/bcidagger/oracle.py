"""Intention oracles: goal-directed velocities for the cursor and a
damped-least-squares controller for the kinematic arm."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .decoder import EffectorState
from .kinematics import ArmModel, forward_kinematics, joint_frames, marker_jacobian


@dataclass(frozen=True)
class GoalSpec:
    target: np.ndarray
    epsilon: float
    wand_points: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not np.all(np.isfinite(self.target)):
            raise ValueError("goal target must be finite")


@dataclass(frozen=True)
class TaskObjective:
    phase: Literal["reach", "grasp"]
    terms: tuple[tuple[str, np.ndarray, float], ...]


@dataclass(frozen=True)
class ArmOracleSettings:
    mu: float = 0.1
    max_step: float = 0.05
    reach_weight: float = 1.0
    grasp_weight: float = 1.0
    max_halvings: int = 8


class ArmStateError(ValueError):
    pass


def cursor_oracle(state: EffectorState, goal: GoalSpec, speed: float) -> np.ndarray:
    diff = np.asarray(goal.target, dtype=float) - state.position
    dist = float(np.sqrt(diff @ diff))
    if dist <= goal.epsilon:
        return np.zeros_like(diff)
    return diff * (min(speed, dist / state.dt) / dist)


def objective_for(arm: ArmModel, wrist: np.ndarray, goal: GoalSpec,
                  settings: ArmOracleSettings = ArmOracleSettings()) -> TaskObjective:
    anchor = np.asarray(goal.target, dtype=float)
    # without wand points there is nothing to grasp: a pure reaching goal
    if goal.wand_points is not None and np.linalg.norm(wrist - anchor) <= arm.delta:
        thumb_pt, middle_pt = goal.wand_points
        # the wrist spring stays on so the grasp does not drag the wrist out of range
        return TaskObjective("grasp", (("wrist", anchor, settings.reach_weight),
                                       ("thumb_tip", thumb_pt, settings.grasp_weight),
                                       ("middle_tip", middle_pt, settings.grasp_weight)))
    return TaskObjective("reach", (("wrist", anchor, settings.reach_weight),))


def objective_cost(objective: TaskObjective, markers: dict[str, np.ndarray]) -> float:
    cost = 0.0
    for name, target, weight in objective.terms:
        r = markers[name] - target
        cost += weight * float(r @ r)
    return cost


def arm_objective(arm: ArmModel, q, goal: GoalSpec,
                  settings: ArmOracleSettings = ArmOracleSettings()) -> tuple[float, TaskObjective]:
    """Phase-dependent spring cost: wrist-to-anchor while reaching, then
    fingertips-to-wand-points once the wrist is within ``arm.delta``."""
    markers = forward_kinematics(arm, q)
    objective = objective_for(arm, markers["wrist"], goal, settings)
    return objective_cost(objective, markers), objective


def dls_step(J: np.ndarray, r: np.ndarray, mu: float) -> np.ndarray:
    """Damped least squares: ``J^T (J J^T + mu^2 I)^{-1} r``."""
    m = J.shape[0]
    return J.T @ np.linalg.solve(J @ J.T + mu * mu * np.eye(m), r)


def arm_control(arm: ArmModel, q, goal: GoalSpec, dt: float = 1.0,
                settings: ArmOracleSettings = ArmOracleSettings()) -> tuple[float, str, np.ndarray]:
    """Current objective cost, phase and oracle joint velocity in one pass."""
    q = np.asarray(q, dtype=float)
    frames = joint_frames(arm, q, arm._needed)
    R, P = frames
    markers = {name: P[ji] + R[ji] @ local for name, (ji, local) in arm.markers.items()}
    objective = objective_for(arm, markers["wrist"], goal, settings)
    cost = objective_cost(objective, markers)
    if not np.isfinite(cost):
        raise ArmStateError("invalid arm state")
    if cost < goal.epsilon:
        return cost, objective.phase, np.zeros_like(q)

    residuals = []
    jacobians = []
    for name, target, weight in objective.terms:
        w = np.sqrt(weight)
        residuals.append(w * (target - markers[name]))
        jacobians.append(w * marker_jacobian(arm, q, name, frames))
    step = dls_step(np.vstack(jacobians), np.concatenate(residuals), settings.mu)
    peak = np.max(np.abs(step))
    if peak > settings.max_step:
        step *= settings.max_step / peak

    limits = arm.limits
    for _ in range(settings.max_halvings + 1):
        cand = np.clip(q + step, limits[:, 0], limits[:, 1])
        if objective_cost(objective, forward_kinematics(arm, cand)) <= cost:
            return cost, objective.phase, (cand - q) / dt
        step *= 0.5
    return cost, objective.phase, np.zeros_like(q)


def arm_oracle(arm: ArmModel, q, goal: GoalSpec, dt: float = 1.0,
               settings: ArmOracleSettings = ArmOracleSettings()) -> np.ndarray:
    """One-step optimal-control joint velocity toward the current objective.

    The DLS step is scaled so its largest joint move is at most
    ``max_step``, clipped to the joint limits, and halved (up to
    ``max_halvings`` times) until the cost does not increase. Returns zeros
    when the cost is already under the acquisition threshold or no halving
    helps.
    """
    return arm_control(arm, q, goal, dt, settings)[2]


# --- goal sampling ---------------------------------------------------------

@dataclass(frozen=True)
class CursorWorkspace:
    low: np.ndarray
    high: np.ndarray


@dataclass(frozen=True)
class ArmWorkspace:
    low: np.ndarray
    high: np.ndarray
    epsilon: float = 0.01
    horizon: int = 150
    max_attempts: int = 1000


GRASP_FLEXION = {
    "thumb_cmc_flex": 0.3, "thumb_mcp": 0.4, "thumb_ip": 0.3,
    "middle_mcp": 0.5, "middle_pip": 0.5, "middle_dip": 0.2,
}


def reach_pose(arm: ArmModel, anchor: np.ndarray, horizon: int, tol: float = 0.02,
               settings: ArmOracleSettings = ArmOracleSettings()) -> np.ndarray | None:
    """Wrist-only DLS from rest toward ``anchor``; ``None`` if it stalls."""
    q = arm.rest_pose()
    limits = arm.limits
    for _ in range(horizon):
        frames = joint_frames(arm, q, arm._needed)
        ji, local = arm.markers["wrist"]
        r = anchor - (frames[1][ji] + frames[0][ji] @ local)
        if r @ r <= tol * tol:
            return q
        step = dls_step(marker_jacobian(arm, q, "wrist", frames), r, settings.mu)
        peak = np.max(np.abs(step))
        if peak > settings.max_step:
            step *= settings.max_step / peak
        q = np.clip(q + step, limits[:, 0], limits[:, 1])
    return None


def wand_points_for(arm: ArmModel, q_reach: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thumb and middle-fingertip contact points: where the fingertips land
    when the hand at ``q_reach`` closes into a nominal grasp. A zero-cost
    grasp therefore exists with the wrist at the reach pose."""
    q = np.array(q_reach, dtype=float)
    names = arm.names
    for name, angle in GRASP_FLEXION.items():
        if name in names:
            q[names.index(name)] += angle
    q = np.clip(q, arm.limits[:, 0], arm.limits[:, 1])
    m = forward_kinematics(arm, q, ("thumb_tip", "middle_tip"))
    return m["thumb_tip"], m["middle_tip"]


def oracle_rollout(arm: ArmModel, goal: GoalSpec, horizon: int,
                   settings: ArmOracleSettings = ArmOracleSettings(), q0=None) -> tuple[bool, int]:
    """Drive the arm with the oracle alone from ``q0`` (rest by default).
    Returns ``(reached, steps)``."""
    q = arm.rest_pose() if q0 is None else np.asarray(q0, dtype=float)
    for t in range(horizon):
        cost, _, dq = arm_control(arm, q, goal, 1.0, settings)
        if cost < goal.epsilon:
            return True, t
        if not dq.any():
            return False, t
        q = q + dq
    cost, _ = arm_objective(arm, q, goal, settings)
    return cost < goal.epsilon, horizon


def sample_goal(task: Literal["cursor", "arm"], rng: np.random.Generator, workspace,
                epsilon: float | None = None, arm: ArmModel | None = None,
                settings: ArmOracleSettings = ArmOracleSettings()) -> GoalSpec:
    low = np.asarray(workspace.low, dtype=float)
    high = np.asarray(workspace.high, dtype=float)
    if task == "cursor":
        return GoalSpec(rng.uniform(low, high), epsilon)
    if task != "arm":
        raise ValueError(f"unknown task {task!r}")
    for _ in range(workspace.max_attempts):
        anchor = rng.uniform(low, high)
        q_reach = reach_pose(arm, anchor, workspace.horizon, settings=settings)
        if q_reach is None:
            continue
        goal = GoalSpec(anchor, workspace.epsilon, wand_points_for(arm, q_reach))
        if oracle_rollout(arm, goal, workspace.horizon, settings)[0]:
            return goal
    raise RuntimeError("unreachable workspace")
