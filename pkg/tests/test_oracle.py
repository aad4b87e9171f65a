from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bcidagger.decoder import EffectorState
from bcidagger.kinematics import default_arm, forward_kinematics, load_chain
from bcidagger.oracle import (ArmOracleSettings, ArmStateError, ArmWorkspace, CursorWorkspace, GoalSpec,
                              arm_objective, arm_oracle, objective_cost, cursor_oracle, oracle_rollout, sample_goal,
                              wand_points_for)

ARM = default_arm()
SETTINGS = ArmOracleSettings()
REST = forward_kinematics(ARM, ARM.rest_pose())
vec3 = st.lists(st.floats(-2, 2), min_size=3, max_size=3).map(np.array)


def goal_near(anchor, q_reach=None):
    wand = wand_points_for(ARM, ARM.rest_pose() if q_reach is None else q_reach)
    return GoalSpec(np.asarray(anchor, float), 0.01, wand)


def random_pose(rng):
    lo, hi = ARM.limits[:, 0], ARM.limits[:, 1]
    return rng.uniform(lo, hi)


# --- cursor ---

def test_cursor_examples():
    at = EffectorState.at_rest(np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(cursor_oracle(at, GoalSpec(np.array([1.0, 2.0, 3.0]), 0.05), 1.0), np.zeros(3))
    origin = EffectorState.at_rest(np.zeros(3))
    assert np.allclose(cursor_oracle(origin, GoalSpec(np.array([5.0, 0, 0]), 0.05), 1.0), [1, 0, 0])
    assert np.allclose(cursor_oracle(origin, GoalSpec(np.array([0.4, 0, 0]), 0.05), 1.0), [0.4, 0, 0])


@given(vec3, vec3, st.floats(0.01, 2.0), st.floats(0.1, 2.0))
def test_cursor_magnitude_law(p, g, speed, dt):
    eps = 0.05
    o = cursor_oracle(EffectorState(p, np.zeros(3), dt), GoalSpec(g, eps), speed)
    dist = np.linalg.norm(g - p)
    if dist <= eps:
        assert not o.any()
    else:
        assert np.linalg.norm(o) == pytest.approx(min(speed, dist / dt), rel=1e-12)
        assert o @ (g - p) > 0


def test_goal_validation():
    with pytest.raises(ValueError):
        GoalSpec(np.zeros(3), 0.0)
    with pytest.raises(ValueError):
        GoalSpec(np.array([np.inf, 0, 0]), 0.1)


# --- arm objective ---

def test_zero_cost_when_everything_is_on_target():
    m = REST
    goal = GoalSpec(m["wrist"], 0.01, (m["thumb_tip"], m["middle_tip"]))
    cost, obj = arm_objective(ARM, ARM.rest_pose(), goal)
    assert cost == 0.0
    assert obj.phase == "grasp"
    assert not arm_oracle(ARM, ARM.rest_pose(), goal).any()


def test_reach_phase_cost_at_two_delta():
    d = ARM.delta
    goal = goal_near(REST["wrist"] + np.array([2 * d, 0, 0]))
    cost, obj = arm_objective(ARM, ARM.rest_pose(), goal)
    assert obj.phase == "reach"
    assert [t[0] for t in obj.terms] == ["wrist"]
    assert cost == pytest.approx((2 * d) ** 2, rel=1e-12)


def test_phase_boundary_is_inclusive():
    arm = default_arm(delta=0.25)
    wrist = forward_kinematics(arm, arm.rest_pose())["wrist"]
    goal = GoalSpec(wrist + np.array([0.25, 0, 0]), 0.01, wand_points_for(arm, arm.rest_pose()))
    assert np.linalg.norm(wrist - goal.target) == 0.25
    _, obj = arm_objective(arm, arm.rest_pose(), goal)
    assert obj.phase == "grasp"
    assert {"thumb_tip", "middle_tip"} <= {t[0] for t in obj.terms}


# --- arm oracle ---

@given(st.integers(0, 2**32 - 1))
def test_oracle_never_increases_cost(seed):
    rng = np.random.default_rng(seed)
    q = random_pose(rng)
    anchor = rng.uniform([0.6, -0.8, -1.4], [1.5, 0.8, -0.2])
    # near the anchor half the time so the grasp phase is exercised
    if rng.random() < 0.5:
        anchor = forward_kinematics(ARM, q)["wrist"] + rng.uniform(-0.1, 0.1, 3)
    goal = goal_near(anchor, q)
    before, objective = arm_objective(ARM, q, goal)
    dq = arm_oracle(ARM, q, goal)
    # descent is on the objective of the phase the step was planned in; the
    # next step may switch phase, which changes the cost function itself
    after = objective_cost(objective, forward_kinematics(ARM, q + dq))
    assert after <= before
    assert np.all(q + dq >= ARM.limits[:, 0] - 1e-12) and np.all(q + dq <= ARM.limits[:, 1] + 1e-12)


def test_max_step_on_random_poses():
    rng = np.random.default_rng(1)
    for _ in range(100):
        q = random_pose(rng)
        goal = goal_near(rng.uniform([0.6, -0.8, -1.4], [1.5, 0.8, -0.2]), q)
        assert np.max(np.abs(arm_oracle(ARM, q, goal))) <= SETTINGS.max_step + 1e-15


def test_invalid_state():
    q = ARM.rest_pose()
    q[0] = np.nan
    with pytest.raises(ArmStateError, match="invalid arm state"):
        arm_oracle(ARM, q, goal_near([1.0, 0.0, -0.5]))


PLANAR = """\
base   -     0 0 1   0 0 0   -3.2 3.2
elbow  base  0 0 1   1 0 0   -3.2 3.2
marker wrist elbow 1 0 0
"""


@pytest.fixture(scope="module")
def planar(tmp_path_factory):
    path = tmp_path_factory.mktemp("chain") / "planar.chain"
    path.write_text(PLANAR)
    return load_chain(path, delta=0.01)


def _angle(a, b):
    return np.degrees(np.arccos(np.clip(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)), -1, 1)))


def _numerical_setup(arm, q, goal, settings, h=1e-6):
    def cost(x):
        return arm_objective(arm, x, goal, settings)[0]

    grad = np.array([(cost(q + h * e) - cost(q - h * e)) / (2 * h) for e in np.eye(len(q))])
    J = np.array([(forward_kinematics(arm, q + h * e)["wrist"] - forward_kinematics(arm, q - h * e)["wrist"])
                  / (2 * h) for e in np.eye(len(q))]).T
    return cost, grad, J


@given(st.floats(-3, 3), st.floats(0.3, 2.8), st.floats(0, 2 * np.pi))
def test_planar_dls_step_is_preconditioned_descent(planar, q1, q2, theta):
    q = np.array([q1, q2])
    wrist = forward_kinematics(planar, q)["wrist"]
    goal = GoalSpec(wrist + 0.05 * np.array([np.cos(theta), np.sin(theta), 0.0]), 1e-9)
    settings = ArmOracleSettings(max_step=10.0)
    cost, grad, J = _numerical_setup(planar, q, goal, settings)
    step = arm_oracle(planar, q, goal, settings=settings)
    # independent numerical DLS step from the finite-difference Jacobian
    r = goal.target - wrist
    num = J.T @ np.linalg.solve(J @ J.T + settings.mu**2 * np.eye(3), r)
    assert np.allclose(step, num, atol=1e-7)
    # the step is (J^T J + mu^2 I)^-1 times the negative gradient, so its angle to
    # steepest descent obeys the Kantorovich bound for that preconditioner
    kappa = np.linalg.cond(J.T @ J + settings.mu**2 * np.eye(2))
    bound = np.degrees(np.arccos(2 * np.sqrt(kappa) / (1 + kappa)))
    assert _angle(step, -grad) <= bound + 1e-4
    assert cost(q + step) < cost(q)


def test_planar_dls_tracks_gradient_when_damping_dominates(planar):
    q = np.array([0.3, 1.2])
    goal = GoalSpec(np.array([0.2, 1.6, 0.0]), 1e-9)
    settings = ArmOracleSettings(mu=5.0, max_step=10.0)
    cost, grad, _ = _numerical_setup(planar, q, goal, settings)
    step = arm_oracle(planar, q, goal, settings=settings)
    assert _angle(step, -grad) <= 15.0
    assert cost(q + step) < cost(q)


# --- goal sampling ---

def test_cursor_goals_uniform_mean():
    ws = CursorWorkspace(-np.ones(3), np.ones(3))
    rng = np.random.default_rng(6)
    goals = np.array([sample_goal("cursor", rng, ws, epsilon=0.05).target for _ in range(10_000)])
    # std of each mean is sqrt(1/3)/100 ~ 0.0058, so 0.04 is about 7 sigma
    assert np.all(np.abs(goals.mean(axis=0)) <= 0.04)
    assert np.all(goals >= -1) and np.all(goals <= 1)


def test_degenerate_cursor_box():
    ws = CursorWorkspace(np.zeros(3), np.zeros(3))
    rng = np.random.default_rng(0)
    for _ in range(5):
        assert np.array_equal(sample_goal("cursor", rng, ws, epsilon=0.05).target, np.zeros(3))


def test_arm_goals_are_reachable():
    ws = ArmWorkspace(np.array([0.6, -0.8, -1.4]), np.array([1.5, 0.8, -0.2]))
    rng = np.random.default_rng(2)
    for _ in range(3):
        goal = sample_goal("arm", rng, ws, arm=ARM)
        reached, steps = oracle_rollout(ARM, goal, ws.horizon)
        assert reached and steps <= ws.horizon


def test_unreachable_workspace():
    ws = ArmWorkspace(np.full(3, 10.0), np.full(3, 11.0), max_attempts=3, horizon=20)
    with pytest.raises(RuntimeError, match="unreachable workspace"):
        sample_goal("arm", np.random.default_rng(0), ws, arm=ARM)
