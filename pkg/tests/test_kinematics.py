from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bcidagger.kinematics import default_arm, forward_kinematics, load_chain, marker_jacobian

ARM = default_arm()

PLANAR = """\
# two unit links rotating about z
base   -     0 0 1   0 0 0   -3.2 3.2
elbow  base  0 0 1   1 0 0   -3.2 3.2
marker wrist elbow 1 0 0
"""


@pytest.fixture
def planar(tmp_path):
    path = tmp_path / "planar.chain"
    path.write_text(PLANAR)
    return load_chain(path)


def poses(arm=ARM):
    lo, hi = arm.limits[:, 0], arm.limits[:, 1]
    return st.lists(st.floats(0, 1), min_size=arm.d_dof, max_size=arm.d_dof).map(
        lambda u: lo + np.array(u) * (hi - lo))


def test_default_groups():
    sizes = {g: len(ix) for g, ix in ARM.groups.items()}
    assert sizes == {"shoulder": 3, "elbow": 2, "wrist": 3, "thumb": 4, "index": 4,
                     "middle": 4, "ring": 3, "pinky": 3}
    assert ARM.d_dof == 26


def test_rest_pose_is_sum_of_offsets():
    m = forward_kinematics(ARM, np.zeros(26))
    assert np.allclose(m["wrist"], [1.0, 0.0, -1.0])
    # palm 0.4 + segments 0.25 + 0.2 + tip 0.2 along +x from the wrist
    assert np.allclose(m["middle_tip"], [2.05, 0.0, -1.0])


def test_planar_two_link(planar):
    assert np.allclose(forward_kinematics(planar, [np.pi / 2, 0.0])["wrist"], [0, 2, 0], atol=1e-15)
    assert np.allclose(forward_kinematics(planar, [0.0, 0.0])["wrist"], [2, 0, 0])


@given(poses())
def test_jacobian_matches_central_difference(q):
    h = 1e-5
    for marker in ("wrist", "thumb_tip", "middle_tip"):
        J = marker_jacobian(ARM, q, marker)
        for i in range(ARM.d_dof):
            e = np.zeros(ARM.d_dof)
            e[i] = h
            fd = (forward_kinematics(ARM, q + e)[marker] - forward_kinematics(ARM, q - e)[marker]) / (2 * h)
            assert np.allclose(J[:, i], fd, atol=1e-6)


@given(poses(), st.lists(st.floats(-0.3, 0.3), min_size=26, max_size=26))
def test_fk_lipschitz_in_chain_length(q, dq):
    dq = np.array(dq)
    a, b = forward_kinematics(ARM, q), forward_kinematics(ARM, q + dq)
    for marker in a:
        assert np.linalg.norm(b[marker] - a[marker]) <= ARM.chain_length(marker) * np.linalg.norm(dq) + 1e-12


def test_chain_errors_report_line(tmp_path):
    path = tmp_path / "bad.chain"
    path.write_text("root - 0 0 1 0 0 0 -1 1\nchild nowhere 0 0 1 0 0 0 -1 1\n")
    with pytest.raises(ValueError, match=r"bad.chain:2"):
        load_chain(path)
    path.write_text("root - 0 0 1 0 0 0 -1\n")
    with pytest.raises(ValueError, match=r"bad.chain:1"):
        load_chain(path)


def test_model_validation():
    from bcidagger.kinematics import ArmModel, Joint
    j = Joint("a", -1, np.array([0.0, 0.0, 2.0]), np.zeros(3), (-1.0, 1.0))
    with pytest.raises(ValueError, match="unit norm"):
        ArmModel((j,), {})
    roots = (Joint("a", -1, np.array([0, 0, 1.0]), np.zeros(3), (-1, 1)),
             Joint("b", -1, np.array([0, 0, 1.0]), np.zeros(3), (-1, 1)))
    with pytest.raises(ValueError, match="one root"):
        ArmModel(roots, {})
