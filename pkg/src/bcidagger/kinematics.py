"""Kinematic joint tree: forward kinematics, marker Jacobians, chain files.

Each joint rotates about a fixed axis in its own frame. A joint's origin sits
at ``offset`` in its parent's frame, and markers sit at a local offset in the
frame of the joint they are attached to. Joints are stored parents-first.

Chain file format (``#`` starts a comment)::

    # name      parent  axis(x y z)  offset(x y z)   min   max
    shoulder_y  -       0 0 1        0 0 0           -1.2  1.2
    elbow       shoulder_y 0 1 0     0 0 -1          -1.5  1.2
    marker wrist elbow 1 0 0
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MARKERS = ("wrist", "thumb_tip", "middle_tip")


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int
    axis: np.ndarray
    offset: np.ndarray
    limits: tuple[float, float]


@dataclass(frozen=True)
class ArmModel:
    joints: tuple[Joint, ...]
    markers: Mapping[str, tuple[int, np.ndarray]]
    delta: float = 0.15
    groups: Mapping[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.joints:
            raise ValueError("arm needs at least one joint")
        roots = 0
        for i, j in enumerate(self.joints):
            if j.parent >= i:
                raise ValueError(f"joint {j.name!r}: parent must precede child")
            if j.parent < 0:
                roots += 1
            n = np.linalg.norm(j.axis)
            if not np.isclose(n, 1.0, atol=1e-9):
                raise ValueError(f"joint {j.name!r}: axis must be unit norm")
            if j.limits[0] > j.limits[1]:
                raise ValueError(f"joint {j.name!r}: limits out of order")
        if roots != 1:
            raise ValueError("joint tree must have exactly one root")
        for name, (ji, _) in self.markers.items():
            if not 0 <= ji < len(self.joints):
                raise ValueError(f"marker {name!r} attached to unknown joint")
        axes = np.array([j.axis for j in self.joints], dtype=float)
        x, y, z = axes.T
        zero = np.zeros_like(x)
        cross = np.stack([
            np.stack([zero, -z, y], -1),
            np.stack([z, zero, -x], -1),
            np.stack([-y, x, zero], -1),
        ], -2)
        outer = axes[:, :, None] * axes[:, None, :]
        ancestors = {m: self.ancestors(ji) for m, (ji, _) in self.markers.items()}
        needed = sorted(set().union(*(a.tolist() for a in ancestors.values()))) if ancestors else []
        object.__setattr__(self, "_parents", np.array([j.parent for j in self.joints]))
        object.__setattr__(self, "_axes", axes)
        object.__setattr__(self, "_offsets", np.array([j.offset for j in self.joints], dtype=float))
        object.__setattr__(self, "_rodrigues", (outer, np.eye(3) - outer, cross))
        object.__setattr__(self, "_ancestors", ancestors)
        # only joints that carry a marker need frames during control
        object.__setattr__(self, "_needed", needed)
        limits = np.array([j.limits for j in self.joints], dtype=float)
        limits.flags.writeable = False
        object.__setattr__(self, "_limits", limits)

    @property
    def d_dof(self) -> int:
        return len(self.joints)

    @property
    def limits(self) -> np.ndarray:
        return self._limits

    @property
    def names(self) -> list[str]:
        return [j.name for j in self.joints]

    def rest_pose(self) -> np.ndarray:
        return np.clip(np.zeros(self.d_dof), self.limits[:, 0], self.limits[:, 1])

    def ancestors(self, index: int) -> np.ndarray:
        chain = []
        while index >= 0:
            chain.append(index)
            index = self.joints[index].parent
        return np.array(chain[::-1], dtype=int)

    def chain_length(self, marker: str) -> float:
        """Sum over the marker's ancestor joints of the path length from the
        joint to the marker. Rotating joint ``i`` by ``h`` moves the marker by
        at most ``h`` times that joint's path length."""
        ji, local = self.markers[marker]
        anc = self._ancestors[marker]
        seg = [np.linalg.norm(self._offsets[i]) for i in anc[1:]] + [np.linalg.norm(local)]
        tails = np.cumsum(seg[::-1])[::-1]
        return float(np.sum(tails))


def joint_frames(arm: ArmModel, q, subset=None) -> tuple[list, list]:
    """World rotation and origin of each joint frame (``None`` for joints
    outside ``subset``; ``subset`` must be closed under taking parents)."""
    q = np.asarray(q, dtype=float)
    outer, ortho, cross = arm._rodrigues
    c = np.cos(q)[:, None, None]
    s = np.sin(q)[:, None, None]
    local = outer + c * ortho + s * cross
    n = arm.d_dof
    R: list = [None] * n
    P: list = [None] * n
    parents = arm._parents
    offsets = arm._offsets
    for i in (range(n) if subset is None else subset):
        pi = parents[i]
        if pi < 0:
            P[i] = offsets[i]
            R[i] = local[i]
        else:
            Rp = R[pi]
            P[i] = P[pi] + Rp @ offsets[i]
            R[i] = Rp @ local[i]
    return R, P


def forward_kinematics(arm: ArmModel, q, markers=None) -> dict[str, np.ndarray]:
    R, P = joint_frames(arm, q, arm._needed)
    names = arm.markers if markers is None else markers
    out = {}
    for name in names:
        ji, local = arm.markers[name]
        out[name] = P[ji] + R[ji] @ local
    return out


def marker_jacobian(arm: ArmModel, q, marker: str, frames=None) -> np.ndarray:
    """3 x d_dof positional Jacobian of one marker."""
    R, P = joint_frames(arm, q, arm._needed) if frames is None else frames
    ji, local = arm.markers[marker]
    x = P[ji] + R[ji] @ local
    anc = arm._ancestors[marker]
    w = np.einsum("nij,nj->ni", np.array([R[i] for i in anc]), arm._axes[anc])
    J = np.zeros((3, arm.d_dof))
    J[:, anc] = np.cross(w, x - np.array([P[i] for i in anc])).T
    return J


def load_chain(path: str | Path, delta: float = 0.15) -> ArmModel:
    joints: list[Joint] = []
    index: dict[str, int] = {}
    markers: dict[str, tuple[int, np.ndarray]] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "marker":
                if len(tok) != 6:
                    raise ValueError("expected: marker NAME JOINT ox oy oz")
                markers[tok[1]] = (index[tok[2]], np.array([float(t) for t in tok[3:6]]))
                continue
            if len(tok) != 10:
                raise ValueError("expected: NAME PARENT ax ay az ox oy oz min max")
            parent = -1 if tok[1] == "-" else index[tok[1]]
            axis = np.array([float(t) for t in tok[2:5]])
            axis = axis / np.linalg.norm(axis)
            offset = np.array([float(t) for t in tok[5:8]])
            index[tok[0]] = len(joints)
            joints.append(Joint(tok[0], parent, axis, offset, (float(tok[8]), float(tok[9]))))
        except (ValueError, KeyError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return ArmModel(tuple(joints), markers, delta=delta, groups=infer_groups([j.name for j in joints]))


def infer_groups(names: list[str]) -> dict[str, tuple[int, ...]]:
    """Group joints by name prefix (``shoulder_yaw`` -> ``shoulder``)."""
    groups: dict[str, list[int]] = {}
    for i, n in enumerate(names):
        groups.setdefault(n.split("_", 1)[0], []).append(i)
    return {g: tuple(ix) for g, ix in groups.items()}


def default_arm(delta: float = 0.15) -> ArmModel:
    """26-DOF arm: unit upper arm and forearm, 0.4 palm, 0.25/0.2 finger
    segments. At rest the upper arm hangs along -z and the forearm points
    along +x (elbow at a right angle), palm down."""
    X, Y, Z = np.eye(3)
    rows: list[tuple] = []

    def add(name, parent, axis, offset, lo, hi):
        rows.append((name, parent, np.asarray(axis, float), np.asarray(offset, float), lo, hi))

    add("shoulder_yaw", None, Z, (0, 0, 0), -1.2, 1.2)
    add("shoulder_pitch", "shoulder_yaw", Y, (0, 0, 0), -2.2, 0.6)
    add("shoulder_roll", "shoulder_pitch", Z, (0, 0, 0), -1.2, 1.2)
    add("elbow_flex", "shoulder_roll", Y, (0, 0, -1.0), -1.6, 0.8)
    add("elbow_pronation", "elbow_flex", X, (0, 0, 0), -1.4, 1.4)
    add("wrist_flex", "elbow_pronation", Y, (1.0, 0, 0), -1.2, 1.2)
    add("wrist_deviation", "wrist_flex", Z, (0, 0, 0), -0.5, 0.5)
    add("wrist_rotation", "wrist_deviation", X, (0, 0, 0), -0.8, 0.8)

    t_dir = np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0)
    t_flex = np.array([-1.0, 1.0, 0.0]) / np.sqrt(2.0)
    add("thumb_cmc_abd", "wrist_rotation", Z, (0.1, 0.08, 0), -0.6, 0.8)
    add("thumb_cmc_flex", "thumb_cmc_abd", t_flex, (0, 0, 0), -0.4, 1.2)
    add("thumb_mcp", "thumb_cmc_flex", t_flex, 0.25 * t_dir, -0.2, 1.2)
    add("thumb_ip", "thumb_mcp", t_flex, 0.2 * t_dir, -0.2, 1.4)

    for finger, y, n in (("index", 0.09, 4), ("middle", 0.0, 4), ("ring", -0.08, 3), ("pinky", -0.15, 3)):
        parent = "wrist_rotation"
        if n == 4:
            add(f"{finger}_abd", parent, Z, (0.4, y, 0), -0.35, 0.35)
            add(f"{finger}_mcp", f"{finger}_abd", Y, (0, 0, 0), -0.3, 1.6)
        else:
            add(f"{finger}_mcp", parent, Y, (0.4, y, 0), -0.3, 1.6)
        add(f"{finger}_pip", f"{finger}_mcp", Y, (0.25, 0, 0), 0.0, 1.8)
        add(f"{finger}_dip", f"{finger}_pip", Y, (0.2, 0, 0), 0.0, 1.4)

    names = [r[0] for r in rows]
    joints = tuple(
        Joint(name, -1 if parent is None else names.index(parent), axis, offset, (lo, hi))
        for name, parent, axis, offset, lo, hi in rows
    )
    markers = {
        "wrist": (names.index("wrist_rotation"), np.zeros(3)),
        "thumb_tip": (names.index("thumb_ip"), 0.2 * t_dir),
        "middle_tip": (names.index("middle_dip"), np.array([0.2, 0, 0])),
    }
    return ArmModel(joints, markers, delta=delta, groups=infer_groups(names))
