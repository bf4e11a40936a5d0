"""Six-joint arm: forward kinematics, damped least-squares IK, grasp waypoints.

Joint configurations are plain ``numpy`` arrays of six angles in radians.
Each joint frame is reached from its parent by a fixed translation
(``offset``) followed by a rotation about the joint ``axis``; the end
effector sits at ``tool`` in the last joint frame.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

N_JOINTS = 6
EPS_IK = 1e-3


class KinematicsError(ValueError):
    pass


class JointLimitError(KinematicsError):
    """Joint angles outside their limits."""


class UnreachableError(KinematicsError):
    """IK failed; ``residual`` is the best distance achieved (meters)."""

    def __init__(self, msg, residual=float("inf"), phase=None):
        super().__init__(msg)
        self.residual = residual
        self.phase = phase


@dataclass
class Joint:
    name: str
    axis: np.ndarray
    offset: np.ndarray
    limits: tuple[float, float]

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=float)
        self.offset = np.asarray(self.offset, dtype=float)
        n = np.linalg.norm(self.axis)
        if n == 0:
            raise KinematicsError(f"joint {self.name}: zero axis")
        self.axis = self.axis / n
        lo, hi = (float(v) for v in self.limits)
        if not lo < hi:
            raise KinematicsError(f"joint {self.name}: limits must satisfy lo < hi")
        self.limits = (lo, hi)


@dataclass
class ArmModel:
    joints: list[Joint]
    base_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    base_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    tool: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rest: np.ndarray | None = None
    name: str = "arm"

    def __post_init__(self):
        if len(self.joints) != N_JOINTS:
            raise KinematicsError(f"expected {N_JOINTS} joints, got {len(self.joints)}")
        self.base_position = np.asarray(self.base_position, dtype=float)
        self.base_rotation = np.asarray(self.base_rotation, dtype=float)
        self.tool = np.asarray(self.tool, dtype=float)
        self.rest = np.zeros(N_JOINTS) if self.rest is None else np.asarray(self.rest, dtype=float)
        check_limits(self, self.rest)

    @property
    def lower(self) -> np.ndarray:
        return np.array([j.limits[0] for j in self.joints])

    @property
    def upper(self) -> np.ndarray:
        return np.array([j.limits[1] for j in self.joints])

    @property
    def reach(self) -> float:
        """Upper bound on the distance from the first joint to the tool tip."""
        return float(sum(np.linalg.norm(j.offset) for j in self.joints[1:]) + np.linalg.norm(self.tool))

    @property
    def shoulder(self) -> np.ndarray:
        return self.base_position + self.base_rotation @ self.joints[0].offset


def check_limits(arm: ArmModel, q, tol: float = 0.0) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (N_JOINTS,):
        raise KinematicsError(f"expected {N_JOINTS} joint angles, got shape {q.shape}")
    bad = (q < arm.lower - tol) | (q > arm.upper + tol) | ~np.isfinite(q)
    if bad.any():
        names = [arm.joints[i].name for i in np.flatnonzero(bad)]
        raise JointLimitError(f"joint angles outside limits: {', '.join(names)}")
    return q


def axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rotation matrix about a unit ``axis`` (Rodrigues)."""
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def _chain(arm: ArmModel, q: np.ndarray):
    """World positions/axes of each joint and the final pose."""
    R = arm.base_rotation.copy()
    p = arm.base_position.copy()
    origins, axes = [], []
    for joint, angle in zip(arm.joints, q):
        p = p + R @ joint.offset
        axes.append(R @ joint.axis)
        origins.append(p.copy())
        R = R @ axis_angle_matrix(joint.axis, angle)
    return origins, axes, p + R @ arm.tool, R


def forward_kinematics(arm: ArmModel, q) -> tuple[np.ndarray, np.ndarray]:
    """End-effector position (3,) and orientation (3, 3) for joint angles ``q``."""
    q = check_limits(arm, q)
    _, _, pos, rot = _chain(arm, q)
    return pos, rot


def joint_positions(arm: ArmModel, q) -> np.ndarray:
    """World position of every joint origin, shape (6, 3)."""
    origins, _, _, _ = _chain(arm, check_limits(arm, q))
    return np.array(origins)


def position_jacobian(arm: ArmModel, q) -> np.ndarray:
    origins, axes, pos, _ = _chain(arm, np.asarray(q, dtype=float))
    return np.stack([np.cross(a, pos - o) for a, o in zip(axes, origins)], axis=1)


@dataclass
class IKResult:
    q: np.ndarray
    residual: float
    iterations: int


def _dls(arm, target, q, tol, max_iters, damping, step_clip):
    lo, hi = arm.lower, arm.upper
    best_q, best_r = q, np.inf
    for it in range(max_iters + 1):
        _, _, pos, _ = _chain(arm, q)
        err = target - pos
        r = float(np.linalg.norm(err))
        if r < best_r:
            best_q, best_r = q, r
        if r <= tol or it == max_iters:
            return best_q, best_r, it
        J = position_jacobian(arm, q)
        dq = J.T @ np.linalg.solve(J @ J.T + damping**2 * np.eye(3), err)
        biggest = np.max(np.abs(dq))
        if biggest > step_clip:
            dq *= step_clip / biggest
        q = np.clip(q + dq, lo, hi)
    return best_q, best_r, max_iters


def inverse_kinematics(arm: ArmModel, target, seed_config=None, *, tol: float = EPS_IK,
                       max_iters: int = 200, damping: float = 1e-2, step_clip: float = 0.2,
                       restarts: int = 8) -> IKResult:
    """Position-only IK by damped least squares, clamped to the joint limits.

    Starts from ``seed_config`` (the arm's rest pose by default).  If that
    attempt stalls, up to ``restarts`` more attempts start from the rest pose
    and from deterministic random configurations.  Raises
    :class:`UnreachableError` carrying the best residual when none converge.
    """
    target = np.asarray(target, dtype=float)
    seed = arm.rest if seed_config is None else check_limits(arm, seed_config)
    if np.linalg.norm(target - arm.shoulder) > arm.reach + tol:
        raise UnreachableError(
            f"target {target.round(3).tolist()} beyond arm reach {arm.reach:.3f} m",
            residual=float(np.linalg.norm(target - arm.shoulder) - arm.reach),
        )
    rng = np.random.default_rng(0)
    starts = [seed, arm.rest]
    best = None
    total = 0
    for attempt in range(restarts + 1):
        q0 = starts[attempt] if attempt < len(starts) else rng.uniform(arm.lower, arm.upper)
        q, r, its = _dls(arm, target, q0, tol, max_iters, damping, step_clip)
        total += its
        if best is None or r < best.residual:
            best = IKResult(q, r, total)
        if r <= tol:
            return IKResult(q, r, total)
    raise UnreachableError(
        f"IK did not converge to {target.round(3).tolist()} (best residual {best.residual:.2e} m)",
        residual=best.residual,
    )


PHASES = ("lift", "above", "lower", "grasp")


def grasp_waypoints(arm: ArmModel, block_pos, clearance: float = 0.10,
                    lower_frac: float = 0.3, tol: float = EPS_IK) -> list[np.ndarray]:
    """Joint configurations for lift, above, lower and grasp.

    Lift raises the hand ``clearance`` above its rest position, above hovers
    ``clearance`` over the block, lower hovers ``lower_frac * clearance``
    over it and grasp reaches the block centroid.  Each phase is seeded with
    the previous solution.
    """
    block_pos = np.asarray(block_pos, dtype=float)
    up = np.array([0.0, 0.0, clearance])
    rest_pos, _ = forward_kinematics(arm, arm.rest)
    targets = [rest_pos + up, block_pos + up, block_pos + lower_frac * up, block_pos]
    out, seed = [], arm.rest
    for phase, target in zip(PHASES, targets):
        try:
            seed = inverse_kinematics(arm, target, seed, tol=tol).q
        except UnreachableError as e:
            raise UnreachableError(f"{phase} phase unreachable: {e}", e.residual, phase) from None
        out.append(seed)
    return out


def normalize_joints(arm: ArmModel, q) -> np.ndarray:
    q = check_limits(arm, q)
    return (q - arm.lower) / (arm.upper - arm.lower)


def denormalize_joints(arm: ArmModel, values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.shape != (N_JOINTS,) or np.any(v < 0) or np.any(v > 1):
        raise JointLimitError("normalized joints must be six values in [0, 1]")
    return arm.lower + v * (arm.upper - arm.lower)


# ---------------------------------------------------------------------------
# arm description files
#
#   name <str>
#   base x y z [rx ry rz]          (rotation as xyz Euler angles, radians)
#   joint <name> ax ay az ox oy oz lo hi
#   tool ox oy oz
#   rest q1 .. q6

def _euler_xyz(rx, ry, rz):
    return (axis_angle_matrix(np.array([0.0, 0, 1]), rz) @ axis_angle_matrix(np.array([0.0, 1, 0]), ry)
            @ axis_angle_matrix(np.array([1.0, 0, 0]), rx))


def parse_arm(text: str) -> ArmModel:
    joints, kw = [], {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *vals = line.split()
        try:
            if key == "name":
                kw["name"] = vals[0]
            elif key == "base":
                nums = [float(v) for v in vals]
                kw["base_position"] = np.array(nums[:3])
                if len(nums) == 6:
                    kw["base_rotation"] = _euler_xyz(*nums[3:])
                elif len(nums) != 3:
                    raise ValueError
            elif key == "joint":
                nums = [float(v) for v in vals[1:]]
                if len(nums) != 8:
                    raise ValueError
                joints.append(Joint(vals[0], nums[0:3], nums[3:6], (nums[6], nums[7])))
            elif key == "tool":
                kw["tool"] = np.array([float(v) for v in vals[:3]])
            elif key == "rest":
                kw["rest"] = np.array([float(v) for v in vals])
            else:
                raise KinematicsError(f"line {lineno}: unknown key {key!r}")
        except (ValueError, IndexError):
            raise KinematicsError(f"line {lineno}: malformed {key!r} entry") from None
    return ArmModel(joints, **kw)


def format_arm(arm: ArmModel) -> str:
    f = lambda v: " ".join(repr(float(x)) for x in v)  # noqa: E731
    lines = [f"name {arm.name}", f"base {f(arm.base_position)}"]
    if not np.allclose(arm.base_rotation, np.eye(3)):
        raise KinematicsError("only identity base rotations can be written back")
    for j in arm.joints:
        lines.append(f"joint {j.name} {f(j.axis)} {f(j.offset)} {f(j.limits)}")
    lines += [f"tool {f(arm.tool)}", f"rest {f(arm.rest)}"]
    return "\n".join(lines) + "\n"


def load_arm(path: str | os.PathLike | None = None) -> ArmModel:
    """Load an arm description; the bundled ``humanoid6.arm`` by default."""
    if path is None:
        return parse_arm(resources.files("vismotor.profiles").joinpath("humanoid6.arm").read_text())
    return parse_arm(Path(path).read_text())
