"""Rotation and rigid-transform algebra shared by every other module.

Conventions (fixed package-wide):
  * quaternions are numpy arrays ``[w, x, y, z]``, unit norm, hemisphere
    canonical (w >= 0) after any canonicalizing operation
  * rotation matrices map child-frame vectors into the parent frame
  * euler triples for spherical joints are intrinsic X-Y-Z (roll about x,
    then pitch about the new y, then yaw about the new z):
    R = Rx(a) @ Ry(b) @ Rz(c)
  * URDF ``rpy`` attributes use the fixed-axis convention
    R = Rz(y) @ Ry(p) @ Rx(r) and are kept separate from the intrinsic form
  * angles are radians everywhere; degrees only exist at CLI boundaries
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHONORMAL_TOL = 1e-10
GIMBAL_GUARD = 1e-6  # middle-angle distance from +-pi/2 accepted by euler()


class InvalidRotationError(ValueError):
    """Input matrix is not orthonormal / proper within tolerance."""


class GimbalLockError(ValueError):
    """Euler decomposition requested too close to the +-pi/2 singularity.

    Carries ``nearest`` -- the triple obtained by clamping the middle angle
    to the singular value, usable for diagnostics but not for replay.
    """

    def __init__(self, msg, nearest):
        super().__init__(msg)
        self.nearest = nearest


class LogBranchError(ValueError):
    """so3_log called at (or numerically on) the angle-pi branch cut."""


def skew(v):
    """3x3 cross-product matrix: skew(v) @ u == cross(v, u)."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise InvalidRotationError("zero quaternion cannot be normalized")
    return q / n


def quat_canonical(q):
    """Normalize and flip to the w >= 0 hemisphere."""
    q = quat_normalize(q)
    if q[0] < 0.0:
        q = -q
    return q


def quat_mul(a, b):
    """Hamilton product a * b: rotation b expressed in a's child frame, then a."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q, v):
    """Rotate vector v by quaternion q (same as mat_from_quat(q) @ v)."""
    w = q[0]
    u = q[1:]
    uxv = np.cross(u, v)
    return v + 2.0 * w * uxv + 2.0 * np.cross(u, uxv)


def mat_from_quat(q):
    w, x, y, z = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array([
        [1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)],
        [2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)],
        [2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)],
    ])


def check_rotation(R, tol=ORTHONORMAL_TOL):
    """Raise InvalidRotationError unless R'R = I and det R = +1 within tol."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise InvalidRotationError(f"rotation must be 3x3, got {R.shape}")
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err > tol:
        raise InvalidRotationError(f"matrix not orthonormal: |R'R - I| = {err:.3e}")
    d = np.linalg.det(R)
    if abs(d - 1.0) > tol:
        raise InvalidRotationError(f"matrix not proper: det = {d!r}")
    return R


def quat_from_mat(R, tol=1e-8):
    """Rotation matrix -> hemisphere-canonical unit quaternion.

    Shepperd's method: branch on the largest of (trace, R00, R11, R22) so the
    divisor stays away from zero for every rotation.
    """
    R = check_rotation(R, tol)
    t = R[0, 0] + R[1, 1] + R[2, 2]
    if t > max(R[0, 0], R[1, 1], R[2, 2]):
        s = np.sqrt(1.0 + t) * 2.0
        q = np.array([
            0.25 * s,
            (R[2, 1] - R[1, 2]) / s,
            (R[0, 2] - R[2, 0]) / s,
            (R[1, 0] - R[0, 1]) / s,
        ])
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([
            (R[2, 1] - R[1, 2]) / s,
            0.25 * s,
            (R[0, 1] + R[1, 0]) / s,
            (R[0, 2] + R[2, 0]) / s,
        ])
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([
            (R[0, 2] - R[2, 0]) / s,
            (R[0, 1] + R[1, 0]) / s,
            0.25 * s,
            (R[1, 2] + R[2, 1]) / s,
        ])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([
            (R[1, 0] - R[0, 1]) / s,
            (R[0, 2] + R[2, 0]) / s,
            (R[1, 2] + R[2, 1]) / s,
            0.25 * s,
        ])
    return quat_canonical(q)


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def mat_from_euler_xyz(e):
    """Intrinsic X-Y-Z euler triple -> rotation matrix."""
    return _rx(e[0]) @ _ry(e[1]) @ _rz(e[2])


def euler_xyz_from_mat(R, tol=1e-8):
    """Rotation matrix -> intrinsic X-Y-Z euler triple.

    Valid away from the b = +-pi/2 singularity; raises GimbalLockError with a
    clamped nearest triple when |R02| is within GIMBAL_GUARD of 1.
    """
    R = check_rotation(R, tol)
    s = np.clip(R[0, 2], -1.0, 1.0)
    if 1.0 - abs(s) < GIMBAL_GUARD:
        b = np.pi / 2 if s > 0 else -np.pi / 2
        # at the singularity only a -+ c is observable; pin c = 0
        a = np.arctan2(np.sign(s) * R[1, 0], R[1, 1])
        nearest = np.array([a, b, 0.0])
        raise GimbalLockError(
            f"euler middle angle within {GIMBAL_GUARD} of +-pi/2", nearest)
    b = np.arcsin(s)
    a = np.arctan2(-R[1, 2], R[2, 2])
    c = np.arctan2(-R[0, 1], R[0, 0])
    return np.array([a, b, c])


def mat_from_rpy(rpy):
    """URDF fixed-axis rpy -> rotation matrix: Rz(yaw) Ry(pitch) Rx(roll)."""
    return _rz(rpy[2]) @ _ry(rpy[1]) @ _rx(rpy[0])


def rpy_from_mat(R):
    """Rotation matrix -> URDF fixed-axis rpy (pitch pinned to [-pi/2, pi/2])."""
    pitch = np.arcsin(np.clip(-R[2, 0], -1.0, 1.0))
    if abs(abs(R[2, 0]) - 1.0) < 1e-12:
        # fixed-axis singularity; pin yaw = 0
        return np.array([np.arctan2(-R[0, 1], R[1, 1]), pitch, 0.0])
    roll = np.arctan2(R[2, 1], R[2, 2])
    yaw = np.arctan2(R[1, 0], R[0, 0])
    return np.array([roll, pitch, yaw])


def so3_exp(w):
    """Exponential map: rotation vector (radians) -> unit quaternion."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    half = 0.5 * theta
    if theta < 1e-8:
        # sin(t/2)/t = 1/2 - t^2/48 + O(t^4)
        k = 0.5 - theta * theta / 48.0
    else:
        k = np.sin(half) / theta
    return quat_canonical(np.array([np.cos(half), k * w[0], k * w[1], k * w[2]]))


def so3_log(q):
    """Logarithm map: unit quaternion -> rotation vector, angle in [0, pi).

    Raises LogBranchError within 1e-9 of the angle-pi branch cut where the
    rotation axis is not determined by a limit.
    """
    q = quat_canonical(q)
    s = np.linalg.norm(q[1:])
    angle = 2.0 * np.arctan2(s, q[0])
    if angle >= np.pi - 1e-9:
        raise LogBranchError(f"rotation angle {angle!r} at the pi branch cut")
    if s < 1e-8:
        # atan2(s, w)/s = 1/w - s^2/(3 w^3) + O(s^4); w ~ 1 here
        k = 2.0 / q[0] - 2.0 * s * s / (3.0 * q[0] ** 3)
    else:
        k = angle / s
    return k * q[1:]


def so3_exp_mat(w):
    """Rodrigues formula, exp of a rotation vector as a matrix."""
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * (K @ K)
    return np.eye(3) + np.sin(theta) / theta * K \
        + (1.0 - np.cos(theta)) / theta**2 * (K @ K)


def so3_left_jacobian_inv(phi):
    """Inverse left Jacobian of SO(3) at rotation vector phi.

    Maps a world-frame angular perturbation of R into the perturbation of
    log(R); exact linearization of orientation residuals.
    """
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    c = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * K + c * (K @ K)


def so3_left_jacobian(phi):
    """Left Jacobian of SO(3): exp(phi + d) ~ exp(Jl(phi) d) exp(phi)."""
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    return (np.eye(3) + (1.0 - np.cos(theta)) / theta**2 * K
            + (theta - np.sin(theta)) / theta**3 * (K @ K))


def so3_right_jacobian(phi):
    """Right Jacobian: exp(phi + d) ~ exp(phi) exp(Jr(phi) d)."""
    return so3_left_jacobian(-np.asarray(phi, dtype=float))


def so3_right_jacobian_inv(phi):
    return so3_left_jacobian_inv(-np.asarray(phi, dtype=float))


def quat_slerp(q0, q1, t):
    """Shortest-arc spherical interpolation between unit quaternions."""
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    d = float(np.dot(q0, q1))
    if d < 0.0:
        q1 = -q1
        d = -d
    if d > 1.0 - 1e-12:
        return quat_normalize(q0 + t * (q1 - q0))
    ang = np.arccos(np.clip(d, -1.0, 1.0))
    return quat_normalize(
        (np.sin((1.0 - t) * ang) * q0 + np.sin(t * ang) * q1) / np.sin(ang))


@dataclass(frozen=True)
class Transform:
    """Rigid transform: rotation quaternion [w,x,y,z] plus translation (m)."""

    rot: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rot", quat_canonical(self.rot))
        object.__setattr__(self, "trans", np.asarray(self.trans, dtype=float))

    @staticmethod
    def identity():
        return Transform(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @staticmethod
    def from_rotmat(R, trans=(0.0, 0.0, 0.0)):
        return Transform(quat_from_mat(R), np.asarray(trans, dtype=float))

    @property
    def rotmat(self):
        return mat_from_quat(self.rot)

    def compose(self, other: "Transform") -> "Transform":
        """self then other in self's child frame: T_ac = T_ab * T_bc."""
        return Transform(
            quat_mul(self.rot, other.rot),
            self.trans + quat_rotate(self.rot, other.trans),
        )

    def __matmul__(self, other):
        return self.compose(other)

    def inverse(self) -> "Transform":
        qc = quat_conj(self.rot)
        return Transform(qc, -quat_rotate(qc, self.trans))

    def apply(self, p):
        p = np.asarray(p, dtype=float)
        if p.ndim == 1:
            return quat_rotate(self.rot, p) + self.trans
        return p @ self.rotmat.T + self.trans

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotmat
        M[:3, 3] = self.trans
        return M

    def almost_equal(self, other, tol=1e-10):
        dq = min(np.abs(self.rot - other.rot).max(),
                 np.abs(self.rot + other.rot).max())
        return dq <= tol and np.abs(self.trans - other.trans).max() <= tol
