"""Progressive trajectory optimization: kinematic stage (KTO), per-timestep
inverse dynamics (ID), and the full kinodynamic stage (KDTO).

States live at timesteps 0..N, inputs at 0..N-1. The semi-implicit double
integrator

    v[k+1] = v[k] + a[k] dt
    q[k+1] = q[k] (+) v[k+1] dt

is enforced as a hard equality in KTO and KDTO. Stance feet carry the
velocity-level contact constraint (frame twist zero) at every stance state,
a pose anchor between consecutive stance states (transitively pinning the
whole window to the first-contact pose), and at rising edges the
height-zero / near-flat conditions. Contact wrenches are world-aligned
6-vectors [force; torque] acting at the foot keyframe; the friction cone is
evaluated in the stance foot's yaw frame.

The three stages are strictly ordered; ID steps are mutually independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kinodyn
from .core_math import (
    quat_from_mat, mat_from_quat, so3_log, so3_exp,
    so3_left_jacobian_inv, so3_right_jacobian, so3_right_jacobian_inv,
)
from .motion_io import ContactSchedule
from .opt import (
    NlpProblem, ProductManifold, QpProblem, ResidualBlock, ConstraintBlock,
    SolveReport, solve_qp, solve_sqp,
)


class StageError(RuntimeError):
    def __init__(self, stage, report, timestep=None):
        at = f" at step {timestep}" if timestep is not None else ""
        super().__init__(f"{stage} failed{at}: {report.status}")
        self.stage = stage
        self.report = report
        self.timestep = timestep


def _safe_log(q):
    """so3_log that degrades gracefully at the pi branch (wild line-search
    trial points must evaluate to a finite residual, not raise)."""
    from .core_math import LogBranchError
    try:
        return so3_log(q)
    except LogBranchError:
        s = np.linalg.norm(q[1:4])
        axis = q[1:4] / s if s > 0 else np.array([1.0, 0.0, 0.0])
        return axis * (np.pi - 1e-9)


@dataclass
class StageWeights:
    w_pos: float = 1.0
    w_rot: float = 1.0
    w_vel: float = 0.1
    w_omega: float = 0.1
    w_acc: float = 1e-4     # KTO smoothing, ID/KDTO acceleration tracking
    w_tau: float = 1e-6
    w_wrench: float = 1e-8


@dataclass
class ContactGeometry:
    feet: list                         # contact keyframe names
    half_len: float = 0.10            # support box half-length (x)
    half_wid: float = 0.05            # support box half-width (y)
    mu: float = 0.6
    collision_pairs: list = field(default_factory=list)  # (frame, frame, d_min)


@dataclass
class StageTrajectory:
    q: np.ndarray                      # (N+1, nq)
    v: np.ndarray                      # (N+1, nv)
    a: np.ndarray                      # (N, nv)
    tau: np.ndarray                    # (N, nj)
    wrenches: dict                     # foot -> (N, 6)
    dt: float
    schedule: ContactSchedule

    @property
    def n_states(self):
        return self.q.shape[0]

    @property
    def n_inputs(self):
        return self.a.shape[0]

    def copy(self):
        return StageTrajectory(self.q.copy(), self.v.copy(), self.a.copy(),
                               self.tau.copy(),
                               {f: w.copy() for f, w in self.wrenches.items()},
                               self.dt, self.schedule)


def seed_from_ik(model, q_ik, dt, schedule) -> StageTrajectory:
    """Finite-difference velocities/accelerations consistent with the
    integrator: v[k] = (q[k] (-) q[k-1])/dt, endpoints replicated."""
    q_ik = np.asarray(q_ik, dtype=float)
    n = q_ik.shape[0]
    if n < 3:
        raise ValueError("need at least 3 frames to seed a trajectory")
    N = n - 1
    nv = model.nv
    v = np.zeros((n, nv))
    for k in range(1, n):
        v[k] = model.boxminus(q_ik[k], q_ik[k - 1]) / dt
    v[0] = v[1]
    a = (v[1:] - v[:-1]) / dt
    nj = model.nq - 7
    wr = {f: np.zeros((N, 6)) for f in schedule.feet}
    return StageTrajectory(q_ik.copy(), v, a, np.zeros((N, nj)), wr, dt,
                           schedule)


def tracking_targets(model, q_ik, v_ik, keyframes):
    """Per-state pose and twist targets from the IK solution's own FK."""
    eng = kinodyn._engine(model)
    out = []
    for q, v in zip(q_ik, v_ik):
        arrays = eng.fk_arrays(q)
        vels = eng.vel_arrays(q, v, *arrays)
        tgt = {}
        for f in keyframes:
            R, p = eng.frame_pose(q, f, arrays)
            tw = eng.frame_velocity(q, v, f, arrays, vels)
            tgt[f] = (p, R, tw[0:3], tw[3:6])
        out.append(tgt)
    return out


# -- trajectory variable layout --------------------------------------------------

class _Layout:
    """Flat/tangent indexing for [q_k v_k (a_k tau_k w_k)] blocks."""

    def __init__(self, model, N, feet, with_inputs):
        self.model = model
        self.N = N
        self.feet = list(feet)
        self.with_inputs = with_inputs
        nq, nv = model.nq, model.nv
        nj = nq - 7
        nf = len(self.feet)
        self.nq, self.nv, self.nj, self.nf = nq, nv, nj, nf
        in_flat = (nv + nj + 6 * nf) if with_inputs == "full" else nv
        self.state_flat = nq + nv
        self.state_tan = nv + nv
        self.step_flat = self.state_flat + in_flat
        self.step_tan = self.state_tan + in_flat
        self.dim = (N + 1) * self.state_flat + N * in_flat
        self.tdim = (N + 1) * self.state_tan + N * in_flat
        self.in_flat = in_flat
        segments = []
        for k in range(N + 1):
            segments += [("vec", 3), ("quat",), ("vec", nj), ("vec", nv)]
            if k < N:
                segments += [("vec", in_flat)]
        self.manifold = ProductManifold(segments)

    # flat slices
    def xq(self, k):
        o = k * self.step_flat
        return slice(o, o + self.nq)

    def xv(self, k):
        o = k * self.step_flat + self.nq
        return slice(o, o + self.nv)

    def xa(self, k):
        o = k * self.step_flat + self.state_flat
        return slice(o, o + self.nv)

    def xtau(self, k):
        o = k * self.step_flat + self.state_flat + self.nv
        return slice(o, o + self.nj)

    def xw(self, k, fi):
        o = k * self.step_flat + self.state_flat + self.nv + self.nj + 6 * fi
        return slice(o, o + 6)

    # tangent index arrays
    def tq(self, k):
        o = k * self.step_tan
        return np.arange(o, o + self.nv)

    def tv(self, k):
        o = k * self.step_tan + self.nv
        return np.arange(o, o + self.nv)

    def ta(self, k):
        o = k * self.step_tan + self.state_tan
        return np.arange(o, o + self.nv)

    def ttau(self, k):
        o = k * self.step_tan + self.state_tan + self.nv
        return np.arange(o, o + self.nj)

    def tw(self, k, fi):
        o = (k * self.step_tan + self.state_tan + self.nv + self.nj + 6 * fi)
        return np.arange(o, o + 6)

    def pack(self, st: StageTrajectory):
        x = np.zeros(self.dim)
        for k in range(self.N + 1):
            x[self.xq(k)] = st.q[k]
            x[self.xv(k)] = st.v[k]
            if k < self.N:
                x[self.xa(k)] = st.a[k]
                if self.with_inputs == "full":
                    x[self.xtau(k)] = st.tau[k]
                    for fi, f in enumerate(self.feet):
                        x[self.xw(k, fi)] = st.wrenches[f][k]
        return x

    def unpack(self, x, dt, schedule) -> StageTrajectory:
        N, nv, nj = self.N, self.nv, self.nj
        q = np.array([x[self.xq(k)] for k in range(N + 1)])
        v = np.array([x[self.xv(k)] for k in range(N + 1)])
        a = np.array([x[self.xa(k)] for k in range(N)])
        if self.with_inputs == "full":
            tau = np.array([x[self.xtau(k)] for k in range(N)])
            wr = {f: np.array([x[self.xw(k, fi)] for k in range(N)])
                  for fi, f in enumerate(self.feet)}
        else:
            tau = np.zeros((N, nj))
            wr = {f: np.zeros((N, 6)) for f in self.feet}
        return StageTrajectory(q, v, a, tau, wr, dt, schedule)


# -- shared constraint pieces -----------------------------------------------------

def cwc_rows(mu, X, Y, yaw):
    """17 x 6 matrix C and row count: C [f; tau] >= 0 in the yaw-aligned
    frame expresses the contact wrench cone of a rectangular support box,
    with the yaw-torque bound absolute values expanded sign by sign."""
    c, s = np.cos(yaw), np.sin(yaw)
    Rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    G = np.zeros((6, 6))
    G[0:3, 0:3] = Rz.T
    G[3:6, 3:6] = Rz.T
    C = np.zeros((17, 6))
    # |f_x| <= mu f_z, |f_y| <= mu f_z, f_z >= 0
    C[0] = [-1, 0, mu, 0, 0, 0]
    C[1] = [1, 0, mu, 0, 0, 0]
    C[2] = [0, -1, mu, 0, 0, 0]
    C[3] = [0, 1, mu, 0, 0, 0]
    C[4] = [0, 0, 1, 0, 0, 0]
    # |tau_x| <= Y f_z, |tau_y| <= X f_z
    C[5] = [0, 0, Y, -1, 0, 0]
    C[6] = [0, 0, Y, 1, 0, 0]
    C[7] = [0, 0, X, 0, -1, 0]
    C[8] = [0, 0, X, 0, 1, 0]
    # tau_z >= -mu(X+Y)f_z + |Y f_x - mu tau_x| + |X f_y - mu tau_y|
    i = 9
    for s1 in (-1.0, 1.0):
        for s2 in (-1.0, 1.0):
            C[i] = [-s1 * Y, -s2 * X, mu * (X + Y), s1 * mu, s2 * mu, 1]
            i += 1
    # tau_z <= +mu(X+Y)f_z - |Y f_x + mu tau_x| - |X f_y + mu tau_y|
    for s1 in (-1.0, 1.0):
        for s2 in (-1.0, 1.0):
            C[i] = [-s1 * Y, -s2 * X, mu * (X + Y), -s1 * mu, -s2 * mu, -1]
            i += 1
    return C @ G


def foot_yaw(R):
    return float(np.arctan2(R[1, 0], R[0, 0]))


# -- KTO / KDTO problem assembly -----------------------------------------------

def _tracking_block(eng, lay, k, targets_k, weights):
    frames = sorted(targets_k)
    nfr = len(frames)
    cols = np.concatenate([lay.tq(k), lay.tv(k)])
    nv = lay.nv

    w = np.empty(12 * nfr)
    for i in range(nfr):
        w[12 * i:12 * i + 3] = weights.w_pos
        w[12 * i + 3:12 * i + 6] = weights.w_rot
        w[12 * i + 6:12 * i + 9] = weights.w_vel
        w[12 * i + 9:12 * i + 12] = weights.w_omega

    def fun(x):
        q = x[lay.xq(k)]
        v = x[lay.xv(k)]
        arrays = eng.fk_arrays(q)
        vels = eng.vel_arrays(q, v, *arrays)
        r = np.empty(12 * nfr)
        for i, f in enumerate(frames):
            p_ref, R_ref, v_ref, w_ref = targets_k[f]
            R, p = eng.frame_pose(q, f, arrays)
            tw = eng.frame_velocity(q, v, f, arrays, vels)
            o = 12 * i
            r[o:o + 3] = p - p_ref
            r[o + 3:o + 6] = _safe_log(quat_from_mat(R_ref.T @ R, tol=1e-6))
            r[o + 6:o + 9] = tw[0:3] - v_ref
            r[o + 9:o + 12] = tw[3:6] - w_ref
        return r

    def jac(x):
        q = x[lay.xq(k)]
        v = x[lay.xv(k)]
        arrays = eng.fk_arrays(q)
        tw_jacs = eng.twist_q_jacobians(q, v, frames)
        J = np.zeros((12 * nfr, 2 * nv))
        for i, f in enumerate(frames):
            p_ref, R_ref, _, _ = targets_k[f]
            Jf = eng.frame_jacobian(q, f, arrays)
            R, _ = eng.frame_pose(q, f, arrays)
            dR = _safe_log(quat_from_mat(R_ref.T @ R, tol=1e-6))
            o = 12 * i
            J[o:o + 3, 0:nv] = Jf[0:3]
            J[o + 3:o + 6, 0:nv] = so3_left_jacobian_inv(dR) @ R_ref.T @ Jf[3:6]
            J[o + 6:o + 12, 0:nv] = tw_jacs[f]
            J[o + 6:o + 12, nv:2 * nv] = Jf
        return J

    return ResidualBlock(f"track[{k}]", cols, w, fun, jac)


def _integrator_block(model, lay, k, dt):
    nv, nj = lay.nv, lay.nj
    cols = np.concatenate([lay.tq(k), lay.tq(k + 1), lay.tv(k),
                           lay.tv(k + 1), lay.ta(k)])

    def fun(x):
        qk = x[lay.xq(k)]
        qk1 = x[lay.xq(k + 1)]
        vk = x[lay.xv(k)]
        vk1 = x[lay.xv(k + 1)]
        ak = x[lay.xa(k)]
        pred = model.boxplus(qk, vk1 * dt)
        r = np.empty(2 * nv)
        r[0:3] = pred[0:3] - qk1[0:3]
        r[3:6] = _safe_log(_quat_mul_conj(qk1[3:7], pred[3:7]))
        r[6:nv] = pred[7:] - qk1[7:]
        r[nv:] = vk1 - vk - ak * dt
        return r

    def jac(x):
        qk = x[lay.xq(k)]
        qk1 = x[lay.xq(k + 1)]
        vk1 = x[lay.xv(k + 1)]
        J = np.zeros((2 * nv, 5 * nv))
        I3 = np.eye(3)
        Ij = np.eye(nj) if nj else np.zeros((0, 0))
        # residual rotation e = log(B^-1 A exp(w dt)), A = quat_k, B = quat_k+1
        wdt = vk1[3:6] * dt
        pred = model.boxplus(qk, vk1 * dt)
        e = so3_log(
            np.array(_quat_mul_conj(qk1[3:7], pred[3:7])))
        Jr_inv = so3_right_jacobian_inv(e)
        Jl_inv = so3_left_jacobian_inv(e)
        R_wdt = mat_from_quat(so3_exp(wdt))
        # position rows: q_k+1.pos = q_k.pos + v dt
        J[0:3, 0:3] = I3                      # d/dq_k pos
        J[0:3, nv:nv + 3] = -I3               # d/dq_k+1 pos
        J[0:3, 3 * nv:3 * nv + 3] = dt * I3   # d/dv_k+1 lin
        # rotation rows
        J[3:6, 3:6] = Jr_inv @ R_wdt.T
        J[3:6, nv + 3:nv + 6] = -Jl_inv
        J[3:6, 3 * nv + 3:3 * nv + 6] = dt * (Jr_inv @ so3_right_jacobian(wdt))
        # joint rows
        if nj:
            J[6:nv, 6:nv] = Ij
            J[6:nv, nv + 6:2 * nv] = -Ij
            J[6:nv, 3 * nv + 6:4 * nv] = dt * Ij
        # velocity rows: v_k+1 - v_k - a dt
        J[nv:, 2 * nv:3 * nv] = -np.eye(nv)
        J[nv:, 3 * nv:4 * nv] = np.eye(nv)
        J[nv:, 4 * nv:5 * nv] = -dt * np.eye(nv)
        return J

    z = np.zeros(2 * nv)
    return ConstraintBlock(f"integ[{k}]", cols, z, z.copy(), fun, jac)


def _quat_mul_conj(b, a):
    # log argument: b^-1 * a as a quaternion
    from .core_math import quat_mul, quat_conj
    return quat_mul(quat_conj(b), a)


def _contact_velocity_block(eng, lay, k, foot):
    nv = lay.nv
    cols = np.concatenate([lay.tq(k), lay.tv(k)])

    def fun(x):
        return eng.frame_velocity(x[lay.xq(k)], x[lay.xv(k)], foot)

    def jac(x):
        q = x[lay.xq(k)]
        v = x[lay.xv(k)]
        Jf = eng.frame_jacobian(q, foot)
        J = np.zeros((6, 2 * nv))
        J[:, nv:] = Jf
        J[:, 0:nv] = eng.twist_q_jacobians(q, v, [foot])[foot]
        return J

    z = np.zeros(6)
    return ConstraintBlock(f"cvel[{k},{foot}]", cols, z, z.copy(), fun, jac)


def _pose_pin_block(eng, lay, k, foot):
    nv = lay.nv
    cols = np.concatenate([lay.tq(k), lay.tq(k + 1)])

    def fun(x):
        Ra, pa = eng.frame_pose(x[lay.xq(k)], foot)
        Rb, pb = eng.frame_pose(x[lay.xq(k + 1)], foot)
        return np.concatenate([pb - pa,
                               _safe_log(quat_from_mat(Ra.T @ Rb, tol=1e-6))])

    def jac(x):
        qa = x[lay.xq(k)]
        qb = x[lay.xq(k + 1)]
        Ja = eng.frame_jacobian(qa, foot)
        Jb = eng.frame_jacobian(qb, foot)
        Ra, _ = eng.frame_pose(qa, foot)
        Rb, _ = eng.frame_pose(qb, foot)
        e = so3_log(quat_from_mat(Ra.T @ Rb, tol=1e-6))
        J = np.zeros((6, 2 * nv))
        J[0:3, 0:nv] = -Ja[0:3]
        J[0:3, nv:] = Jb[0:3]
        J[3:6, 0:nv] = -so3_left_jacobian_inv(e) @ Ra.T @ Ja[3:6]
        J[3:6, nv:] = so3_left_jacobian_inv(e) @ Ra.T @ Jb[3:6]
        return J

    z = np.zeros(6)
    return ConstraintBlock(f"pin[{k},{foot}]", cols, z, z.copy(), fun, jac)


def _first_contact_block(eng, lay, k, foot, eps):
    cols = lay.tq(k)

    def fun(x):
        R, p = eng.frame_pose(x[lay.xq(k)], foot)
        return np.array([p[2], R[2, 2]])

    def jac(x):
        q = x[lay.xq(k)]
        arrays = eng.fk_arrays(q)
        Jf = eng.frame_jacobian(q, foot, arrays)
        R, _ = eng.frame_pose(q, foot, arrays)
        J = np.zeros((2, lay.nv))
        J[0] = Jf[2]
        # d R_zz under world perturbation: ([w]x R)_22 = w_x R_12 - w_y R_02
        g = np.array([R[1, 2], -R[0, 2], 0.0])
        J[1] = g @ Jf[3:6]
        return J

    lb = np.array([0.0, 1.0 - eps])
    ub = np.array([0.0, np.inf])
    return ConstraintBlock(f"touch[{k},{foot}]", cols, lb, ub, fun, jac)


def _swing_height_block(eng, lay, k, foot):
    cols = lay.tq(k)

    def fun(x):
        _, p = eng.frame_pose(x[lay.xq(k)], foot)
        return np.array([p[2]])

    def jac(x):
        return eng.frame_jacobian(x[lay.xq(k)], foot)[2:3]

    return ConstraintBlock(f"swing[{k},{foot}]", cols, np.array([0.0]),
                           np.array([np.inf]), fun, jac)


def _collision_block(eng, lay, k, pairs):
    cols = lay.tq(k)
    d_min = np.array([d for _, _, d in pairs])

    def fun(x):
        q = x[lay.xq(k)]
        arrays = eng.fk_arrays(q)
        out = np.empty(len(pairs))
        for i, (fa, fb, _) in enumerate(pairs):
            _, pa = eng.frame_pose(q, fa, arrays)
            _, pb = eng.frame_pose(q, fb, arrays)
            out[i] = np.linalg.norm(pa - pb)
        return out

    def jac(x):
        q = x[lay.xq(k)]
        arrays = eng.fk_arrays(q)
        J = np.zeros((len(pairs), lay.nv))
        for i, (fa, fb, _) in enumerate(pairs):
            _, pa = eng.frame_pose(q, fa, arrays)
            _, pb = eng.frame_pose(q, fb, arrays)
            d = pa - pb
            n = d / max(np.linalg.norm(d), 1e-12)
            Ja = eng.frame_jacobian(q, fa, arrays)
            Jb = eng.frame_jacobian(q, fb, arrays)
            J[i] = n @ (Ja[0:3] - Jb[0:3])
        return J

    return ConstraintBlock(f"coll[{k}]", cols, d_min,
                           np.full(len(pairs), np.inf), fun, jac)


def _cwc_block(eng, lay, k, fi, foot, geometry):
    cols = np.concatenate([lay.tq(k), lay.tw(k, fi)])
    nv = lay.nv

    def rows(x):
        R, _ = eng.frame_pose(x[lay.xq(k)], foot)
        return cwc_rows(geometry.mu, geometry.half_len, geometry.half_wid,
                        foot_yaw(R))

    def fun(x):
        return rows(x) @ x[lay.xw(k, fi)]

    def jac(x):
        # yaw dependence on q is pinned by the contact constraints; its
        # Jacobian contribution is dropped (quasi-Newton constraint handling)
        J = np.zeros((17, nv + 6))
        J[:, nv:] = rows(x)
        return J

    return ConstraintBlock(f"cwc[{k},{foot}]", cols, np.zeros(17),
                           np.full(17, np.inf), fun, jac)


def _dynamics_block(eng, lay, k, gravity):
    nv, nj, nf = lay.nv, lay.nj, lay.nf
    model = eng.model
    cols = np.concatenate([lay.tq(k), lay.tv(k), lay.ta(k), lay.ttau(k)]
                          + [lay.tw(k, fi) for fi in range(nf)])

    def parts(x):
        q = x[lay.xq(k)]
        v = x[lay.xv(k)]
        a = x[lay.xa(k)]
        tau = x[lay.xtau(k)]
        wr = {f: x[lay.xw(k, fi)] for fi, f in enumerate(lay.feet)}
        return q, v, a, tau, wr

    def fun(x):
        q, v, a, tau, wr = parts(x)
        r = eng.rnea(q, v, a, wr, gravity)
        r[6:] -= tau
        return r

    def jac(x):
        q, v, a, tau, wr = parts(x)
        h = 1e-6
        B = 4 * nv
        qb = np.tile(q, (B, 1))
        vb = np.tile(v, (B, 1))
        ab = np.tile(a, (B, 1))
        for i in range(nv):
            d = np.zeros(nv)
            d[i] = h
            qb[2 * i] = model.boxplus(q, d)
            qb[2 * i + 1] = model.boxplus(q, -d)
            vb[2 * nv + 2 * i, i] += h
            vb[2 * nv + 2 * i + 1, i] -= h
        wrb = {f: np.tile(w, (B, 1)) for f, w in wr.items()}
        rb = eng.rnea(qb, vb, ab, wrb, gravity)
        J = np.zeros((nv, len(cols)))
        for i in range(nv):
            J[:, i] = (rb[2 * i] - rb[2 * i + 1]) / (2 * h)
            J[:, nv + i] = (rb[2 * nv + 2 * i] - rb[2 * nv + 2 * i + 1]) / (2 * h)
        J[:, 2 * nv:3 * nv] = eng.crba(q)
        J[6:nv, 3 * nv:3 * nv + nj] = -np.eye(nj)
        arrays = eng.fk_arrays(q)
        for fi, f in enumerate(lay.feet):
            Jf = eng.frame_jacobian(q, f, arrays)
            J[:, 3 * nv + nj + 6 * fi:3 * nv + nj + 6 * fi + 6] = -Jf.T
        return J

    z = np.zeros(nv)
    return ConstraintBlock(f"dyn[{k}]", cols, z, z.copy(), fun, jac)


def _stage_problem(model, seed: StageTrajectory, targets, geometry, weights,
                   full, id_ref=None, gravity=kinodyn.GRAVITY):
    """Assemble the KTO (full=False) or KDTO (full=True) NLP."""
    eng = kinodyn._engine(model)
    N = seed.n_inputs
    dt = seed.dt
    sched = seed.schedule
    lay = _Layout(model, N, geometry.feet, "full" if full else "kin")

    residuals = []
    constraints = []
    for k in range(N + 1):
        residuals.append(_tracking_block(eng, lay, k, targets[k], weights))
    if full:
        a_ref, tau_ref, w_ref = id_ref
        for k in range(N):
            cols = np.concatenate([lay.ta(k), lay.ttau(k)]
                                  + [lay.tw(k, fi) for fi in range(lay.nf)])
            wts = np.concatenate([
                np.full(lay.nv, weights.w_acc),
                np.full(lay.nj, weights.w_tau),
                np.full(6 * lay.nf, weights.w_wrench)])
            ref = np.concatenate([a_ref[k], tau_ref[k]]
                                 + [w_ref[f][k] for f in lay.feet])
            nloc = len(ref)
            residuals.append(ResidualBlock(
                f"reg[{k}]", cols, wts,
                (lambda x, k=k, ref=ref: np.concatenate(
                    [x[lay.xa(k)], x[lay.xtau(k)]]
                    + [x[lay.xw(k, fi)] for fi in range(lay.nf)]) - ref),
                (lambda x, n=nloc: np.eye(n))))
    else:
        for k in range(N):
            residuals.append(ResidualBlock(
                f"reg[{k}]", lay.ta(k), np.full(lay.nv, weights.w_acc),
                (lambda x, k=k: x[lay.xa(k)]),
                (lambda x, n=lay.nv: np.eye(n))))

    for k in range(N):
        constraints.append(_integrator_block(model, lay, k, dt))
    for fi, foot in enumerate(geometry.feet):
        contact = sched.contacts[foot]
        for k in range(N + 1):
            if contact[k]:
                constraints.append(_contact_velocity_block(eng, lay, k, foot))
            else:
                constraints.append(_swing_height_block(eng, lay, k, foot))
        for k, k1 in sched.stance_pairs(foot):
            constraints.append(_pose_pin_block(eng, lay, k, foot))
        for k0 in sched.first_contacts[foot]:
            constraints.append(_first_contact_block(eng, lay, k0, foot, 1e-4))
        if full:
            for k in range(N):
                if contact[k]:
                    constraints.append(_cwc_block(eng, lay, k, fi, foot,
                                                  geometry))
    if geometry.collision_pairs:
        for k in range(N + 1):
            constraints.append(_collision_block(eng, lay, k,
                                                geometry.collision_pairs))
    if full:
        for k in range(N):
            constraints.append(_dynamics_block(eng, lay, k, gravity))

    # flat box: joint limits on q, joint velocity limits on v, torque limits
    q_lo_j, q_hi_j, v_max_j, tau_max_j = model.joint_limit_arrays()
    x_lo = np.full(lay.dim, -np.inf)
    x_hi = np.full(lay.dim, np.inf)
    for k in range(N + 1):
        qs = lay.xq(k)
        x_lo[qs.start + 7:qs.stop] = q_lo_j
        x_hi[qs.start + 7:qs.stop] = q_hi_j
        vs = lay.xv(k)
        x_lo[vs.start + 6:vs.stop] = -v_max_j
        x_hi[vs.start + 6:vs.stop] = v_max_j
        if k < N and full:
            ts = lay.xtau(k)
            x_lo[ts.start:ts.stop] = -tau_max_j
            x_hi[ts.start:ts.stop] = tau_max_j
            for fi, foot in enumerate(geometry.feet):
                if not sched.contacts[foot][k]:
                    ws = lay.xw(k, fi)
                    x_lo[ws.start:ws.stop] = 0.0
                    x_hi[ws.start:ws.stop] = 0.0

    prob = NlpProblem(lay.manifold, lay.pack(seed), residuals, constraints,
                      x_lo, x_hi)
    return prob, lay


def solve_kto(model, seed: StageTrajectory, targets, geometry,
              weights=None, max_iter=60, tol_kkt=2e-4, tol_feas=1e-9):
    """Trajectory-level kinematic refinement under the double integrator,
    contact kinematics, self-collision, and limit constraints."""
    weights = weights or StageWeights()
    prob, lay = _stage_problem(model, seed, targets, geometry, weights,
                               full=False)
    x, report = solve_sqp(prob, max_iter=max_iter, tol_kkt=tol_kkt,
                          tol_feas=tol_feas)
    traj = lay.unpack(x, seed.dt, seed.schedule)
    if report.status not in ("optimal",):
        raise StageError("KTO", report)
    return traj, report


def solve_id_step(model, q, v, a_ref, stance, geometry, weights=None,
                  gravity=kinodyn.GRAVITY, tol=1e-9):
    """Single-timestep inverse dynamics QP.

    stance: foot -> bool. Returns (a, tau, wrenches dict, report). Swing
    wrenches are fixed to zero; stance feet carry the zero-acceleration
    constraint J a + Jdot v = 0 and the wrench cone.
    """
    weights = weights or StageWeights()
    eng = kinodyn._engine(model)
    nv = model.nv
    nj = model.nq - 7
    feet = list(geometry.feet)
    nf = len(feet)
    n = nv + nj + 6 * nf

    H = np.zeros((n, n))
    g = np.zeros(n)
    H[:nv, :nv] = 2 * weights.w_acc * np.eye(nv)
    g[:nv] = -2 * weights.w_acc * a_ref
    H[nv:nv + nj, nv:nv + nj] = 2 * weights.w_tau * np.eye(nj)
    H[nv + nj:, nv + nj:] = 2 * weights.w_wrench * np.eye(6 * nf)

    M = eng.crba(q)
    h_bias = eng.bias(q, v, gravity)
    arrays = eng.fk_arrays(q)

    rows = []
    lbs, ubs = [], []
    # M a - S tau - sum J' w = -h
    A_dyn = np.zeros((nv, n))
    A_dyn[:, :nv] = M
    A_dyn[6:, nv:nv + nj] = -np.eye(nj)
    for fi, f in enumerate(feet):
        Jf = eng.frame_jacobian(q, f, arrays)
        A_dyn[:, nv + nj + 6 * fi:nv + nj + 6 * fi + 6] = -Jf.T
    rows.append(A_dyn)
    lbs.append(-h_bias)
    ubs.append(-h_bias)

    x_lo = np.full(n, -np.inf)
    x_hi = np.full(n, np.inf)
    _, _, _, tau_max_j = model.joint_limit_arrays()
    x_lo[nv:nv + nj] = -tau_max_j
    x_hi[nv:nv + nj] = tau_max_j

    for fi, f in enumerate(feet):
        if stance[f]:
            Jf = eng.frame_jacobian(q, f, arrays)
            jd = eng.frame_jdot_v(q, v, f)
            A_c = np.zeros((6, n))
            A_c[:, :nv] = Jf
            rows.append(A_c)
            lbs.append(-jd)
            ubs.append(-jd)
            R, _ = eng.frame_pose(q, f, arrays)
            C = cwc_rows(geometry.mu, geometry.half_len, geometry.half_wid,
                         foot_yaw(R))
            A_cwc = np.zeros((17, n))
            A_cwc[:, nv + nj + 6 * fi:nv + nj + 6 * fi + 6] = C
            rows.append(A_cwc)
            lbs.append(np.zeros(17))
            ubs.append(np.full(17, np.inf))
        else:
            sl = slice(nv + nj + 6 * fi, nv + nj + 6 * fi + 6)
            x_lo[sl] = 0.0
            x_hi[sl] = 0.0

    qp = QpProblem(H, g, np.vstack(rows), np.concatenate(lbs),
                   np.concatenate(ubs), x_lo, x_hi)
    x, duals, report = solve_qp(qp, tol_kkt=tol)
    if x is None:
        return None, None, None, report
    a = x[:nv]
    tau = x[nv:nv + nj]
    wr = {f: x[nv + nj + 6 * fi:nv + nj + 6 * fi + 6]
          for fi, f in enumerate(feet)}
    return a, tau, wr, report


def solve_id(model, kto: StageTrajectory, geometry, weights=None,
             gravity=kinodyn.GRAVITY):
    """Run the per-timestep ID QP over the whole KTO trajectory."""
    weights = weights or StageWeights()
    N = kto.n_inputs
    out = kto.copy()
    reports = []
    for k in range(N):
        stance = {f: bool(kto.schedule.contacts[f][k]) for f in geometry.feet}
        a, tau, wr, rep = solve_id_step(model, kto.q[k], kto.v[k], kto.a[k],
                                        stance, geometry, weights, gravity)
        reports.append(rep)
        if a is None:
            raise StageError("ID", rep, timestep=k)
        out.a[k] = a
        out.tau[k] = tau
        for f in geometry.feet:
            out.wrenches[f][k] = wr[f]
    return out, reports


def solve_kdto(model, warm: StageTrajectory, targets, geometry,
               weights=None, max_iter=60, tol_kkt=2e-4, tol_feas=1e-9,
               gravity=kinodyn.GRAVITY):
    """Full kinodynamic stage: KTO constraints plus Lagrangian dynamics,
    swing zero-wrench, stance wrench cones, and torque limits, regularized
    toward the warm start's dynamic quantities."""
    weights = weights or StageWeights()
    id_ref = (warm.a.copy(), warm.tau.copy(),
              {f: w.copy() for f, w in warm.wrenches.items()})
    prob, lay = _stage_problem(model, warm, targets, geometry, weights,
                               full=True, id_ref=id_ref, gravity=gravity)
    x, report = solve_sqp(prob, max_iter=max_iter, tol_kkt=tol_kkt,
                          tol_feas=tol_feas)
    traj = lay.unpack(x, warm.dt, warm.schedule)
    if report.status not in ("optimal",):
        raise StageError("KDTO", report)
    return traj, report


def run_progressive(model, q_ik, dt, schedule, geometry, weights=None,
                    keyframes=None, gravity=kinodyn.GRAVITY,
                    kto_kwargs=None, kdto_kwargs=None):
    """IK result -> KTO -> ID -> KDTO with warm-start handoff; returns the
    three stage trajectories, their solver reports, and constraint audits."""
    weights = weights or StageWeights()
    keyframes = keyframes or list(model.keyframes)
    seed = seed_from_ik(model, q_ik, dt, schedule)
    targets = tracking_targets(model, seed.q, seed.v, keyframes)

    out = {"targets": targets, "seed": seed}
    kto, rep_kto = solve_kto(model, seed, targets, geometry, weights,
                             **(kto_kwargs or {}))
    out["kto"] = kto
    out["kto_report"] = rep_kto
    out["kto_audit"] = audit_trajectory(model, kto, geometry, gravity,
                                        dynamics=False)

    id_traj, id_reports = solve_id(model, kto, geometry, weights, gravity)
    out["id"] = id_traj
    out["id_reports"] = id_reports
    out["id_audit"] = audit_trajectory(model, id_traj, geometry, gravity,
                                       dynamics=True, integrator=False)

    kdto, rep_kdto = solve_kdto(model, id_traj, targets, geometry, weights,
                                gravity=gravity, **(kdto_kwargs or {}))
    out["kdto"] = kdto
    out["kdto_report"] = rep_kdto
    out["kdto_audit"] = audit_trajectory(model, kdto, geometry, gravity,
                                         dynamics=True)
    return out


# -- constraint audit -------------------------------------------------------------

def audit_trajectory(model, st: StageTrajectory, geometry,
                     gravity=kinodyn.GRAVITY, dynamics=True, integrator=True):
    """Worst-case violation per constraint family, straight from the data."""
    eng = kinodyn._engine(model)
    N = st.n_inputs
    dt = st.dt
    sched = st.schedule
    out = {}

    if integrator:
        res = 0.0
        for k in range(N):
            rq = model.boxminus(model.boxplus(st.q[k], st.v[k + 1] * dt),
                                st.q[k + 1])
            rv = st.v[k + 1] - st.v[k] - st.a[k] * dt
            res = max(res, np.abs(rq).max(), np.abs(rv).max())
        out["integrator_residual"] = res

    swing_h = np.inf
    cvel = 0.0
    drift = 0.0
    rzz = 0.0
    touch_h = 0.0
    for f in geometry.feet:
        contact = sched.contacts[f]
        anchor = None
        for k in range(N + 1):
            R, p = eng.frame_pose(st.q[k], f)
            if contact[k]:
                tw = eng.frame_velocity(st.q[k], st.v[k], f)
                cvel = max(cvel, np.abs(tw).max())
                if k in sched.first_contacts[f]:
                    anchor = p
                    rzz = max(rzz, max(0.0, (1 - 1e-4) - R[2, 2]))
                    touch_h = max(touch_h, abs(p[2]))
                elif anchor is not None:
                    drift = max(drift, float(np.linalg.norm(p - anchor)))
            else:
                anchor = None
                swing_h = min(swing_h, p[2])
    out["contact_velocity"] = cvel
    out["stance_drift"] = drift
    out["first_contact_height"] = touch_h
    out["first_contact_flatness"] = rzz
    out["swing_height_min"] = swing_h if swing_h != np.inf else 0.0

    if geometry.collision_pairs:
        margin = np.inf
        for k in range(N + 1):
            arrays = eng.fk_arrays(st.q[k])
            for fa, fb, dmin in geometry.collision_pairs:
                _, pa = eng.frame_pose(st.q[k], fa, arrays)
                _, pb = eng.frame_pose(st.q[k], fb, arrays)
                margin = min(margin, np.linalg.norm(pa - pb) - dmin)
        out["collision_margin_min"] = margin

    q_lo, q_hi, v_max, tau_max = model.joint_limit_arrays()
    qv = 0.0
    vv = 0.0
    for k in range(N + 1):
        qj = st.q[k][7:]
        qv = max(qv, float(np.maximum(qj - q_hi, 0).max(initial=0)),
                 float(np.maximum(q_lo - qj, 0).max(initial=0)))
        vj = st.v[k][6:]
        vv = max(vv, float(np.maximum(np.abs(vj) - v_max, 0).max(initial=0)))
    out["joint_limit_violation"] = qv
    out["velocity_limit_violation"] = vv

    if dynamics:
        dyn = 0.0
        tau_viol = 0.0
        cwc_margin = np.inf
        swing_wrench = 0.0
        com_acc_err = 0.0
        for k in range(N):
            wr = {f: st.wrenches[f][k] for f in geometry.feet}
            r = eng.rnea(st.q[k], st.v[k], st.a[k], wr, gravity)
            r[6:] -= st.tau[k]
            dyn = max(dyn, np.abs(r).max())
            tau_viol = max(tau_viol, float(
                np.maximum(np.abs(st.tau[k]) - tau_max, 0).max(initial=0)))
            any_contact = False
            for f in geometry.feet:
                w = st.wrenches[f][k]
                if sched.contacts[f][k]:
                    any_contact = True
                    R, _ = eng.frame_pose(st.q[k], f)
                    C = cwc_rows(geometry.mu, geometry.half_len,
                                 geometry.half_wid, foot_yaw(R))
                    cwc_margin = min(cwc_margin, float((C @ w).min()))
                else:
                    swing_wrench = max(swing_wrench, np.abs(w).max())
            if not any_contact:
                ca = eng.com_acceleration(st.q[k], st.v[k], st.a[k])
                com_acc_err = max(com_acc_err,
                                  np.abs(ca - np.asarray(gravity)).max())
        out["dynamics_residual"] = dyn
        out["torque_limit_violation"] = tau_viol
        out["cwc_margin_min"] = cwc_margin if cwc_margin != np.inf else 0.0
        out["swing_wrench_max"] = swing_wrench
        out["flight_com_acc_err"] = com_acc_err
    return out
