"""Rigid-body kinematics and dynamics kernels.

Forward kinematics, frame Jacobians and their drift terms, recursive
Newton-Euler inverse dynamics, composite-rigid-body mass matrix, task-space
errors, center of mass and centroidal momentum.

All quantities are world-aligned: a frame twist is
``[linear velocity of the frame origin point (world); angular velocity
(world)]`` and a contact wrench is ``[force; torque]`` applied at the frame
origin in world axes. The generalized-velocity convention matches
``RobotModel.boxplus``: base linear velocity in world, base angular velocity
in the base frame.

The heavy recursions (FK, velocity/acceleration propagation, RNEA) accept a
leading batch axis so finite-difference derivative sweeps cost one
vectorized pass instead of dozens of scalar ones. Kernels are stateless:
every call builds its own arrays, so concurrent evaluation across timesteps
needs no coordination.
"""

from __future__ import annotations

import numpy as np

from .core_math import (
    Transform, mat_from_quat, quat_from_mat, skew, so3_log,
    so3_left_jacobian_inv,
)

GRAVITY = np.array([0.0, 0.0, -9.81])


class FrameError(KeyError):
    """Unknown link or keyframe name."""


def _cross(a, b):
    # np.cross with guaranteed (B,3) x (B,3) broadcasting
    return np.cross(a, b)


class KinDyn:
    """Preprocessed kinematics/dynamics engine for one RobotModel.

    Bodies are the model links in traversal order (root first); each non-root
    body hangs on its parent joint, whose rotational dofs act intrinsically
    about fixed local axes at the joint origin (revolute: one dof; spherical:
    X-Y-Z chain; fixed: none).
    """

    def __init__(self, model):
        self.model = model
        self.nq = model.nq
        self.nv = model.nv
        links = model.links
        order = [model.root_link]
        for j in model.joints:
            order.append(j.child)
        self.body_names = order
        self.body_index = {n: i for i, n in enumerate(order)}
        self.nb = len(order)

        self.parent = np.zeros(self.nb, dtype=int)
        self.origin_rot = np.zeros((self.nb, 3, 3))
        self.origin_trans = np.zeros((self.nb, 3))
        self.origin_rot[0] = np.eye(3)

        self.mass = np.zeros(self.nb)
        self.com_local = np.zeros((self.nb, 3))
        self.inertia_local = np.zeros((self.nb, 3, 3))
        for i, name in enumerate(order):
            link = links[model.link_index[name]]
            self.mass[i] = link.mass
            self.com_local[i] = link.com
            self.inertia_local[i] = link.inertia
        self.total_mass = float(self.mass.sum())

        # flattened rotational dofs in v order (v index = 6 + dof position)
        dof_axis = []
        dof_K = []
        dof_body = []
        self.body_dof_start = np.zeros(self.nb, dtype=int)
        self.body_dof_count = np.zeros(self.nb, dtype=int)
        sph_axes = (np.array([1.0, 0, 0]), np.array([0, 1.0, 0]),
                    np.array([0, 0, 1.0]))
        for b, j in enumerate(model.joints, start=1):
            self.parent[b] = self.body_index[j.parent]
            self.origin_rot[b] = j.origin.rotmat
            self.origin_trans[b] = j.origin.trans
            self.body_dof_start[b] = len(dof_axis)
            if j.kind == "revolute":
                axes = (j.axis,)
            elif j.kind == "spherical":
                axes = sph_axes
            else:
                axes = ()
            for ax in axes:
                dof_axis.append(np.asarray(ax, dtype=float))
                dof_K.append(skew(ax))
                dof_body.append(b)
            self.body_dof_count[b] = len(axes)
        self.ndof = len(dof_axis)
        assert self.ndof == self.nv - 6
        self.dof_axis = np.array(dof_axis).reshape(self.ndof, 3)
        self.dof_K = np.array(dof_K).reshape(self.ndof, 3, 3)
        self.dof_K2 = np.einsum("kij,kjl->kil", self.dof_K, self.dof_K)
        self.dof_body = np.array(dof_body, dtype=int)

        # dof indices on the path root -> body (inclusive), per body
        self.path_dofs = []
        for b in range(self.nb):
            if b == 0:
                self.path_dofs.append([])
                continue
            path = list(self.path_dofs[self.parent[b]])
            s, c = self.body_dof_start[b], self.body_dof_count[b]
            path.extend(range(s, s + c))
            self.path_dofs.append(path)

        # frame table: every link plus every keyframe
        self.frames = {}
        for name in order:
            self.frames[name] = (self.body_index[name], np.eye(3), np.zeros(3))
        for kf, (link, xf) in model.keyframes.items():
            self.frames[kf] = (self.body_index[link], xf.rotmat,
                               xf.trans.copy())

    def _frame(self, name):
        try:
            return self.frames[name]
        except KeyError:
            raise FrameError(f"unknown frame {name!r}") from None

    # -- forward pass --------------------------------------------------------

    def fk_arrays(self, q):
        """Batched FK. q: (B, nq) or (nq,). Returns (R, p, axis_w) with
        shapes (B, nb, 3, 3), (B, nb, 3), (B, ndof, 3)."""
        q = np.atleast_2d(np.asarray(q, dtype=float))
        B = q.shape[0]
        R = np.zeros((B, self.nb, 3, 3))
        p = np.zeros((B, self.nb, 3))
        axis_w = np.zeros((B, self.ndof, 3))
        R[:, 0] = _mat_from_quat_batch(q[:, 3:7])
        p[:, 0] = q[:, 0:3]
        eye = np.eye(3)
        for b in range(1, self.nb):
            par = self.parent[b]
            Rj = R[:, par] @ self.origin_rot[b]
            p[:, b] = p[:, par] + np.einsum("bij,j->bi", R[:, par],
                                            self.origin_trans[b])
            s0, c0 = self.body_dof_start[b], self.body_dof_count[b]
            for k in range(s0, s0 + c0):
                axis_w[:, k] = Rj @ self.dof_axis[k]
                th = q[:, 7 + k]
                sin, cos = np.sin(th), np.cos(th)
                Rk = (eye + sin[:, None, None] * self.dof_K[k]
                      + (1.0 - cos)[:, None, None] * self.dof_K2[k])
                Rj = Rj @ Rk
            R[:, b] = Rj
        return R, p, axis_w

    def vel_arrays(self, q, v, R=None, p=None, axis_w=None):
        """Body angular velocity w and origin linear velocity vel, (B, nb, 3)."""
        q = np.atleast_2d(np.asarray(q, dtype=float))
        v = np.atleast_2d(np.asarray(v, dtype=float))
        if R is None:
            R, p, axis_w = self.fk_arrays(q)
        B = q.shape[0]
        w = np.zeros((B, self.nb, 3))
        vel = np.zeros((B, self.nb, 3))
        w[:, 0] = np.einsum("bij,bj->bi", R[:, 0], v[:, 3:6])
        vel[:, 0] = v[:, 0:3]
        for b in range(1, self.nb):
            par = self.parent[b]
            d = p[:, b] - p[:, par]
            vel[:, b] = vel[:, par] + _cross(w[:, par], d)
            wb = w[:, par].copy()
            s0, c0 = self.body_dof_start[b], self.body_dof_count[b]
            for k in range(s0, s0 + c0):
                wb = wb + axis_w[:, k] * v[:, 6 + k][:, None]
            w[:, b] = wb
        return w, vel

    def acc_arrays(self, q, v, a, R, p, axis_w, w, base_lin_offset=None):
        """Angular/linear acceleration of every body origin, (B, nb, 3).

        ``base_lin_offset`` shifts the base linear acceleration (the RNEA
        gravity trick); None means pure kinematics (used for jdot_v).
        """
        v = np.atleast_2d(np.asarray(v, dtype=float))
        a = np.atleast_2d(np.asarray(a, dtype=float))
        B = v.shape[0]
        alpha = np.zeros((B, self.nb, 3))
        acc = np.zeros((B, self.nb, 3))
        alpha[:, 0] = np.einsum("bij,bj->bi", R[:, 0], a[:, 3:6])
        acc[:, 0] = a[:, 0:3]
        if base_lin_offset is not None:
            acc[:, 0] = acc[:, 0] + base_lin_offset
        for b in range(1, self.nb):
            par = self.parent[b]
            d = p[:, b] - p[:, par]
            acc[:, b] = (acc[:, par] + _cross(alpha[:, par], d)
                         + _cross(w[:, par], _cross(w[:, par], d)))
            al = alpha[:, par].copy()
            w_run = w[:, par].copy()
            s0, c0 = self.body_dof_start[b], self.body_dof_count[b]
            for k in range(s0, s0 + c0):
                ak = axis_w[:, k]
                qd = v[:, 6 + k][:, None]
                qdd = a[:, 6 + k][:, None]
                al = al + ak * qdd + _cross(w_run, ak) * qd
                w_run = w_run + ak * qd
            alpha[:, b] = al
        return alpha, acc

    # -- public kinematics ---------------------------------------------------

    def fk(self, q):
        """World pose of every link and keyframe: dict name -> Transform."""
        q = self.model.check_q(q)
        R, p, _ = self.fk_arrays(q)
        out = {}
        for name, (b, R_loc, t_loc) in self.frames.items():
            Rw = R[0, b] @ R_loc
            pw = p[0, b] + R[0, b] @ t_loc
            out[name] = Transform(quat_from_mat(Rw), pw)
        return out

    def frame_pose(self, q, frame, arrays=None):
        """(R, p) of one frame; pass arrays=(R,p,axis_w) to reuse an FK pass."""
        b, R_loc, t_loc = self._frame(frame)
        if arrays is None:
            arrays = self.fk_arrays(q)
        R, p, _ = arrays
        return R[0, b] @ R_loc, p[0, b] + R[0, b] @ t_loc

    def frame_jacobian(self, q, frame, arrays=None):
        """6 x nv world-aligned Jacobian [linear; angular] of a frame."""
        b, R_loc, t_loc = self._frame(frame)
        if arrays is None:
            arrays = self.fk_arrays(q)
        R, p, axis_w = arrays
        pf = p[0, b] + R[0, b] @ t_loc
        J = np.zeros((6, self.nv))
        J[0:3, 0:3] = np.eye(3)
        J[0:3, 3:6] = -skew(pf - p[0, 0]) @ R[0, 0]
        J[3:6, 3:6] = R[0, 0]
        for k in self.path_dofs[b]:
            ak = axis_w[0, k]
            J[0:3, 6 + k] = np.cross(ak, pf - p[0, self.dof_body[k]])
            J[3:6, 6 + k] = ak
        return J

    def frame_velocity(self, q, v, frame, arrays=None, vels=None):
        """Frame twist [v; w] in world axes."""
        b, R_loc, t_loc = self._frame(frame)
        if arrays is None:
            arrays = self.fk_arrays(q)
        R, p, axis_w = arrays
        if vels is None:
            vels = self.vel_arrays(q, v, R, p, axis_w)
        w, vel = vels
        r = R[0, b] @ t_loc
        out = np.empty(6)
        out[0:3] = vel[0, b] + np.cross(w[0, b], r)
        out[3:6] = w[0, b]
        return out

    def frame_twist_batch(self, q, v, frame):
        """Frame twists for a batch of states, (B, 6)."""
        b, R_loc, t_loc = self._frame(frame)
        R, p, axis_w = self.fk_arrays(q)
        w, vel = self.vel_arrays(q, v, R, p, axis_w)
        r = np.einsum("bij,j->bi", R[:, b], t_loc)
        return np.concatenate([vel[:, b] + _cross(w[:, b], r), w[:, b]], axis=1)

    def twist_q_jacobians(self, q, v, frames, h=1e-6):
        """d(frame twist)/dq in tangent coordinates, per frame, by batched
        central differences (the twist is linear in v but not in q)."""
        nv = self.nv
        qb = np.empty((2 * nv, self.nq))
        for i in range(nv):
            d = np.zeros(nv)
            d[i] = h
            qb[2 * i] = self.model.boxplus(q, d)
            qb[2 * i + 1] = self.model.boxplus(q, -d)
        vb = np.tile(np.asarray(v, dtype=float), (2 * nv, 1))
        R, p, axis_w = self.fk_arrays(qb)
        w, vel = self.vel_arrays(qb, vb, R, p, axis_w)
        out = {}
        for frame in frames:
            b, R_loc, t_loc = self._frame(frame)
            r = np.einsum("bij,j->bi", R[:, b], t_loc)
            tw = np.concatenate([vel[:, b] + _cross(w[:, b], r), w[:, b]],
                                axis=1)
            out[frame] = (tw[0::2] - tw[1::2]).T / (2 * h)
        return out

    def frame_jdot_v(self, q, v, frame):
        """d(J v)/dt - J a at a = 0: frame spatial acceleration drift."""
        b, R_loc, t_loc = self._frame(frame)
        R, p, axis_w = self.fk_arrays(q)
        w, vel = self.vel_arrays(q, v, R, p, axis_w)
        alpha, acc = self.acc_arrays(q, v, np.zeros(self.nv), R, p, axis_w, w)
        r = R[0, b] @ t_loc
        out = np.empty(6)
        out[0:3] = (acc[0, b] + np.cross(alpha[0, b], r)
                    + np.cross(w[0, b], np.cross(w[0, b], r)))
        out[3:6] = alpha[0, b]
        return out

    # -- dynamics --------------------------------------------------------------

    def rnea(self, q, v, a, wrenches=None, gravity=GRAVITY):
        """Generalized force M(q) a + H(q, v) - sum_i J_i' w_i.

        ``wrenches``: dict frame -> 6-vector [force; torque] applied at the
        frame origin, world axes. Accepts batched (B, n) inputs with batched
        wrench values; returns (nv,) or (B, nv).
        """
        q_in = np.asarray(q, dtype=float)
        batched = q_in.ndim == 2
        q = np.atleast_2d(q_in)
        v = np.atleast_2d(np.asarray(v, dtype=float))
        a = np.atleast_2d(np.asarray(a, dtype=float))
        B = q.shape[0]
        R, p, axis_w = self.fk_arrays(q)
        w, _vel = self.vel_arrays(q, v, R, p, axis_w)
        alpha, acc = self.acc_arrays(q, v, a, R, p, axis_w, w,
                                     base_lin_offset=-np.asarray(gravity))

        F = np.zeros((B, self.nb, 3))
        N = np.zeros((B, self.nb, 3))
        for b in range(self.nb):
            m = self.mass[b]
            Rw = R[:, b]
            c_w = np.einsum("bij,j->bi", Rw, self.com_local[b])
            acc_com = (acc[:, b] + _cross(alpha[:, b], c_w)
                       + _cross(w[:, b], _cross(w[:, b], c_w)))
            Iw = Rw @ self.inertia_local[b] @ Rw.transpose(0, 2, 1)
            F[:, b] = m * acc_com
            N[:, b] = (np.einsum("bij,bj->bi", Iw, alpha[:, b])
                       + _cross(w[:, b], np.einsum("bij,bj->bi", Iw, w[:, b]))
                       + _cross(c_w, F[:, b]))
        if wrenches:
            for frame, wr in wrenches.items():
                b, R_loc, t_loc = self._frame(frame)
                wr = np.atleast_2d(np.asarray(wr, dtype=float))
                pf = p[:, b] + np.einsum("bij,j->bi", R[:, b], t_loc)
                F[:, b] -= wr[:, 0:3]
                N[:, b] -= wr[:, 3:6] + _cross(pf - p[:, b], wr[:, 0:3])

        tau = np.zeros((B, self.nv))
        for b in range(self.nb - 1, 0, -1):
            s0, c0 = self.body_dof_start[b], self.body_dof_count[b]
            for k in range(s0 + c0 - 1, s0 - 1, -1):
                tau[:, 6 + k] = np.einsum("bi,bi->b", axis_w[:, k], N[:, b])
            par = self.parent[b]
            F[:, par] += F[:, b]
            N[:, par] += N[:, b] + _cross(p[:, b] - p[:, par], F[:, b])
        tau[:, 0:3] = F[:, 0]
        tau[:, 3:6] = np.einsum("bji,bj->bi", R[:, 0], N[:, 0])
        return tau if batched else tau[0]

    def bias(self, q, v, gravity=GRAVITY):
        """H(q, v): Coriolis, centrifugal and gravity generalized force."""
        return self.rnea(q, v, np.zeros(self.nv), gravity=gravity)

    def crba(self, q):
        """Mass matrix via composite rigid bodies in world-origin coordinates."""
        q = np.asarray(q, dtype=float)
        R, p, axis_w = self.fk_arrays(q)
        R, p, axis_w = R[0], p[0], axis_w[0]

        # spatial inertia of each body about the world origin
        I_comp = np.zeros((self.nb, 6, 6))
        for b in range(self.nb):
            m = self.mass[b]
            c = p[b] + R[b] @ self.com_local[b]
            Iw = R[b] @ self.inertia_local[b] @ R[b].T
            C = skew(c)
            I_comp[b, 0:3, 0:3] = m * np.eye(3)
            I_comp[b, 0:3, 3:6] = -m * C
            I_comp[b, 3:6, 0:3] = m * C
            I_comp[b, 3:6, 3:6] = Iw - m * (C @ C)

        # motion columns in the same coordinates
        S = np.zeros((self.nv, 6))
        S[0:3, 0:3] = np.eye(3)
        for i in range(3):
            wcol = R[0][:, i]
            S[3 + i, 0:3] = -np.cross(wcol, p[0])
            S[3 + i, 3:6] = wcol
        for k in range(self.ndof):
            ak = axis_w[k]
            S[6 + k, 0:3] = -np.cross(ak, p[self.dof_body[k]])
            S[6 + k, 3:6] = ak

        M = np.zeros((self.nv, self.nv))
        for b in range(self.nb - 1, 0, -1):
            s0, c0 = self.body_dof_start[b], self.body_dof_count[b]
            for k in range(s0 + c0 - 1, s0 - 1, -1):
                Fk = I_comp[b] @ S[6 + k]
                col = 6 + k
                M[col, col] = S[col] @ Fk
                for j in self.path_dofs[b]:
                    if j >= k:
                        continue
                    M[6 + j, col] = S[6 + j] @ Fk
                    M[col, 6 + j] = M[6 + j, col]
                base = S[0:6] @ Fk
                M[0:6, col] = base
                M[col, 0:6] = base
            I_comp[self.parent[b]] += I_comp[b]
        M[0:6, 0:6] = S[0:6] @ I_comp[0] @ S[0:6].T
        return M

    # -- task space ------------------------------------------------------------

    def task_errors(self, q, targets, v=None):
        """Pose (and optional twist) errors per keyframe.

        targets: dict frame -> dict with keys 'pos' (3,), optional 'rot'
        (3x3 target rotation), optional 'vel'/'omega'. Returns dict frame ->
        dict of residuals dp, dR (when rot given), dv, dw.
        """
        arrays = self.fk_arrays(q)
        vels = self.vel_arrays(q, v, *arrays) if v is not None else None
        out = {}
        for frame, tgt in targets.items():
            Rf, pf = self.frame_pose(q, frame, arrays)
            res = {"dp": pf - np.asarray(tgt["pos"], dtype=float)}
            if tgt.get("rot") is not None:
                res["dR"] = so3_log(quat_from_mat(
                    np.asarray(tgt["rot"]).T @ Rf, tol=1e-6))
            if v is not None and (tgt.get("vel") is not None
                                  or tgt.get("omega") is not None):
                tw = self.frame_velocity(q, v, frame, arrays, vels)
                if tgt.get("vel") is not None:
                    res["dv"] = tw[0:3] - np.asarray(tgt["vel"], dtype=float)
                if tgt.get("omega") is not None:
                    res["dw"] = tw[3:6] - np.asarray(tgt["omega"], dtype=float)
            out[frame] = res
        return out

    def orientation_residual_jacobian(self, dR, target_rot, J_ang):
        """Exact tangent Jacobian of dR = log(R_ref' R(q)) given the frame's
        world angular Jacobian rows."""
        return so3_left_jacobian_inv(dR) @ np.asarray(target_rot).T @ J_ang

    # -- centroidal ------------------------------------------------------------

    def com(self, q):
        """World center of mass."""
        R, p, _ = self.fk_arrays(q)
        c = np.einsum("b,nbi->ni", self.mass,
                      p + np.einsum("nbij,bj->nbi", R, self.com_local))
        return (c / self.total_mass)[0]

    def com_acceleration(self, q, v, a):
        """World acceleration of the total center of mass for a given
        generalized acceleration (no gravity folded in)."""
        R, p, axis_w = self.fk_arrays(q)
        w, _ = self.vel_arrays(q, v, R, p, axis_w)
        alpha, acc = self.acc_arrays(q, v, a, R, p, axis_w, w)
        out = np.zeros(3)
        for b in range(self.nb):
            m = self.mass[b]
            if m == 0.0:
                continue
            c_w = R[0, b] @ self.com_local[b]
            out += m * (acc[0, b] + np.cross(alpha[0, b], c_w)
                        + np.cross(w[0, b], np.cross(w[0, b], c_w)))
        return out / self.total_mass

    def centroidal_momentum(self, q, v):
        """(linear momentum, angular momentum about the CoM), world axes."""
        R, p, axis_w = self.fk_arrays(q)
        w, vel = self.vel_arrays(q, v, R, p, axis_w)
        R, p, w, vel = R[0], p[0], w[0], vel[0]
        com = self.com(q)
        P = np.zeros(3)
        L = np.zeros(3)
        for b in range(self.nb):
            m = self.mass[b]
            if m == 0.0 and np.abs(self.inertia_local[b]).max() == 0.0:
                continue
            c_w = R[b] @ self.com_local[b]
            v_com = vel[b] + np.cross(w[b], c_w)
            Iw = R[b] @ self.inertia_local[b] @ R[b].T
            P += m * v_com
            L += Iw @ w[b] + np.cross(p[b] + c_w - com, m * v_com)
        return P, L


def _mat_from_quat_batch(q):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _engine(model) -> KinDyn:
    eng = getattr(model, "_kindyn", None)
    if eng is None or eng.model is not model or set(eng.frames) != (
            set(model.link_index) | set(model.keyframes)):
        eng = KinDyn(model)
        model._kindyn = eng
    return eng


# module-level wrappers (engine cached on the model)

def fk(model, q):
    return _engine(model).fk(q)


def frame_pose(model, q, frame):
    return _engine(model).frame_pose(q, frame)


def frame_jacobian(model, q, frame):
    return _engine(model).frame_jacobian(q, frame)


def frame_velocity(model, q, v, frame):
    return _engine(model).frame_velocity(q, v, frame)


def frame_jdot_v(model, q, v, frame):
    return _engine(model).frame_jdot_v(q, v, frame)


def rnea(model, q, v, a, wrenches=None, gravity=GRAVITY):
    return _engine(model).rnea(q, v, a, wrenches, gravity)


def crba(model, q):
    return _engine(model).crba(q)


def bias(model, q, v, gravity=GRAVITY):
    return _engine(model).bias(q, v, gravity)


def task_errors(model, q, targets, v=None):
    return _engine(model).task_errors(q, targets, v)


def com(model, q):
    return _engine(model).com(q)


def centroidal_momentum(model, q, v):
    return _engine(model).centroidal_momentum(q, v)


def com_acceleration(model, q, v, a):
    return _engine(model).com_acceleration(q, v, a)
