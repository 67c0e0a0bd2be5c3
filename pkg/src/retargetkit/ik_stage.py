"""Per-timestep constrained inverse kinematics.

Each frame minimizes weighted squared position errors over every tracked
keyframe plus orientation errors over end effectors only, regularized toward
the previous solution, subject to joint position limits and per-step joint
velocity limits (the floating base is free). Frames are solved sequentially,
each warm-started from its predecessor; the first frame starts at the rest
configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kinodyn
from .core_math import mat_from_quat, quat_from_mat, so3_log, so3_left_jacobian_inv
from .opt import NlpProblem, ProductManifold, ResidualBlock, solve_sqp


class IkError(RuntimeError):
    """Solver failure; carries the frame index, report, and partial results."""

    def __init__(self, frame_index, report, partial_q):
        super().__init__(f"IK failed at frame {frame_index}: {report.status}")
        self.frame_index = frame_index
        self.report = report
        self.partial_q = partial_q


@dataclass
class IkWeights:
    w_pos: float = 1.0
    w_rot: float = 1.0
    w_reg: float = 1e-3   # joint regularization toward the previous solution


@dataclass
class IkResult:
    q_seq: np.ndarray
    reports: list
    total_iterations: int


def targets_from_human(calibrated_model, human_traj, correspondences,
                       ee_offsets=None, ee_track_orientation=None):
    """Replay the generalized trajectory on the calibrated human model and
    emit per-frame targets keyed by robot keyframe names.

    End-effector orientation targets are the replayed bone orientations
    post-multiplied by the calibrated rest offsets; positions come straight
    from the replayed bone origins.
    """
    ee_offsets = ee_offsets or {}
    ee_track_orientation = ee_track_orientation or {}
    eng = kinodyn._engine(calibrated_model)
    targets = []
    for k in range(human_traj.n_frames):
        arrays = eng.fk_arrays(human_traj.q_seq[k])
        frame_targets = {}
        for role, (h_frame, r_frame) in correspondences.items():
            R, p = eng.frame_pose(human_traj.q_seq[k], h_frame, arrays)
            entry = {"pos": p.copy(), "rot": None}
            if ee_track_orientation.get(role, False):
                off = ee_offsets.get(role)
                entry["rot"] = R @ off.rotmat if off is not None else R.copy()
            frame_targets[r_frame] = entry
        targets.append(frame_targets)
    return targets


def _frame_problem(robot, targets, q_prev, dt, weights):
    eng = kinodyn._engine(robot)
    nv, nq = robot.nv, robot.nq
    nj = nq - 7
    man = ProductManifold([("vec", 3), ("quat",), ("vec", nj)])
    names = sorted(targets)
    pos_refs = [np.asarray(targets[n]["pos"], dtype=float) for n in names]
    rot_refs = [targets[n].get("rot") for n in names]
    n_rot = sum(1 for r in rot_refs if r is not None)
    cols = np.arange(nv)

    def residuals(q):
        arrays = eng.fk_arrays(q)
        r = np.empty(3 * len(names) + 3 * n_rot)
        i = 0
        for name, p_ref, R_ref in zip(names, pos_refs, rot_refs):
            R, p = eng.frame_pose(q, name, arrays)
            r[i:i + 3] = p - p_ref
            i += 3
            if R_ref is not None:
                r[i:i + 3] = so3_log(quat_from_mat(R_ref.T @ R, tol=1e-6))
                i += 3
        return r

    def jacobian(q):
        arrays = eng.fk_arrays(q)
        J = np.zeros((3 * len(names) + 3 * n_rot, nv))
        i = 0
        for name, p_ref, R_ref in zip(names, pos_refs, rot_refs):
            Jf = eng.frame_jacobian(q, name, arrays)
            J[i:i + 3] = Jf[0:3]
            i += 3
            if R_ref is not None:
                R, _ = eng.frame_pose(q, name, arrays)
                dR = so3_log(quat_from_mat(R_ref.T @ R, tol=1e-6))
                J[i:i + 3] = so3_left_jacobian_inv(dR) @ R_ref.T @ Jf[3:6]
                i += 3
        return J

    w = np.empty(3 * len(names) + 3 * n_rot)
    i = 0
    for R_ref in rot_refs:
        w[i:i + 3] = weights.w_pos
        i += 3
        if R_ref is not None:
            w[i:i + 3] = weights.w_rot
            i += 3

    blocks = [ResidualBlock("track", cols, w, residuals, jacobian)]
    if nj:
        jcols = np.arange(6, nv)
        q_prev_j = q_prev[7:].copy()
        blocks.append(ResidualBlock(
            "reg", jcols, np.full(nj, weights.w_reg),
            lambda q: q[7:] - q_prev_j,
            lambda q: np.eye(nj)))

    q_lo = np.full(nq, -np.inf)
    q_hi = np.full(nq, np.inf)
    if nj:
        lo, hi, v_max, _ = robot.joint_limit_arrays()
        q_lo[7:] = np.maximum(lo, q_prev[7:] - v_max * dt)
        q_hi[7:] = np.minimum(hi, q_prev[7:] + v_max * dt)
    return NlpProblem(man, q_prev.copy(), blocks, [], q_lo, q_hi)


def solve_ik_frame(robot, targets, q_prev, dt, weights=None, tol_kkt=1e-8,
                   max_iter=60):
    """Solve one frame. Returns (q, SolveReport); the result satisfies the
    joint position box and the per-step velocity box to QP tolerance."""
    weights = weights or IkWeights()
    prob = _frame_problem(robot, targets, q_prev, dt, weights)
    q, report = solve_sqp(prob, max_iter=max_iter, tol_kkt=tol_kkt,
                          tol_feas=1e-10)
    return q, report


def solve_ik_sequence(robot, targets_seq, dt, weights=None, q0=None,
                      tol_kkt=1e-8, polish_first=True) -> IkResult:
    """Sequentially solve every frame, warm-starting from the previous
    solution. Raises IkError with partial results on any frame failure.

    The first frame is re-solved against its own solution until the
    regularization anchor stops moving, so the sequence starts at a
    drift-free fixed point instead of carrying the rest-seed transient
    through the early frames (and into downstream finite differences).
    """
    weights = weights or IkWeights()
    q_prev = robot.neutral_q() if q0 is None else np.asarray(q0, dtype=float)
    q_out = np.zeros((len(targets_seq), robot.nq))
    reports = []
    for k, targets in enumerate(targets_seq):
        q, report = solve_ik_frame(robot, targets, q_prev, dt, weights,
                                   tol_kkt=tol_kkt)
        if k == 0 and polish_first and report.status == "optimal":
            for _ in range(20):
                q_next, rep_next = solve_ik_frame(robot, targets, q, dt,
                                                  weights, tol_kkt=tol_kkt)
                if rep_next.status != "optimal":
                    break
                moved = np.abs(q_next - q).max()
                q, report = q_next, rep_next
                if moved < 1e-9:
                    break
        if report.status not in ("optimal",):
            raise IkError(k, report, q_out[:k])
        q_out[k] = q
        reports.append(report)
        q_prev = q
    return IkResult(q_out, reports, sum(r.iterations for r in reports))
