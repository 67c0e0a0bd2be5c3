"""Calibrate the synthesized human model to robot dimensions.

Five groups, applied in this order: end-effector offsets, arm length scales,
leg translation replacement, main-body affine (xz shear plus independent y/z
scalings), root position scale. Both rest snapshots are taken with the base
at the origin and identity orientation (the human link frames are aligned to
the robot root by construction), so relative keyframe positions compare
directly.

Roles follow the keyframe vocabulary: ``waist`` and ``{left,right}_{shoulder,
elbow,wrist,hip,knee,ankle}``. The correspondence map is role -> (human bone,
robot keyframe); groups whose roles are absent are skipped, which lets a
legs-only robot calibrate against a full skeleton.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core_math import Transform, mat_from_quat, quat_from_mat
from .robot_model import RobotModel, JointSpec
from . import kinodyn

SIDES = ("left", "right")
EE_ROLES = ("left_wrist", "right_wrist", "left_ankle", "right_ankle")


class CalibrationError(ValueError):
    pass


class MissingKeyframeError(CalibrationError):
    pass


class IllPosedFitError(CalibrationError):
    pass


class ZeroLengthError(CalibrationError):
    pass


@dataclass
class CalibrationMap:
    correspondences: dict                  # role -> (human frame, robot frame)
    ee_offsets: dict = field(default_factory=dict)   # role -> Transform
    ee_track_orientation: dict = field(default_factory=dict)
    arm_scales: dict = field(default_factory=dict)   # "left_upper" etc -> s
    body_affine: dict = field(default_factory=dict)  # k_x, s_y, s_z
    s_root: float = 1.0

    def affine_matrix(self):
        a = self.body_affine
        return np.array([
            [1.0, 0.0, a.get("k_x", 0.0)],
            [0.0, a.get("s_y", 1.0), 0.0],
            [0.0, 0.0, a.get("s_z", 1.0)],
        ])

    def to_json(self):
        from .core_math import rpy_from_mat
        doc = {
            "correspondences": {r: list(v) for r, v in
                                self.correspondences.items()},
            "ee_offsets": {
                r: {"xyz": [float(x) for x in t.trans],
                    "rpy": [float(x) for x in rpy_from_mat(t.rotmat)]}
                for r, t in self.ee_offsets.items()},
            "ee_track_orientation": {r: bool(v) for r, v in
                                     self.ee_track_orientation.items()},
            "arm_scales": {k: float(v) for k, v in self.arm_scales.items()},
            "body_affine": {k: float(v) for k, v in self.body_affine.items()},
            "s_root": float(self.s_root),
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def rest_snapshot(model: RobotModel):
    """World pose of every link and keyframe at the neutral configuration."""
    return kinodyn.fk(model, model.neutral_q())


def _get(snap, frame, what):
    try:
        return snap[frame]
    except KeyError:
        raise MissingKeyframeError(f"{what}: frame {frame!r} not in snapshot") \
            from None


def _chain_joints(model: RobotModel, from_link, to_link):
    """Joints along the unique path from `from_link` down to `to_link`."""
    chain = []
    link = to_link
    while link != from_link:
        j = model.parent_joint.get(link)
        if j is None:
            raise CalibrationError(
                f"{from_link!r} is not an ancestor of {to_link!r}")
        chain.append(j)
        link = j.parent
    return list(reversed(chain))


def _with_new_origins(model: RobotModel, new_trans):
    """Copy of the model with selected joint-origin translations replaced."""
    joints = []
    for j in model.joints:
        if j.name in new_trans:
            joints.append(JointSpec(
                j.name, j.kind, j.parent, j.child,
                origin=Transform(j.origin.rot, new_trans[j.name]),
                axis=None if j.axis is None else j.axis.copy(),
                q_min=j.q_min.copy(), q_max=j.q_max.copy(),
                v_max=j.v_max.copy(), tau_max=j.tau_max.copy()))
        else:
            joints.append(j)
    out = RobotModel(model.links, joints, dict(model.keyframes), name=model.name)
    return out


# -- group 1: end effectors ----------------------------------------------------

_EE_PARENT_ROLE = {"wrist": "elbow", "ankle": "knee"}


def calibrate_end_effectors(human_snap, robot_snap, correspondences,
                            track_orientation=None):
    """Residual EE offsets between human and robot rest chains.

    Orientation offset R_human' R_robot feeds the IK orientation targets;
    it is identity (and tracking disabled downstream) for EEs flagged as
    lacking the rotational freedom to follow orientations. Position offsets
    are parent-keyframe-relative residuals, recorded for audit.
    """
    track_orientation = track_orientation or {}
    offsets = {}
    flags = {}
    for role in EE_ROLES:
        if role not in correspondences:
            continue
        h_ee, r_ee = correspondences[role]
        side, kind = role.split("_", 1)
        parent_role = f"{side}_{_EE_PARENT_ROLE[kind]}"
        if parent_role not in correspondences:
            raise MissingKeyframeError(f"{role}: missing parent role "
                                       f"{parent_role!r}")
        h_par, r_par = correspondences[parent_role]
        Th = _get(human_snap, h_ee, role)
        Tr = _get(robot_snap, r_ee, role)
        Rh = mat_from_quat(Th.rot)
        d_h = Rh.T @ (Th.trans - _get(human_snap, h_par, role).trans)
        Rr_par = mat_from_quat(_get(robot_snap, r_par, role).rot)
        d_r = mat_from_quat(Tr.rot).T @ (Tr.trans
                                         - _get(robot_snap, r_par, role).trans)
        track = bool(track_orientation.get(role, True))
        flags[role] = track
        if track:
            R_off = Rh.T @ mat_from_quat(Tr.rot)
            offsets[role] = Transform(quat_from_mat(R_off), d_r - d_h)
        else:
            offsets[role] = Transform.identity()
    return offsets, flags


# -- group 2: arms --------------------------------------------------------------

def calibrate_arm(human_snap, robot_snap, correspondences, side):
    """Scalar length scales for the shoulder-elbow and elbow-wrist segments."""
    out = {}
    for seg, (a_role, b_role) in (("upper", ("shoulder", "elbow")),
                                  ("fore", ("elbow", "wrist"))):
        ra, rb = f"{side}_{a_role}", f"{side}_{b_role}"
        if ra not in correspondences or rb not in correspondences:
            raise MissingKeyframeError(f"arm calibration needs {ra} and {rb}")
        ha, raf = correspondences[ra]
        hb, rbf = correspondences[rb]
        lh = np.linalg.norm(_get(human_snap, hb, rb).trans
                            - _get(human_snap, ha, ra).trans)
        lr = np.linalg.norm(_get(robot_snap, rbf, rb).trans
                            - _get(robot_snap, raf, ra).trans)
        if lh < 1e-12:
            raise ZeroLengthError(f"human segment {ra}->{rb} has zero length")
        out[f"{side}_{seg}"] = lr / lh
    return out


def _apply_arm_scales(model, correspondences, scales):
    new_trans = {}
    for side in SIDES:
        for seg, (a_role, b_role) in (("upper", ("shoulder", "elbow")),
                                      ("fore", ("elbow", "wrist"))):
            key = f"{side}_{seg}"
            if key not in scales:
                continue
            a = correspondences[f"{side}_{a_role}"][0]
            b = correspondences[f"{side}_{b_role}"][0]
            for j in _chain_joints(model, a, b):
                new_trans[j.name] = scales[key] * j.origin.trans
    return new_trans


# -- group 3: legs ---------------------------------------------------------------

def calibrate_legs(model, human_snap, robot_snap, correspondences):
    """Replace hip->knee and knee->ankle rest translations with the robot's.

    Multi-joint human chains distribute the correction proportionally to the
    original segment lengths; the single-bone case is an exact replacement.
    """
    new_trans = {}
    for side in SIDES:
        for a_role, b_role in (("hip", "knee"), ("knee", "ankle")):
            ra, rb = f"{side}_{a_role}", f"{side}_{b_role}"
            if ra not in correspondences or rb not in correspondences:
                raise MissingKeyframeError(f"leg calibration needs {ra}, {rb}")
            ha, raf = correspondences[ra]
            hb, rbf = correspondences[rb]
            target = (_get(robot_snap, rbf, rb).trans
                      - _get(robot_snap, raf, ra).trans)
            chain = _chain_joints(model, ha, hb)
            total = sum(np.linalg.norm(j.origin.trans) for j in chain)
            current = np.zeros(3)
            for j in chain:
                current = current + j.origin.trans
            delta = target - current
            if total < 1e-12:
                raise ZeroLengthError(f"zero-length human chain {ra}->{rb}")
            for j in chain:
                w = np.linalg.norm(j.origin.trans) / total
                new_trans[j.name] = j.origin.trans + w * delta
    return new_trans


# -- group 4: main body ----------------------------------------------------------

_BODY_TARGET_ROLES = ("left_shoulder", "right_shoulder", "left_hip", "right_hip")


def calibrate_main_body(human_snap, robot_snap, correspondences):
    """Fit A = [[1,0,k_x],[0,s_y,0],[0,0,s_z]] over the waist-anchored
    vector pairs (least squares across all available shoulder/hip targets)."""
    if "waist" not in correspondences:
        raise MissingKeyframeError("main-body calibration needs a waist role")
    hw, rw = correspondences["waist"]
    pw_h = _get(human_snap, hw, "waist").trans
    pw_r = _get(robot_snap, rw, "waist").trans
    pairs = []
    for role in _BODY_TARGET_ROLES:
        if role not in correspondences:
            continue
        h, r = correspondences[role]
        pairs.append((_get(human_snap, h, role).trans - pw_h,
                      _get(robot_snap, r, role).trans - pw_r))
    if not pairs:
        raise MissingKeyframeError("main-body calibration needs shoulder or "
                                   "hip roles")
    ph = np.array([p for p, _ in pairs])
    pr = np.array([p for _, p in pairs])
    zz = float(ph[:, 2] @ ph[:, 2])
    if zz < 1e-12:
        raise IllPosedFitError("all z-components vanish; shear/scale fit "
                               "is rank deficient")
    yy = float(ph[:, 1] @ ph[:, 1])
    s_y = float(pr[:, 1] @ ph[:, 1]) / yy if yy > 1e-12 else 1.0
    s_z = float(pr[:, 2] @ ph[:, 2]) / zz
    k_x = float((pr[:, 0] - ph[:, 0]) @ ph[:, 2]) / zz
    return {"k_x": k_x, "s_y": s_y, "s_z": s_z}


def _apply_body_affine(model, correspondences, affine):
    A = np.array([[1.0, 0.0, affine["k_x"]],
                  [0.0, affine["s_y"], 0.0],
                  [0.0, 0.0, affine["s_z"]]])
    waist = correspondences["waist"][0]
    edges = {}
    for role in _BODY_TARGET_ROLES:
        if role not in correspondences:
            continue
        for j in _chain_joints(model, waist, correspondences[role][0]):
            edges[j.name] = j
    return {name: A @ j.origin.trans for name, j in edges.items()}


# -- group 5: root scale -----------------------------------------------------------

def calibrate_root_scale(model_before: RobotModel, model_after: RobotModel,
                         correspondences):
    """Norm ratio of the corrected vs original root-to-ankle rest vectors,
    averaged over sides (equal for symmetric models)."""
    snap_b = rest_snapshot(model_before)
    snap_a = rest_snapshot(model_after)
    root_b = snap_b[model_before.root_link].trans
    root_a = snap_a[model_after.root_link].trans
    ratios = []
    for side in SIDES:
        role = f"{side}_ankle"
        if role not in correspondences:
            continue
        bone = correspondences[role][0]
        orig = np.linalg.norm(snap_b[bone].trans - root_b)
        corr = np.linalg.norm(snap_a[bone].trans - root_a)
        if orig < 1e-12:
            raise ZeroLengthError("original root-to-ankle vector has zero length")
        ratios.append(corr / orig)
    if not ratios:
        raise MissingKeyframeError("root-scale calibration needs ankle roles")
    return float(np.mean(ratios))


# -- orchestration -------------------------------------------------------------------

def calibrate_all(human_model: RobotModel, robot: RobotModel, correspondences,
                  track_orientation=None):
    """Run every applicable group in order (EE, arms, legs, body, root) and
    return (calibrated human model, CalibrationMap)."""
    human_snap = rest_snapshot(human_model)
    robot_snap = rest_snapshot(robot)
    cal = CalibrationMap(correspondences=dict(correspondences))

    have = lambda *roles: all(r in correspondences for r in roles)

    cal.ee_offsets, cal.ee_track_orientation = calibrate_end_effectors(
        human_snap, robot_snap, correspondences, track_orientation)

    new_trans = {}
    for side in SIDES:
        if have(f"{side}_shoulder", f"{side}_elbow", f"{side}_wrist"):
            cal.arm_scales.update(
                calibrate_arm(human_snap, robot_snap, correspondences, side))
    new_trans.update(_apply_arm_scales(human_model, correspondences,
                                       cal.arm_scales))

    if have("left_hip", "left_knee", "left_ankle",
            "right_hip", "right_knee", "right_ankle"):
        new_trans.update(calibrate_legs(human_model, human_snap, robot_snap,
                                        correspondences))

    body_roles = [r for r in _BODY_TARGET_ROLES if r in correspondences]
    if "waist" in correspondences and body_roles:
        cal.body_affine = calibrate_main_body(human_snap, robot_snap,
                                              correspondences)
        new_trans.update(_apply_body_affine(human_model, correspondences,
                                            cal.body_affine))

    calibrated = _with_new_origins(human_model, new_trans)
    cal.s_root = calibrate_root_scale(human_model, calibrated, correspondences)
    return calibrated, cal
