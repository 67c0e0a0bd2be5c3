"""Synthesize a human URDF from rest-pose bone positions and convert bone
pose frames into a generalized-coordinate trajectory.

Every link frame of the synthesized model shares the orientation of a
user-chosen aligned frame (the target robot's root-link rest orientation),
so joint-origin rotations are identity and each origin translation is just
the world-frame bone offset rotated into the aligned frame. All joints are
spherical (intrinsic X-Y-Z euler) unless explicitly marked fixed; links
carry no inertia since the model is used kinematically only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_math import (
    GimbalLockError, check_rotation, euler_xyz_from_mat, quat_from_mat,
    mat_from_quat, Transform,
)
from .robot_model import RobotModel, LinkSpec, JointSpec
from .motion_io import SkeletonMotion


class DegenerateBoneError(ValueError):
    """Parent and child bone rest positions coincide."""


class ReplayGimbalError(ValueError):
    """Euler extraction hit gimbal lock; carries joint name and frame index."""

    def __init__(self, joint, frame_index, nearest):
        super().__init__(f"gimbal lock at joint {joint!r}, frame {frame_index}")
        self.joint = joint
        self.frame_index = frame_index
        self.nearest = nearest


@dataclass
class HumanTrajectory:
    """Generalized-coordinate replay of a skeleton motion on a human model."""

    model: RobotModel
    q_seq: np.ndarray        # (n_frames, nq)
    dt: float
    s_root: float = 1.0

    @property
    def n_frames(self):
        return self.q_seq.shape[0]

    def rescale_root(self, s_root):
        """Apply a new root position scale (root positions are linear in it)."""
        q = self.q_seq.copy()
        q[:, 0:3] *= s_root / self.s_root
        return HumanTrajectory(self.model, q, self.dt, s_root)


def build_human_urdf(motion: SkeletonMotion, aligned_rot=None,
                     fixed_bones=(), name="human") -> RobotModel:
    """One link per bone; joint origin translations from rest-pose bone
    offsets expressed in the aligned frame."""
    R_WA = np.eye(3) if aligned_rot is None else check_rotation(aligned_rot, 1e-9)
    rest = motion.rest_pose
    links = [LinkSpec(b) for b, _ in motion.bones]
    joints = []
    for bone, parent in motion.bones:
        if parent is None:
            continue
        delta = rest[bone].trans - rest[parent].trans
        if np.linalg.norm(delta) < 1e-10 and bone not in fixed_bones:
            raise DegenerateBoneError(
                f"bone {bone!r} coincides with parent {parent!r} in rest pose")
        kind = "fixed" if bone in fixed_bones else "spherical"
        joints.append(JointSpec(
            bone, kind, parent, bone,
            origin=Transform(np.array([1.0, 0, 0, 0]), R_WA.T @ delta)))
    return RobotModel(links, joints, name=name)


def bone_to_link_rotations(motion: SkeletonMotion, aligned_rot=None):
    """Rest-pose rotation from each bone frame to its aligned link frame:
    R_bone_link = R_world_bone[rest]' R_world_aligned."""
    R_WA = np.eye(3) if aligned_rot is None else check_rotation(aligned_rot, 1e-9)
    out = {}
    for bone, _ in motion.bones:
        out[bone] = mat_from_quat(motion.rest_pose[bone].rot).T @ R_WA
    return out


def rest_configuration(motion: SkeletonMotion, model: RobotModel,
                       aligned_rot=None, s_root=1.0):
    """Generalized coordinates reproducing the rest pose."""
    R_WA = np.eye(3) if aligned_rot is None else np.asarray(aligned_rot)
    q = model.neutral_q()
    q[0:3] = s_root * motion.rest_pose[motion.root_bone].trans
    q[3:7] = quat_from_mat(R_WA)
    return q


def compute_generalized_traj(motion: SkeletonMotion, model: RobotModel,
                             rotations=None, aligned_rot=None,
                             s_root=1.0) -> HumanTrajectory:
    """Per frame: scaled root position, root quaternion through the rest
    bone-to-link rotation, and intrinsic X-Y-Z euler angles per spherical
    joint. Raises ReplayGimbalError naming the joint and frame on euler
    singularities instead of silently remapping."""
    if rotations is None:
        rotations = bone_to_link_rotations(motion, aligned_rot)
    root = motion.root_bone
    n = motion.n_frames
    q_seq = np.zeros((n, model.nq))
    for k, frame in enumerate(motion.frames):
        q = q_seq[k]
        q[0:3] = s_root * frame[root].trans
        R_WB1 = mat_from_quat(frame[root].rot)
        q[3:7] = quat_from_mat(R_WB1 @ rotations[root], tol=1e-6)
        for j in model.joints:
            if j.kind != "spherical":
                continue
            bone, parent = j.child, j.parent
            R_rel = (rotations[parent].T
                     @ mat_from_quat(frame[parent].rot).T
                     @ mat_from_quat(frame[bone].rot)
                     @ rotations[bone])
            try:
                q[model.joint_q_slice(j.name)] = euler_xyz_from_mat(R_rel, tol=1e-6)
            except GimbalLockError as e:
                raise ReplayGimbalError(j.name, k, e.nearest) from None
    return HumanTrajectory(model, q_seq, 1.0 / motion.fps, s_root)


def motion_from_model_traj(model: RobotModel, q_seq, fps, rest_q=None,
                           rest_bone_rots=None, contacts=None) -> SkeletonMotion:
    """Inverse of the conversion above, mainly for fixtures and round-trip
    tests: FK the model along q_seq and emit bone world poses.

    ``rest_bone_rots`` gives each bone's rest world rotation (defaults to the
    model's aligned/link orientation); bones move rigidly with their links.
    """
    from . import kinodyn

    link_names = [l.name for l in model.links]
    bones = []
    for name in link_names:
        pj = model.parent_joint.get(name)
        bones.append((name, pj.parent if pj is not None else None))

    q_seq = np.asarray(q_seq, dtype=float)
    if rest_q is None:
        rest_q = q_seq[0]
    eng_rest = kinodyn.fk(model, rest_q)
    R_align = {}
    rest_pose = {}
    for name in link_names:
        R_link_rest = mat_from_quat(eng_rest[name].rot)
        R_bone_rest = (np.asarray(rest_bone_rots[name], dtype=float)
                       if rest_bone_rots else R_link_rest)
        # bone rides rigidly on the link: R_WB[k] = R_WL[k] R_WL[r]' R_WB[r]
        R_align[name] = R_link_rest.T @ R_bone_rest
        rest_pose[name] = Transform(quat_from_mat(R_bone_rest),
                                    eng_rest[name].trans)
    frames = []
    for q in q_seq:
        fkk = kinodyn.fk(model, q)
        frame = {}
        for name in link_names:
            R = mat_from_quat(fkk[name].rot) @ R_align[name]
            frame[name] = Transform(quat_from_mat(R), fkk[name].trans)
        frames.append(frame)
    return SkeletonMotion(bones, rest_pose, frames, fps, contacts)
