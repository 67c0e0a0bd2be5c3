"""Demo robots and synthetic human motions used by tests and the CLI demo.

The default demo robot is dimensioned as an affine-consistent copy of the
canonical 16-bone human skeleton (shoulder/hip spreads scaled by one
y-factor, torso heights by one z-factor, legs by the y-factor), so rest-pose
calibration reproduces its torso and leg keyframes exactly and the root
scale comes out collinear. Randomized variants break that consistency on
purpose for the calibration-benefit suite.

Motions are scripted in generalized coordinates on the synthesized human
model and converted to world bone poses, which keeps every frame kinematically
consistent by construction.
"""

from __future__ import annotations

import numpy as np

from .core_math import Transform, so3_exp
from .robot_model import RobotModel, LinkSpec, JointSpec
from .motion_io import SkeletonMotion
from . import human_urdf

# canonical human rest skeleton: name -> (parent, world position)
HUMAN_BONES = {
    "pelvis": (None, (0.0, 0.0, 0.95)),
    "spine": ("pelvis", (0.0, 0.0, 1.08)),
    "chest": ("spine", (0.0, 0.0, 1.22)),
    "head": ("chest", (0.0, 0.0, 1.52)),
    "left_shoulder": ("chest", (0.0, 0.18, 1.45)),
    "left_elbow": ("left_shoulder", (0.0, 0.46, 1.45)),
    "left_wrist": ("left_elbow", (0.0, 0.72, 1.45)),
    "right_shoulder": ("chest", (0.0, -0.18, 1.45)),
    "right_elbow": ("right_shoulder", (0.0, -0.46, 1.45)),
    "right_wrist": ("right_elbow", (0.0, -0.72, 1.45)),
    "left_hip": ("pelvis", (0.0, 0.09, 0.88)),
    "left_knee": ("left_hip", (0.0, 0.09, 0.48)),
    "left_ankle": ("left_knee", (0.0, 0.09, 0.0)),
    "right_hip": ("pelvis", (0.0, -0.09, 0.88)),
    "right_knee": ("right_hip", (0.0, -0.09, 0.48)),
    "right_ankle": ("right_knee", (0.0, -0.09, 0.0)),
}

HUMAN_THIGH = 0.40
HUMAN_SHIN = 0.48   # knee -> ankle, ankle point at ground level
HUMAN_HIP_Y = 0.09
HUMAN_ROOT_Z = 0.95

# demo robot default dimensions: y-quantities = 0.9x human, z-quantities of
# the torso = 0.7x human, legs sized so the root-to-ankle vector stays
# collinear with the human one (total drop 0.9 x 0.95 = 0.855)
DEMO_DIMS = {
    "hip_y": 0.081,       # 0.09 * 0.9
    "hip_z": 0.049,       # 0.07 * 0.7
    "thigh": 0.38,
    "shin": 0.36,
    "sole_z": 0.066,      # ankle joint to sole; 0.049+0.38+0.36+0.066 = 0.855
    "shoulder_y": 0.162,  # 0.18 * 0.9
    "shoulder_z": 0.35,   # 0.50 * 0.7
    "upper_arm": 0.26,
    "forearm": 0.24,
    "foot_half_len": 0.10,
    "foot_half_wid": 0.05,
}


def _box_inertia(m, x, y, z):
    return m / 12.0 * np.diag([y * y + z * z, x * x + z * z, x * x + y * y])


def _T(xyz):
    return Transform(np.array([1.0, 0, 0, 0]), np.asarray(xyz, dtype=float))


def make_demo_robot(with_arms=True, dims=None, name=None) -> RobotModel:
    """Floating-base biped (12 leg dofs) optionally with 4-dof arms.

    z-up, x-forward; zero configuration is the standing rest pose with
    straight legs and arms hanging down. Keyframes: waist, per-side hip /
    knee / ankle / foot (ankle and foot both at the sole center), and with
    arms also shoulder / elbow / wrist.
    """
    d = dict(DEMO_DIMS)
    if dims:
        d.update(dims)
    links = [LinkSpec("torso", 13.5, [0.0, 0.0, 0.12],
                      _box_inertia(13.5, 0.22, 0.30, 0.42))]
    joints = []
    keyframes = {"waist": ("torso", Transform.identity())}

    leg_lim = dict(q_min=-2.6, q_max=2.6, v_max=25.0, tau_max=300.0)
    ankle_lim = dict(q_min=-2.6, q_max=2.6, v_max=25.0, tau_max=150.0)
    for side, sgn in (("left", 1.0), ("right", -1.0)):
        p = f"{side[0]}_"
        links += [
            LinkSpec(p + "hip_a", 0.4, [0, 0, 0], _box_inertia(0.4, 0.08, 0.08, 0.08)),
            LinkSpec(p + "hip_b", 0.4, [0, 0, 0], _box_inertia(0.4, 0.08, 0.08, 0.08)),
            LinkSpec(p + "thigh", 2.4, [0, 0, -d["thigh"] / 2],
                     _box_inertia(2.4, 0.10, 0.10, d["thigh"])),
            LinkSpec(p + "shin", 1.6, [0, 0, -d["shin"] / 2],
                     _box_inertia(1.6, 0.08, 0.08, d["shin"])),
            LinkSpec(p + "ankle_a", 0.2, [0, 0, 0], _box_inertia(0.2, 0.05, 0.05, 0.05)),
            LinkSpec(p + "foot", 0.7, [0.02, 0, -d["sole_z"] / 2],
                     _box_inertia(0.7, 2 * d["foot_half_len"],
                                  2 * d["foot_half_wid"], d["sole_z"])),
        ]
        joints += [
            JointSpec(p + "hip_yaw", "revolute", "torso", p + "hip_a",
                      origin=_T([0, sgn * d["hip_y"], -d["hip_z"]]),
                      axis=[0, 0, 1], q_min=-1.5, q_max=1.5, v_max=25.0,
                      tau_max=300.0),
            JointSpec(p + "hip_roll", "revolute", p + "hip_a", p + "hip_b",
                      axis=[1, 0, 0], q_min=-1.5, q_max=1.5, v_max=25.0,
                      tau_max=300.0),
            JointSpec(p + "hip_pitch", "revolute", p + "hip_b", p + "thigh",
                      axis=[0, 1, 0], **leg_lim),
            JointSpec(p + "knee", "revolute", p + "thigh", p + "shin",
                      origin=_T([0, 0, -d["thigh"]]), axis=[0, 1, 0], **leg_lim),
            JointSpec(p + "ankle_pitch", "revolute", p + "shin", p + "ankle_a",
                      origin=_T([0, 0, -d["shin"]]), axis=[0, 1, 0], **ankle_lim),
            JointSpec(p + "ankle_roll", "revolute", p + "ankle_a", p + "foot",
                      axis=[1, 0, 0], **ankle_lim),
        ]
        keyframes[f"{side}_hip"] = (p + "thigh", Transform.identity())
        keyframes[f"{side}_knee"] = (p + "shin", Transform.identity())
        keyframes[f"{side}_ankle"] = (p + "foot", _T([0, 0, -d["sole_z"]]))
        keyframes[f"{side}_foot"] = (p + "foot", _T([0, 0, -d["sole_z"]]))

    if with_arms:
        arm_lim = dict(q_min=-2.8, q_max=2.8, v_max=20.0, tau_max=60.0)
        for side, sgn in (("left", 1.0), ("right", -1.0)):
            p = f"{side[0]}_"
            links += [
                LinkSpec(p + "sh_a", 0.3, [0, 0, 0], _box_inertia(0.3, 0.06, 0.06, 0.06)),
                LinkSpec(p + "sh_b", 0.3, [0, 0, 0], _box_inertia(0.3, 0.06, 0.06, 0.06)),
                LinkSpec(p + "uarm", 1.1, [0, 0, -d["upper_arm"] / 2],
                         _box_inertia(1.1, 0.07, 0.07, d["upper_arm"])),
                LinkSpec(p + "farm", 0.8, [0, 0, -d["forearm"] / 2],
                         _box_inertia(0.8, 0.06, 0.06, d["forearm"])),
            ]
            joints += [
                JointSpec(p + "sh_pitch", "revolute", "torso", p + "sh_a",
                          origin=_T([0, sgn * d["shoulder_y"], d["shoulder_z"]]),
                          axis=[0, 1, 0], **arm_lim),
                JointSpec(p + "sh_roll", "revolute", p + "sh_a", p + "sh_b",
                          axis=[1, 0, 0], **arm_lim),
                JointSpec(p + "sh_yaw", "revolute", p + "sh_b", p + "uarm",
                          axis=[0, 0, 1], **arm_lim),
                JointSpec(p + "elbow", "revolute", p + "uarm", p + "farm",
                          origin=_T([0, 0, -d["upper_arm"]]), axis=[0, 1, 0],
                          **arm_lim),
            ]
            keyframes[f"{side}_shoulder"] = (p + "uarm", Transform.identity())
            keyframes[f"{side}_elbow"] = (p + "farm", Transform.identity())
            keyframes[f"{side}_wrist"] = (p + "farm", _T([0, 0, -d["forearm"]]))

    model = RobotModel(links, joints, keyframes,
                       name=name or ("demo_humanoid" if with_arms else "demo_biped"))
    model.demo_dims = d
    return model


def make_random_robot(rng, with_arms=True):
    """Limb dimensions perturbed by +-30 percent (calibration-benefit suite)."""
    d = dict(DEMO_DIMS)
    for key in ("hip_y", "hip_z", "thigh", "shin", "shoulder_y", "shoulder_z",
                "upper_arm", "forearm", "sole_z"):
        d[key] = DEMO_DIMS[key] * rng.uniform(0.7, 1.3)
    return make_demo_robot(with_arms=with_arms, dims=d,
                           name=f"random_robot_{rng.integers(1 << 30)}")


def default_correspondences(with_arms=True):
    """role -> (human bone, robot keyframe) map for calibration."""
    pairs = {"waist": ("pelvis", "waist")}
    groups = ["hip", "knee", "ankle"] + (["shoulder", "elbow", "wrist"]
                                         if with_arms else [])
    for side in ("left", "right"):
        for g in groups:
            role = f"{side}_{g}"
            pairs[role] = (role, role)
    return pairs


def default_track_orientation(with_arms=True):
    """Ankles track orientation; the 4-dof arms cannot, so wrists do not."""
    flags = {"left_ankle": True, "right_ankle": True}
    if with_arms:
        flags.update({"left_wrist": False, "right_wrist": False})
    return flags


# -- synthetic motions -------------------------------------------------------

def human_skeleton_motion_bones():
    return [(name, parent) for name, (parent, _) in HUMAN_BONES.items()]


def _rest_bone_rotations(rng=None):
    """Fixed, non-trivial world rest rotations per bone (bone frames are not
    aligned with the world, as in real mocap)."""
    rng = rng or np.random.default_rng(777)
    rots = {}
    for name in HUMAN_BONES:
        w = rng.uniform(-0.8, 0.8, 3)
        rots[name] = so3_exp(w)
    # matrices, not quats
    from .core_math import mat_from_quat
    return {n: mat_from_quat(q) for n, q in rots.items()}


def make_human_model(aligned_rot=None):
    """Synthesize the canonical human model straight from the rest table."""
    rest = {name: Transform(np.array([1.0, 0, 0, 0]), pos)
            for name, (_, pos) in HUMAN_BONES.items()}
    bones = human_skeleton_motion_bones()
    motion = SkeletonMotion(bones, rest, [dict(rest)], 50.0)
    return human_urdf.build_human_urdf(motion, aligned_rot)


def _leg_angles(dx, dz, l1, l2, guess=(0.0, 0.3)):
    """Hip/knee pitch putting the ankle at (dx, dz) relative to the hip,
    sagittal plane, y-axis rotations. Newton iteration, exact to 1e-12."""
    th, tk = guess

    def f(th, tk):
        return np.array([
            -l1 * np.sin(th) - l2 * np.sin(th + tk) - dx,
            -l1 * np.cos(th) - l2 * np.cos(th + tk) - dz,
        ])

    for _ in range(60):
        r = f(th, tk)
        if np.abs(r).max() < 1e-13:
            break
        J = np.array([
            [-l1 * np.cos(th) - l2 * np.cos(th + tk), -l2 * np.cos(th + tk)],
            [l1 * np.sin(th) + l2 * np.sin(th + tk), l2 * np.sin(th + tk)],
        ])
        step = np.linalg.solve(J + 1e-12 * np.eye(2), r)
        th, tk = th - step[0], tk - step[1]
    return th, tk


class _HumanScript:
    """Helper scripting generalized coordinates on the canonical human model."""

    def __init__(self):
        self.model = make_human_model()
        self.nq = self.model.nq
        self.hip_y = HUMAN_HIP_Y
        self.hip_drop = HUMAN_ROOT_Z - HUMAN_BONES["left_hip"][1][2]  # 0.07
        self._leg_guess = {"left": (0.0, 0.3), "right": (0.0, 0.3)}

    def frame(self, root_xyz, ankle_targets, arm_euler=None):
        """ankle_targets: side -> (x, z) world; legs solved in the sagittal
        plane (warm-started frame to frame to stay on one knee branch),
        ankle pitch keeps the foot level."""
        q = self.model.neutral_q()
        q[0:3] = root_xyz
        for side in ("left", "right"):
            ax, az = ankle_targets[side]
            hip_x = root_xyz[0]
            hip_z = root_xyz[2] - self.hip_drop
            th, tk = _leg_angles(ax - hip_x, az - hip_z,
                                 HUMAN_THIGH, HUMAN_SHIN,
                                 guess=self._leg_guess[side])
            self._leg_guess[side] = (th, tk)
            q[self.model.joint_q_slice(f"{side}_hip")] = [0.0, th, 0.0]
            q[self.model.joint_q_slice(f"{side}_knee")] = [0.0, tk, 0.0]
            q[self.model.joint_q_slice(f"{side}_ankle")] = [0.0, -(th + tk), 0.0]
        if arm_euler:
            for joint, eul in arm_euler.items():
                q[self.model.joint_q_slice(joint)] = eul
        return q

    def to_motion(self, q_seq, fps, contacts=None):
        rest_q = human_urdf.rest_configuration(_rest_motion_stub(), self.model)
        return human_urdf.motion_from_model_traj(
            self.model, q_seq, fps, rest_q=rest_q,
            rest_bone_rots=_rest_bone_rotations(), contacts=contacts)


def _rest_motion_stub():
    rest = {name: Transform(np.array([1.0, 0, 0, 0]), pos)
            for name, (_, pos) in HUMAN_BONES.items()}
    return SkeletonMotion(human_skeleton_motion_bones(), rest,
                          [dict(rest)], 50.0)


def make_stand_motion(n_frames=40, fps=50.0, root_z=0.93):
    s = _HumanScript()
    ankles = {"left": (0.0, 0.0), "right": (0.0, 0.0)}
    q = s.frame([0.0, 0.0, root_z], ankles)
    q_seq = np.tile(q, (n_frames, 1))
    contacts = {f: np.ones(n_frames, dtype=bool)
                for f in ("left_ankle", "right_ankle")}
    return s.to_motion(q_seq, fps, contacts)


def make_squat_motion(n_frames=60, fps=50.0, depth=0.12, arm_swing=0.5):
    """Feet planted, pelvis bobs down and back up, arms sweep symmetrically.

    Arms start hanging (rotated down from the skeleton's T-pose rest) so the
    first frame is reachable from a robot rest configuration within one
    velocity-limited IK step.
    """
    s = _HumanScript()
    q_seq = np.zeros((n_frames, s.nq))
    down = 1.35  # shoulder roll putting the T-pose arm near vertical
    for k in range(n_frames):
        t = k / (n_frames - 1)
        z = 0.93 - depth * 0.5 * (1 - np.cos(2 * np.pi * t))
        swing = arm_swing * np.sin(2 * np.pi * t)
        arms = {
            "left_shoulder": [-down + swing, 0.25 * swing, 0.0],
            "right_shoulder": [down - swing, 0.25 * swing, 0.0],
            "left_elbow": [0.3 * swing, 0.0, 0.0],
            "right_elbow": [-0.3 * swing, 0.0, 0.0],
        }
        q_seq[k] = s.frame([0.0, 0.0, z],
                           {"left": (0.0, 0.0), "right": (0.0, 0.0)}, arms)
    contacts = {f: np.ones(n_frames, dtype=bool)
                for f in ("left_ankle", "right_ankle")}
    return s.to_motion(q_seq, fps, contacts)


def make_jump_motion(n_frames=100, fps=50.0, liftoff=39, touchdown=56,
                     hop=0.25, stand_z=0.93, tuck=0.001):
    """Static stance, ballistic flight, static landing.

    Stance phases are intentionally static so the reference is already close
    to discrete contact feasibility; the liftoff/touchdown velocity jumps are
    what the TO stages must absorb. The root follows an exact projectile arc
    during flight and the feet ride it (plus a small extra tuck), keeping the
    legs at their stance extension instead of stretching past reach.
    """
    s = _HumanScript()
    dt = 1.0 / fps
    T = (touchdown - liftoff) * dt
    v0 = 9.81 * T / 2.0
    q_seq = np.zeros((n_frames, s.nq))
    stance = np.zeros(n_frames, dtype=bool)
    for k in range(n_frames):
        if k <= liftoff:
            root = [0.0, 0.0, stand_z]
            ank = {"left": (0.0, 0.0), "right": (0.0, 0.0)}
            stance[k] = True
        elif k < touchdown:
            tn = (k - liftoff) / (touchdown - liftoff)
            t = tn * T
            rise = v0 * t - 0.5 * 9.81 * t * t
            x = hop * tn
            fz = rise + tuck * np.sin(np.pi * tn) ** 2
            root = [x, 0.0, stand_z + rise]
            ank = {"left": (x, fz), "right": (x, fz)}
        else:
            root = [hop, 0.0, stand_z]
            ank = {"left": (hop, 0.0), "right": (hop, 0.0)}
            stance[k] = True
        q_seq[k] = s.frame(root, ank)
    contacts = {"left_ankle": stance.copy(), "right_ankle": stance.copy()}
    return s.to_motion(q_seq, fps, contacts)
