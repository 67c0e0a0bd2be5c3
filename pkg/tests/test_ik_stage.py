import numpy as np
import pytest

from retargetkit import calibration, demo, human_urdf, ik_stage, kinodyn
from retargetkit import robot_model as rm
from retargetkit.core_math import Transform, so3_exp


def retarget_inputs(motion, robot, with_arms=True):
    """Calibrated human trajectory + IK targets for a demo robot."""
    model = human_urdf.build_human_urdf(motion)
    corr = demo.default_correspondences(with_arms)
    flags = demo.default_track_orientation(with_arms)
    calibrated, cmap = calibration.calibrate_all(model, robot, corr, flags)
    traj = human_urdf.compute_generalized_traj(motion, calibrated,
                                               s_root=cmap.s_root)
    targets = ik_stage.targets_from_human(calibrated, traj, corr,
                                          cmap.ee_offsets,
                                          cmap.ee_track_orientation)
    return traj, targets


class TestSolveIkFrame:
    def test_identity_retarget_near_zero_error(self):
        # targets generated from the robot's own FK: errors ~ 0
        robot = demo.make_demo_robot()
        rng = np.random.default_rng(0)
        q_true = robot.neutral_q()
        q_true[0:3] = [0.05, -0.02, 0.85]
        q_true[7:] = rng.uniform(-0.4, 0.4, robot.nq - 7)
        eng = kinodyn._engine(robot)
        targets = {}
        for name in robot.keyframes:
            R, p = eng.frame_pose(q_true, name)
            targets[name] = {"pos": p, "rot": None}
        # steady state: previous solution at the target configuration, as in
        # a converged sequence; the regularizer then costs nothing
        q, rep = ik_stage.solve_ik_frame(robot, targets, q_true, dt=0.02)
        assert rep.status == "optimal"
        errs = []
        for name in robot.keyframes:
            _, p = eng.frame_pose(q, name)
            errs.append(np.linalg.norm(p - targets[name]["pos"]))
        assert np.mean(errs) < 1e-6  # meters

        # from a distant warm start the regularizer biases by a few mm at most
        q_seed = robot.neutral_q()
        q_seed[0:3] = [0, 0, 0.8]
        q2, rep2 = ik_stage.solve_ik_frame(robot, targets, q_seed, dt=0.02)
        assert rep2.status == "optimal"
        errs2 = [np.linalg.norm(eng.frame_pose(q2, n)[1] - targets[n]["pos"])
                 for n in robot.keyframes]
        assert np.mean(errs2) < 5e-3

    def test_one_dof_limit_projection(self):
        # a 1-dof arm asked beyond its limit lands exactly at the limit
        links = [rm.LinkSpec("base"), rm.LinkSpec("arm")]
        joints = [rm.JointSpec("j", "revolute", "base", "arm",
                               axis=[0, 1, 0], q_min=-0.8, q_max=0.8,
                               v_max=100.0, tau_max=10.0)]
        robot = rm.RobotModel(links, joints)
        robot.add_keyframe("tip", "arm",
                           Transform(np.array([1.0, 0, 0, 0]), [0, 0, -0.5]))
        robot.add_keyframe("base", "base", Transform.identity())
        eng = kinodyn._engine(robot)
        q_goal = robot.neutral_q()
        q_goal[7] = 1.4  # beyond q_max
        _, p_goal = eng.frame_pose(q_goal, "tip")
        # pin base pose (position and orientation) so only the joint moves
        targets = {"base": {"pos": np.zeros(3), "rot": np.eye(3)},
                   "tip": {"pos": p_goal, "rot": None}}
        q, rep = ik_stage.solve_ik_frame(robot, targets, robot.neutral_q(),
                                         dt=0.02)
        assert rep.status == "optimal"
        assert q[7] == pytest.approx(0.8, abs=1e-8)

    def test_velocity_step_clamp(self):
        links = [rm.LinkSpec("base"), rm.LinkSpec("arm")]
        joints = [rm.JointSpec("j", "revolute", "base", "arm",
                               axis=[0, 1, 0], q_min=-3.0, q_max=3.0,
                               v_max=2.0, tau_max=10.0)]
        robot = rm.RobotModel(links, joints)
        robot.add_keyframe("tip", "arm",
                           Transform(np.array([1.0, 0, 0, 0]), [0, 0, -0.5]))
        robot.add_keyframe("base", "base", Transform.identity())
        eng = kinodyn._engine(robot)
        q_goal = robot.neutral_q()
        q_goal[7] = 1.0
        _, p_goal = eng.frame_pose(q_goal, "tip")
        targets = {"base": {"pos": np.zeros(3), "rot": np.eye(3)},
                   "tip": {"pos": p_goal, "rot": None}}
        dt = 0.02
        q, rep = ik_stage.solve_ik_frame(robot, targets, robot.neutral_q(), dt)
        assert rep.status == "optimal"
        assert q[7] == pytest.approx(2.0 * dt, abs=1e-8)  # v_max * dt


class TestSolveIkSequence:
    def test_constant_targets_constant_solution(self):
        # exactly reachable target (well-observed pitch joints only): the
        # first frame fits it, after which the anchor sits at the solution
        robot = demo.make_demo_robot(with_arms=False)
        eng = kinodyn._engine(robot)
        q_true = robot.neutral_q()
        q_true[0:3] = [0, 0, 0.83]
        for side in ("l", "r"):
            q_true[robot.joint_q_slice(f"{side}_hip_pitch")] = -0.25
            q_true[robot.joint_q_slice(f"{side}_knee")] = 0.5
            q_true[robot.joint_q_slice(f"{side}_ankle_pitch")] = -0.25
        targets = {}
        for name in robot.keyframes:
            R, p = eng.frame_pose(q_true, name)
            targets[name] = {"pos": p, "rot": None}
        seq = [targets] * 6
        # seeded at the exact fit, the solution is a strict fixed point
        res = ik_stage.solve_ik_sequence(robot, seq, dt=0.02, q0=q_true)
        for k in range(1, 6):
            np.testing.assert_allclose(res.q_seq[k], res.q_seq[0], atol=1e-7)
        # from the rest seed the warm-start bias contracts monotonically
        res2 = ik_stage.solve_ik_sequence(robot, seq, dt=0.02)
        steps = [np.abs(res2.q_seq[k + 1] - res2.q_seq[k]).max()
                 for k in range(1, 5)]
        assert steps[-1] <= steps[0] + 1e-12

    def test_squat_feasibility_and_accuracy(self):
        motion = demo.make_squat_motion(n_frames=25)
        robot = demo.make_demo_robot()
        traj, targets = retarget_inputs(motion, robot)
        res = ik_stage.solve_ik_sequence(robot, targets, traj.dt)
        lo, hi, v_max, _ = robot.joint_limit_arrays()
        dt = traj.dt
        for k in range(len(targets)):
            qj = res.q_seq[k, 7:]
            assert np.all(qj >= lo - 1e-8) and np.all(qj <= hi + 1e-8)
            prev = robot.neutral_q()[7:] if k == 0 else res.q_seq[k - 1, 7:]
            assert np.all(np.abs(qj - prev) <= v_max * dt + 1e-8)
        # tracking quality: mean per-body position error well under a cm
        eng = kinodyn._engine(robot)
        errs = []
        for k, tgt in enumerate(targets):
            for name, entry in tgt.items():
                _, p = eng.frame_pose(res.q_seq[k], name)
                errs.append(np.linalg.norm(p - entry["pos"]))
        assert np.mean(errs) < 0.01

    def test_warm_start_benefit(self):
        motion = demo.make_squat_motion(n_frames=15)
        robot = demo.make_demo_robot(with_arms=False)
        traj, targets = retarget_inputs(motion, robot, with_arms=False)
        seq = ik_stage.solve_ik_sequence(robot, targets, traj.dt)

        cold_total = 0
        for k, tgt in enumerate(targets):
            _, rep = ik_stage.solve_ik_frame(robot, tgt, robot.neutral_q(),
                                             traj.dt)
            cold_total += rep.iterations
        assert seq.total_iterations <= cold_total

    def test_failure_carries_partial(self):
        # unreachable target plus an impossible velocity clamp still solves
        # (optimal projection), so force failure via max_iter=0 semantics:
        robot = demo.make_demo_robot(with_arms=False)
        eng = kinodyn._engine(robot)
        targets = {}
        q_true = robot.neutral_q()
        q_true[0:3] = [0, 0, 0.855]
        for name in robot.keyframes:
            R, p = eng.frame_pose(q_true, name)
            targets[name] = {"pos": p, "rot": None}
        with pytest.raises(ik_stage.IkError) as ei:
            ik_stage.solve_ik_sequence(robot, [targets] * 3, dt=0.02,
                                       tol_kkt=1e-30)
        assert ei.value.frame_index == 0
        assert ei.value.partial_q.shape[0] == 0
