import numpy as np
import pytest

from retargetkit import calibration as cal
from retargetkit import demo, human_urdf, kinodyn
from retargetkit.core_math import Transform, so3_exp, mat_from_quat, _ry


def human_model():
    return demo.make_human_model()


def ident_pose(p):
    return Transform(np.array([1.0, 0, 0, 0]), p)


class TestEndEffectors:
    def corr(self):
        return {"left_knee": ("h_knee", "r_knee"),
                "left_ankle": ("h_ankle", "r_ankle")}

    def test_identical_rest_poses_identity_offsets(self):
        snap_h = {"h_knee": ident_pose([0, 0.1, 0.5]),
                  "h_ankle": ident_pose([0, 0.1, 0.1])}
        snap_r = {"r_knee": ident_pose([0, 0.1, 0.5]),
                  "r_ankle": ident_pose([0, 0.1, 0.1])}
        offs, flags = cal.calibrate_end_effectors(snap_h, snap_r, self.corr())
        assert offs["left_ankle"].almost_equal(Transform.identity(), tol=1e-12)
        assert flags["left_ankle"] is True

    def test_pitched_robot_ankle(self):
        snap_h = {"h_knee": ident_pose([0, 0.1, 0.5]),
                  "h_ankle": ident_pose([0, 0.1, 0.1])}
        snap_r = {"r_knee": ident_pose([0, 0.1, 0.5]),
                  "r_ankle": Transform(human_urdf.quat_from_mat(_ry(np.radians(10))),
                                       [0, 0.1, 0.1])}
        offs, _ = cal.calibrate_end_effectors(snap_h, snap_r, self.corr())
        np.testing.assert_allclose(offs["left_ankle"].rotmat,
                                   _ry(np.radians(10)), atol=1e-12)

    def test_two_dof_wrist_flag(self):
        snap_h = {"h_elbow": ident_pose([0, 0.2, 1.0]),
                  "h_wrist": ident_pose([0, 0.45, 1.0])}
        snap_r = {"r_elbow": ident_pose([0, 0.2, 1.0]),
                  "r_wrist": Transform(so3_exp([0.3, 0.1, 0]), [0, 0.4, 1.0])}
        corr = {"left_elbow": ("h_elbow", "r_elbow"),
                "left_wrist": ("h_wrist", "r_wrist")}
        offs, flags = cal.calibrate_end_effectors(
            snap_h, snap_r, corr, track_orientation={"left_wrist": False})
        assert flags["left_wrist"] is False
        assert offs["left_wrist"].almost_equal(Transform.identity(), tol=1e-12)

    def test_missing_keyframe(self):
        with pytest.raises(cal.MissingKeyframeError):
            cal.calibrate_end_effectors({}, {}, {"left_ankle": ("a", "b"),
                                                 "left_knee": ("c", "d")})


class TestArm:
    def test_ratio_definition(self):
        snap_h = {"hs": ident_pose([0, 0.2, 1.4]), "he": ident_pose([0, 0.5, 1.4]),
                  "hw": ident_pose([0, 0.8, 1.4])}
        snap_r = {"rs": ident_pose([0, 0.2, 1.4]), "re": ident_pose([0, 0.44, 1.4]),
                  "rw": ident_pose([0, 0.68, 1.4])}
        corr = {"left_shoulder": ("hs", "rs"), "left_elbow": ("he", "re"),
                "left_wrist": ("hw", "rw")}
        scales = cal.calibrate_arm(snap_h, snap_r, corr, "left")
        assert scales["left_upper"] == pytest.approx(0.8, abs=1e-12)
        assert scales["left_fore"] == pytest.approx(0.8, abs=1e-12)

    def test_equal_lengths_scale_one(self):
        model = human_model()
        robot = demo.make_demo_robot()
        snap = cal.rest_snapshot(model)
        corr = {r: (h, h) for r, (h, _) in
                demo.default_correspondences().items()}
        scales = cal.calibrate_arm(snap, snap, corr, "left")
        assert scales["left_upper"] == pytest.approx(1.0, abs=1e-14)

    def test_applied_scale_makes_lengths_match(self):
        model = human_model()
        robot = demo.make_demo_robot()
        corr = demo.default_correspondences()
        calibrated, cmap = cal.calibrate_all(model, robot, corr)
        snap_c = cal.rest_snapshot(calibrated)
        snap_r = cal.rest_snapshot(robot)
        for side in ("left", "right"):
            lh = np.linalg.norm(snap_c[f"{side}_elbow"].trans
                                - snap_c[f"{side}_shoulder"].trans)
            lr = np.linalg.norm(snap_r[f"{side}_elbow"].trans
                                - snap_r[f"{side}_shoulder"].trans)
            assert abs(lh - lr) < 1e-12
            fh = np.linalg.norm(snap_c[f"{side}_wrist"].trans
                                - snap_c[f"{side}_elbow"].trans)
            fr = np.linalg.norm(snap_r[f"{side}_wrist"].trans
                                - snap_r[f"{side}_elbow"].trans)
            assert abs(fh - fr) < 1e-12


class TestLegs:
    def test_identical_zero_change(self):
        model = human_model()
        snap = cal.rest_snapshot(model)
        corr = {r: (h, h) for r, (h, _) in
                demo.default_correspondences().items()}
        new = cal.calibrate_legs(model, snap, snap, corr)
        for j in model.joints:
            if j.name in new:
                np.testing.assert_allclose(new[j.name], j.origin.trans,
                                           atol=1e-14)

    def test_thigh_shortened_exactly(self):
        model = human_model()
        robot = demo.make_demo_robot(dims={"thigh": demo.HUMAN_THIGH - 0.05})
        snap_h = cal.rest_snapshot(model)
        snap_r = cal.rest_snapshot(robot)
        corr = demo.default_correspondences()
        new = cal.calibrate_legs(model, snap_h, snap_r, corr)
        orig = model.joints[model.joint_index["left_knee"]].origin.trans
        assert new["left_knee"][2] == pytest.approx(
            -(demo.HUMAN_THIGH - 0.05), abs=1e-12)

    def test_post_calibration_relative_positions_match(self):
        model = human_model()
        robot = demo.make_demo_robot()
        calibrated, _ = cal.calibrate_all(model, robot,
                                          demo.default_correspondences())
        snap_c = cal.rest_snapshot(calibrated)
        snap_r = cal.rest_snapshot(robot)
        for side in ("left", "right"):
            for a, b in (("hip", "knee"), ("knee", "ankle")):
                dh = snap_c[f"{side}_{b}"].trans - snap_c[f"{side}_{a}"].trans
                dr = snap_r[f"{side}_{b}"].trans - snap_r[f"{side}_{a}"].trans
                np.testing.assert_allclose(dh, dr, atol=1e-12)


class TestMainBody:
    def test_single_pair_hand_oracle(self):
        snap_h = {"w": ident_pose([0, 0, 0]), "s": ident_pose([0.1, 0.2, 0.4])}
        snap_r = {"w": ident_pose([0, 0, 0]), "s": ident_pose([0.15, 0.18, 0.36])}
        corr = {"waist": ("w", "w"), "left_shoulder": ("s", "s")}
        a = cal.calibrate_main_body(snap_h, snap_r, corr)
        assert a["s_y"] == pytest.approx(0.9, abs=1e-12)
        assert a["s_z"] == pytest.approx(0.9, abs=1e-12)
        assert a["k_x"] == pytest.approx(0.125, abs=1e-12)

    def test_identity_for_identical_snapshots(self):
        model = human_model()
        snap = cal.rest_snapshot(model)
        corr = {r: (h, h) for r, (h, _) in
                demo.default_correspondences().items()}
        a = cal.calibrate_main_body(snap, snap, corr)
        assert a["k_x"] == pytest.approx(0.0, abs=1e-12)
        assert a["s_y"] == pytest.approx(1.0, abs=1e-12)
        assert a["s_z"] == pytest.approx(1.0, abs=1e-12)

    def test_s_y_invariant_under_left_right_swap(self):
        snap_h = {"w": ident_pose([0, 0, 0]),
                  "ls": ident_pose([0.0, 0.2, 0.5]),
                  "rs": ident_pose([0.0, -0.2, 0.5])}
        snap_r = {"w": ident_pose([0, 0, 0]),
                  "ls": ident_pose([0.0, 0.17, 0.4]),
                  "rs": ident_pose([0.0, -0.17, 0.4])}
        corr = {"waist": ("w", "w"), "left_shoulder": ("ls", "ls"),
                "right_shoulder": ("rs", "rs")}
        swapped = {"waist": ("w", "w"), "left_shoulder": ("rs", "rs"),
                   "right_shoulder": ("ls", "ls")}
        a1 = cal.calibrate_main_body(snap_h, snap_r, corr)
        a2 = cal.calibrate_main_body(snap_h, snap_r, swapped)
        assert a1["s_y"] == pytest.approx(a2["s_y"], abs=1e-14)
        assert a1["s_z"] == pytest.approx(a2["s_z"], abs=1e-14)

    def test_rank_deficiency(self):
        snap = {"w": ident_pose([0, 0, 0]), "s": ident_pose([0.1, 0.2, 0.0])}
        corr = {"waist": ("w", "w"), "left_shoulder": ("s", "s")}
        with pytest.raises(cal.IllPosedFitError):
            cal.calibrate_main_body(snap, snap, corr)


class TestRootScale:
    def test_ratio(self):
        model = human_model()
        robot = demo.make_demo_robot()
        calibrated, cmap = cal.calibrate_all(model, robot,
                                             demo.default_correspondences())
        # demo geometry is collinear by design: s_root = 0.9 exactly
        assert cmap.s_root == pytest.approx(0.9, abs=1e-12)

    def test_no_change_gives_one(self):
        model = human_model()
        corr = demo.default_correspondences()
        s = cal.calibrate_root_scale(model, model, corr)
        assert s == pytest.approx(1.0, abs=1e-14)

    def test_rest_ankle_height_preserved(self):
        # replaying the rest pose with s_root keeps the calibrated ankle at
        # the original ground clearance (zero for the canonical skeleton)
        motion = demo.make_stand_motion(n_frames=2)
        model = human_urdf.build_human_urdf(motion)
        robot = demo.make_demo_robot()
        calibrated, cmap = cal.calibrate_all(model, robot,
                                             demo.default_correspondences())
        traj = human_urdf.compute_generalized_traj(
            motion, calibrated, s_root=cmap.s_root)
        rest_frame = {b: motion.rest_pose[b] for b, _ in motion.bones}
        import retargetkit.motion_io as mio
        rest_motion = mio.SkeletonMotion(motion.bones, motion.rest_pose,
                                         [rest_frame], motion.fps)
        traj_rest = human_urdf.compute_generalized_traj(
            rest_motion, calibrated, s_root=cmap.s_root)
        poses = kinodyn.fk(calibrated, traj_rest.q_seq[0])
        for side in ("left", "right"):
            orig_clearance = motion.rest_pose[f"{side}_ankle"].trans[2]
            assert abs(poses[f"{side}_ankle"].trans[2] - orig_clearance) < 1e-9


class TestCalibrateAll:
    def test_identity_when_robot_equals_human(self):
        model = human_model()
        # the robot IS the human model: keyframes are its own links
        corr = {r: (h, h) for r, (h, _) in
                demo.default_correspondences().items()}
        calibrated, cmap = cal.calibrate_all(model, model, corr)
        assert cmap.s_root == pytest.approx(1.0, abs=1e-12)
        for v in cmap.arm_scales.values():
            assert v == pytest.approx(1.0, abs=1e-12)
        assert cmap.body_affine["k_x"] == pytest.approx(0.0, abs=1e-12)
        for j1, j2 in zip(model.joints, calibrated.joints):
            np.testing.assert_allclose(j1.origin.trans, j2.origin.trans,
                                       atol=1e-12)

    def test_torso_keyframes_match_exactly(self):
        model = human_model()
        robot = demo.make_demo_robot()
        calibrated, _ = cal.calibrate_all(model, robot,
                                          demo.default_correspondences())
        snap_c = cal.rest_snapshot(calibrated)
        snap_r = cal.rest_snapshot(robot)
        w_c = snap_c["pelvis"].trans
        w_r = snap_r["waist"].trans
        for role in ("left_shoulder", "right_shoulder", "left_hip", "right_hip"):
            np.testing.assert_allclose(snap_c[role].trans - w_c,
                                       snap_r[role].trans - w_r, atol=1e-9)

    def test_idempotent(self):
        model = human_model()
        robot = demo.make_demo_robot()
        calibrated, _ = cal.calibrate_all(model, robot,
                                          demo.default_correspondences())
        again, cmap2 = cal.calibrate_all(calibrated, robot,
                                         demo.default_correspondences())
        assert cmap2.s_root == pytest.approx(1.0, abs=1e-9)
        for v in cmap2.arm_scales.values():
            assert v == pytest.approx(1.0, abs=1e-9)
        assert cmap2.body_affine["k_x"] == pytest.approx(0.0, abs=1e-9)
        assert cmap2.body_affine["s_y"] == pytest.approx(1.0, abs=1e-9)
        assert cmap2.body_affine["s_z"] == pytest.approx(1.0, abs=1e-9)
        for j1, j2 in zip(calibrated.joints, again.joints):
            np.testing.assert_allclose(j1.origin.trans, j2.origin.trans,
                                       atol=1e-9)

    def test_legs_only_robot(self):
        model = human_model()
        robot = demo.make_demo_robot(with_arms=False)
        corr = demo.default_correspondences(with_arms=False)
        calibrated, cmap = cal.calibrate_all(model, robot, corr)
        assert cmap.arm_scales == {}
        assert cmap.s_root == pytest.approx(0.9, abs=1e-12)
        snap_c = cal.rest_snapshot(calibrated)
        snap_r = cal.rest_snapshot(robot)
        for side in ("left", "right"):
            dh = snap_c[f"{side}_knee"].trans - snap_c[f"{side}_hip"].trans
            dr = snap_r[f"{side}_knee"].trans - snap_r[f"{side}_hip"].trans
            np.testing.assert_allclose(dh, dr, atol=1e-12)

    def test_map_serializes(self):
        model = human_model()
        robot = demo.make_demo_robot()
        _, cmap = cal.calibrate_all(model, robot,
                                    demo.default_correspondences(),
                                    demo.default_track_orientation())
        text = cmap.to_json()
        assert '"s_root": 0.9' in text
