import numpy as np
import pytest

from retargetkit import robot_model as rm
from retargetkit.core_math import Transform, so3_exp, quat_mul

TWO_LINK_URDF = """\
<robot name="two_link">
  <link name="base">
    <inertial>
      <origin xyz="0 0 0.1" rpy="0 0 0"/>
      <mass value="4.0"/>
      <inertia ixx="0.1" ixy="0" ixz="0" iyy="0.1" iyz="0" izz="0.1"/>
    </inertial>
  </link>
  <link name="arm"/>
  <joint name="shoulder" type="revolute">
    <origin xyz="0 0 0.2" rpy="0 0 0"/>
    <parent link="base"/>
    <child link="arm"/>
    <axis xyz="0 0 1"/>
    <limit lower="-1.5" upper="1.5" velocity="10.0" effort="40.0"/>
  </joint>
</robot>
"""


def make_spherical_model():
    links = [rm.LinkSpec("pelvis"), rm.LinkSpec("chest"), rm.LinkSpec("head")]
    joints = [
        rm.JointSpec("spine", "spherical", "pelvis", "chest",
                     origin=Transform(np.array([1.0, 0, 0, 0]), [0, 0, 0.3])),
        rm.JointSpec("neck", "spherical", "chest", "head",
                     origin=Transform(np.array([1.0, 0, 0, 0]), [0, 0, 0.25])),
    ]
    return rm.RobotModel(links, joints, name="snake")


class TestParse:
    def test_two_link_counts(self):
        model, warnings = rm.parse_urdf(TWO_LINK_URDF)
        assert model.nq == 8
        assert model.nv == 7
        assert model.root_link == "base"
        assert warnings == []

    def test_round_trip_structural_equality(self):
        model, _ = rm.parse_urdf(TWO_LINK_URDF)
        doc = rm.write_urdf(model)
        model2, _ = rm.parse_urdf(doc)
        assert model.structurally_equal(model2)

    def test_write_deterministic(self):
        model, _ = rm.parse_urdf(TWO_LINK_URDF)
        assert rm.write_urdf(model) == rm.write_urdf(model)

    def test_prismatic_rejected(self):
        doc = TWO_LINK_URDF.replace('type="revolute"', 'type="prismatic"')
        with pytest.raises(rm.UnsupportedJointError) as ei:
            rm.parse_urdf(doc)
        assert "shoulder" in str(ei.value)
        assert ei.value.line is not None

    def test_duplicate_link(self):
        doc = TWO_LINK_URDF.replace('<link name="arm"/>',
                                    '<link name="arm"/><link name="arm"/>')
        with pytest.raises(rm.DuplicateNameError):
            rm.parse_urdf(doc)

    def test_missing_parent_link(self):
        doc = TWO_LINK_URDF.replace('<parent link="base"/>',
                                    '<parent link="nope"/>')
        with pytest.raises(rm.MissingLinkError):
            rm.parse_urdf(doc)

    def test_malformed_number(self):
        doc = TWO_LINK_URDF.replace('xyz="0 0 0.2"', 'xyz="0 0 zebra"')
        with pytest.raises(rm.MalformedNumberError) as ei:
            rm.parse_urdf(doc)
        assert ei.value.line is not None

    def test_cycle_detected(self):
        doc = TWO_LINK_URDF.replace(
            "</robot>",
            '<joint name="loop" type="revolute">'
            '<parent link="arm"/><child link="base"/>'
            '<axis xyz="0 0 1"/></joint></robot>')
        with pytest.raises(rm.CyclicGraphError):
            rm.parse_urdf(doc)

    def test_visual_skipped_with_warning(self):
        doc = TWO_LINK_URDF.replace(
            '<link name="arm"/>',
            '<link name="arm"><visual><geometry><box size="1 1 1"/>'
            '</geometry></visual></link>')
        model, warnings = rm.parse_urdf(doc)
        assert model.nq == 8
        assert any("visual" in w for w in warnings)

    def test_fuzzed_truncations_never_crash(self):
        rng = np.random.default_rng(0)
        for _ in range(60):
            cut = int(rng.integers(1, len(TWO_LINK_URDF)))
            try:
                rm.parse_urdf(TWO_LINK_URDF[:cut])
            except rm.UrdfError:
                pass  # any UrdfError subclass is acceptable; crashes are not


class TestSphericalWrite:
    def test_document_round_trip(self):
        model = make_spherical_model()
        doc = rm.write_urdf(model)
        reparsed, _ = rm.parse_urdf(doc)
        # spherical joints decompose to 3 revolutes: same dof count
        assert reparsed.nv == model.nv
        assert reparsed.nq == model.nq
        # document-level fixed point
        assert rm.write_urdf(reparsed) == doc

    def test_empty_keyframes_write(self):
        model = make_spherical_model()
        doc = rm.write_urdf(model)
        assert "keyframe" not in doc


class TestBoxplus:
    def test_zero_increment(self):
        model, _ = rm.parse_urdf(TWO_LINK_URDF)
        q = model.neutral_q()
        q[7] = 0.3
        np.testing.assert_allclose(model.boxplus(q, np.zeros(model.nv)), q)

    def test_pure_translation(self):
        model, _ = rm.parse_urdf(TWO_LINK_URDF)
        q = model.neutral_q()
        dq = np.zeros(model.nv)
        dq[2] = 0.5
        q2 = model.boxplus(q, dq)
        np.testing.assert_allclose(q2[0:3], [0, 0, 0.5])
        np.testing.assert_allclose(q2[3:], q[3:])

    def test_boxminus_recovers_increment(self):
        model = make_spherical_model()
        rng = np.random.default_rng(42)
        for _ in range(100):
            q = model.neutral_q()
            q[0:3] = rng.standard_normal(3)
            q[3:7] = so3_exp(rng.standard_normal(3))
            q[7:] = rng.standard_normal(model.nq - 7)
            dq = rng.standard_normal(model.nv) * 0.5
            q2 = model.boxplus(q, dq)
            back = model.boxminus(q2, q)
            assert np.abs(back - dq).max() < 1e-10

    def test_rotation_increment_is_base_local(self):
        model = make_spherical_model()
        q = model.neutral_q()
        q[3:7] = so3_exp([0.0, 0.0, np.pi / 2])
        dq = np.zeros(model.nv)
        dq[3:6] = [0.1, 0.0, 0.0]
        q2 = model.boxplus(q, dq)
        expected = quat_mul(q[3:7], so3_exp([0.1, 0, 0]))
        assert min(np.abs(q2[3:7] - expected).max(),
                   np.abs(q2[3:7] + expected).max()) < 1e-12

    def test_dimension_mismatch(self):
        model = make_spherical_model()
        with pytest.raises(rm.ModelError):
            model.boxplus(model.neutral_q(), np.zeros(model.nv + 1))


class TestKeyframes:
    def test_sidecar_round_trip(self):
        model = make_spherical_model()
        kf = {
            "head_top": ("head", Transform(np.array([1.0, 0, 0, 0]), [0, 0, 0.1])),
            "waist": ("pelvis", Transform(so3_exp([0.0, 0.2, 0.0]), [0.01, 0, 0])),
        }
        text = rm.save_keyframes(kf)
        loaded = rm.load_keyframes(text)
        assert set(loaded) == set(kf)
        for name in kf:
            assert loaded[name][0] == kf[name][0]
            assert loaded[name][1].almost_equal(kf[name][1], tol=1e-12)

    def test_unknown_link_rejected(self):
        model = make_spherical_model()
        with pytest.raises(rm.MissingLinkError):
            model.add_keyframe("bad", "nonexistent", Transform.identity())
