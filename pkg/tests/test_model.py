"""Model loading, forward kinematics, and Jacobian correctness.

The Jacobian oracle is a central finite difference of the kinematics; the
home-pose oracle is the hand-composed chain of fixed offsets.
"""

import math

import numpy as np
import pytest

from rtwbc.geom import Rotation, Transform
from rtwbc.model import (
    JointLimitError,
    ModelError,
    forward_kinematics,
    frame_jacobian,
    geometric_jacobian,
    load_default_model,
    load_model,
    sphere_distances,
)

PLANAR_ARM = """
[robot]
name = "planar"

[lengths]
rf_rt = 1.0
rs_re = 1.0
re_rw = 1.0

[frames]
rf = "base"
rt = "base"
rs = "base"
re = "tip"
rw = "tip"

[[joint]]
name = "hinge"
kind = "revolute"
axis = [0.0, 0.0, 1.0]
parent = "base"
child = "tip"
origin_xyz = [0.0, 0.0, 0.0]
limits = [-3.0, 3.0]
velocity_limit = 1.0
"""


@pytest.fixture(scope="module")
def model():
    return load_default_model()


def write_model(tmp_path, text):
    p = tmp_path / "model.toml"
    p.write_text(text)
    return p


def fd_jacobian(mdl, q, link, h=1e-6):
    """Central-difference Jacobian, linear rows then angular rows."""
    jac = np.zeros((6, mdl.dof))
    for i in range(mdl.dof):
        qp, qm = q.copy(), q.copy()
        qp[i] += h
        qm[i] -= h
        tp = forward_kinematics(mdl, qp)[link]
        tm = forward_kinematics(mdl, qm)[link]
        jac[:3, i] = (tp.translation - tm.translation) / (2 * h)
        jac[3:, i] = (tp.rotation @ tm.rotation.inverse()).as_rotvec() / (2 * h)
    return jac


def random_q(mdl, rng, margin=1e-4):
    lo, hi = mdl.lower + margin, mdl.upper - margin
    return lo + rng.uniform(size=mdl.dof) * (hi - lo)


# -- loading -------------------------------------------------------------


def test_default_model_shape(model):
    assert model.dof == 8
    assert model.root == "base_footprint"
    assert model.frames["rt"] == model.frames["rs"]
    assert model.lengths["rs_re"] == pytest.approx(0.30)
    assert len(model.spheres) == 4


def test_tip_moves_tip_link_only(tmp_path):
    mdl = load_model(write_model(tmp_path, PLANAR_ARM))
    assert mdl.dof == 1
    assert mdl.links == ("base", "tip")


@pytest.mark.parametrize("mangle,needle", [
    (lambda s: s.replace('limits = [-3.0, 3.0]', 'limits = [3.0, -3.0]'),
     "lower"),
    (lambda s: s.replace('axis = [0.0, 0.0, 1.0]', 'axis = [0.0, 0.0, 2.0]'),
     "axis"),
    (lambda s: s.replace('velocity_limit = 1.0', 'velocity_limit = 0.0'),
     "velocity_limit"),
    (lambda s: s.replace('rw = "tip"', 'rw = "nonexistent"'), "rw"),
    (lambda s: s.replace('\nrw = "tip"', ''), "rw"),
    (lambda s: s.replace('rf_rt = 1.0', 'rf_rt = -1.0'), "rf_rt"),
    (lambda s: s.replace('kind = "revolute"', 'kind = "spherical"'), "kind"),
], ids=["swapped-limits", "non-unit-axis", "zero-velocity", "bad-frame-link",
        "missing-frame", "negative-length", "bad-kind"])
def test_loader_rejects_malformed(tmp_path, mangle, needle):
    with pytest.raises(ModelError, match=needle):
        load_model(write_model(tmp_path, mangle(PLANAR_ARM)))


def test_loader_rejects_disconnected_joint(tmp_path):
    text = PLANAR_ARM + """
[[joint]]
name = "floating"
kind = "revolute"
axis = [0.0, 0.0, 1.0]
parent = "nowhere"
child = "lost"
limits = [-1.0, 1.0]
velocity_limit = 1.0
"""
    with pytest.raises(ModelError):
        load_model(write_model(tmp_path, text))


# -- forward kinematics ----------------------------------------------------


def test_home_pose_matches_declared_offsets(model):
    poses = forward_kinematics(model, np.zeros(model.dof))
    # Hand-composed chain: torso column 0.60, arm hangs 0.30 + 0.30 down.
    assert np.allclose(poses["base_footprint"].translation, [0, 0, 0])
    assert np.allclose(poses["torso_link"].translation, [0, 0, 0.60])
    assert np.allclose(poses["lower_arm_link"].translation, [0, 0, 0.30])
    assert np.allclose(poses["wrist_link"].translation, [0, 0, 0.00])
    for link in model.links:
        assert poses[link].rotation.approx_equal(Rotation.identity(), 1e-12)


def test_torso_lift_translates_whole_arm(model):
    q = np.zeros(model.dof)
    q[0] = 0.25
    poses = forward_kinematics(model, q)
    assert np.allclose(poses["torso_link"].translation, [0, 0, 0.85])
    assert np.allclose(poses["wrist_link"].translation, [0, 0, 0.25])


def test_segment_lengths_constant_over_configurations(model):
    """Spherical shoulder/wrist keep the correspondence lengths exact."""
    rng = np.random.default_rng(11)
    for _ in range(50):
        poses = forward_kinematics(model, random_q(model, rng))
        s = poses[model.frames["rs"]].translation
        e = poses[model.frames["re"]].translation
        w = poses[model.frames["rw"]].translation
        assert np.linalg.norm(e - s) == pytest.approx(model.lengths["rs_re"],
                                                      abs=1e-12)
        assert np.linalg.norm(w - e) == pytest.approx(model.lengths["re_rw"],
                                                      abs=1e-12)


def test_limits_enforced(model):
    q = np.zeros(model.dof)
    q[0] = 0.45  # torso travel tops out at 0.40
    with pytest.raises(JointLimitError, match="torso_lift"):
        forward_kinematics(model, q)
    q[0] = -0.01
    with pytest.raises(JointLimitError):
        forward_kinematics(model, q)
    # boundary values are legal
    forward_kinematics(model, model.upper)
    forward_kinematics(model, model.lower)


def test_wrong_dof_rejected(model):
    with pytest.raises(ValueError):
        forward_kinematics(model, np.zeros(3))


# -- Jacobians -------------------------------------------------------------


def test_planar_hinge_jacobian(tmp_path):
    """Unit revolute arm: tip columns are (0, l, 0) linear, (0, 0, 1) angular."""
    mdl = load_model(write_model(tmp_path, PLANAR_ARM))
    jac = geometric_jacobian(mdl, [0.0], "tip",
                             point=np.array([1.0, 0.0, 0.0]))
    assert np.allclose(jac[:3, 0], [0.0, 1.0, 0.0], atol=1e-12)
    assert np.allclose(jac[3:, 0], [0.0, 0.0, 1.0], atol=1e-12)


def test_jacobian_matches_finite_differences(model):
    """100 random configurations against the central-difference oracle."""
    rng = np.random.default_rng(12)
    for _ in range(100):
        q = random_q(model, rng)
        for key in ("rt", "re", "rw"):
            link = model.frames[key]
            jac = geometric_jacobian(model, q, link)
            ref = fd_jacobian(model, q, link)
            assert np.abs(jac - ref).max() < 1e-5


def test_frame_jacobian_prismatic_column(model):
    q = np.zeros(model.dof)
    jac = frame_jacobian(model, q, "rt")
    assert np.allclose(jac[:3, 0], [0, 0, 1], atol=1e-12)
    assert np.allclose(jac[3:, 0], 0, atol=1e-12)
    assert np.allclose(jac[:, 1:], 0, atol=1e-12)  # arm does not move the torso


def test_root_jacobian_zero(model):
    jac = geometric_jacobian(model, np.zeros(model.dof), "base_footprint")
    assert np.allclose(jac, 0)


# -- collision spheres -------------------------------------------------------


def test_sphere_distances_skip_adjacent(model):
    pairs = sphere_distances(model, np.zeros(model.dof))
    links = {frozenset((a.link, b.link)) for a, b, *_ in pairs}
    for pair in links:
        assert pair not in model.adjacent_links


def test_sphere_distance_value(model):
    """Hanging arm: wrist sphere vs body sphere by hand."""
    pairs = sphere_distances(model, np.zeros(model.dof))
    lookup = {frozenset((a.link, b.link)): d for a, b, d, *_ in pairs}
    got = lookup[frozenset(("base_footprint", "wrist_link"))]
    want = math.dist((-0.20, 0.0, 0.40), (0.0, 0.0, 0.0)) - 0.08 - 0.05
    assert got == pytest.approx(want, abs=1e-12)
