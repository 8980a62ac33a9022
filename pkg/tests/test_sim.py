"""Closed-loop simulator: wiring, clamps, scenarios and metrics."""

import math

import numpy as np
import pytest

from rtwbc.admittance import AdmittanceParams
from rtwbc.geom import Rotation, Transform
from rtwbc.model import forward_kinematics, load_default_model
from rtwbc.retarget import Observation, map_pose
from rtwbc.sim import (
    SCENARIO_NAMES,
    SimConfig,
    WrenchEvent,
    elbow_angle,
    example_configuration,
    example_pair,
    make_correspondence,
    metrics,
    run,
    scenario,
    scripted_wrench,
)
from rtwbc.stream import StaticParams, synth_static


@pytest.fixture(scope="module")
def model():
    return load_default_model()


@pytest.fixture(scope="module")
def person_example(model):
    person, _ = example_pair(model)
    return person


def short_static_config(model, duration=1.0, **overrides):
    defaults = dict(duration=duration, q0=tuple(example_configuration(model)),
                    limit_margin=0.03, model=model)
    defaults.update(overrides)
    return SimConfig(**defaults)


def static_stream(person, duration, rate=50.0):
    return synth_static(person, StaticParams(duration=duration, rate=rate))


@pytest.fixture(scope="module")
def grasp_trace(model):
    config, frames = scenario("grasp_release", model)
    return config, run(config, frames)


# -- small pure helpers ---------------------------------------------------


def test_elbow_angle_examples():
    assert elbow_angle((0, 0, 1), (0, 0, 0), (0, 0, -1)) == pytest.approx(math.pi)
    assert elbow_angle((1, 0, 0), (0, 0, 0), (0, 1, 0)) == pytest.approx(math.pi / 2)
    assert elbow_angle((2, 0, 0), (1, 0, 0), (2, 0, 0)) == pytest.approx(0.0)
    with pytest.raises(ValueError, match="degenerate"):
        elbow_angle((0, 0, 0), (0, 0, 0), (1, 0, 0))


def test_scripted_wrench_window_semantics():
    events = (WrenchEvent(1.0, 2.0, force=(1.0, 0.0, 0.0)),
              WrenchEvent(1.5, 3.0, force=(0.0, 2.0, 0.0),
                          torque=(0.0, 0.0, 0.5)))
    assert scripted_wrench(events, 0.5).force_norm() == 0.0
    assert np.array_equal(scripted_wrench(events, 1.0).force, [1.0, 0.0, 0.0])
    # Overlap sums; the stop edge is exclusive.
    assert np.array_equal(scripted_wrench(events, 1.7).force, [1.0, 2.0, 0.0])
    assert np.array_equal(scripted_wrench(events, 2.0).force, [0.0, 2.0, 0.0])
    assert scripted_wrench(events, 3.0).force_norm() == 0.0
    assert scripted_wrench((), 1.0).force_norm() == 0.0


def test_wrench_event_validation():
    with pytest.raises(ValueError):
        WrenchEvent(2.0, 1.0)
    with pytest.raises(ValueError):
        WrenchEvent(-0.5, 1.0)
    with pytest.raises(ValueError):
        WrenchEvent(0.0, 1.0, force=(math.nan, 0.0, 0.0))


def test_sim_config_validation():
    with pytest.raises(ValueError, match="duration"):
        SimConfig(duration=0.0)
    with pytest.raises(ValueError, match="control_rate"):
        SimConfig(duration=1.0, control_rate=30.0, force_sample_rate=40.0)
    with pytest.raises(ValueError, match="k_p"):
        SimConfig(duration=1.0, k_p=0.0)
    with pytest.raises(ValueError, match="damping"):
        SimConfig(duration=1.0, damping=-1e-9)


# -- example pose and correspondence --------------------------------------


def test_example_pair_is_a_mapping_fixed_point(model, person_example):
    """Mapping the person example must reproduce the robot example."""
    corr = make_correspondence(model)
    goals = map_pose(person_example, corr)

    q = example_configuration(model)
    poses = forward_kinematics(model, q)
    rf = poses[model.frame_link("rf")]
    rt = poses[model.frame_link("rt")]
    rs = poses[model.frame_link("rs")]
    re = poses[model.frame_link("re")]
    rw = poses[model.frame_link("rw")]

    assert np.allclose(goals.ro_rf.translation, rf.translation, atol=1e-9)
    assert np.allclose(goals.rf_rt.translation,
                       (rf.inverse() @ rt).translation, atol=1e-9)
    assert np.allclose(goals.rs_re.translation,
                       (rs.inverse() @ re).translation, atol=1e-9)
    assert np.allclose(goals.rs_rw.translation,
                       (rs.inverse() @ rw).translation, atol=1e-9)
    want_rot = (rs.inverse() @ rw).rotation.wxyz
    got_rot = goals.rs_rw.rotation.wxyz
    assert min(np.linalg.norm(got_rot - want_rot),
               np.linalg.norm(got_rot + want_rot)) < 1e-9


def test_example_configuration_sits_clear_of_limits(model):
    q = example_configuration(model)
    assert np.all(q >= model.lower + 0.02)
    assert np.all(q <= model.upper - 0.02)


# -- run loop mechanics ----------------------------------------------------


def test_run_is_deterministic(model, person_example):
    config = short_static_config(model, duration=1.5,
                                 wrench_script=(WrenchEvent(
                                     0.3, 0.9, force=(6.0, -2.0, 1.0)),))
    frames = static_stream(person_example, 1.5)
    a = run(config, frames)
    b = run(config, frames)
    for name in ("q", "qdot", "ee_actual", "k", "psi", "base_pose",
                 "residuals", "deflection"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name


def test_trace_csv_round_trips_exactly(model, person_example, tmp_path):
    config = short_static_config(model, duration=0.5)
    trace = run(config, static_stream(person_example, 0.5))
    path = tmp_path / "trace.csv"
    trace.write_csv(path)

    header = path.read_text().splitlines()[0].split(",")
    assert header == trace.csv_header()
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert data.shape == (len(trace), len(header))
    k_col = header.index("k")
    assert np.array_equal(data[:, k_col], trace.k)
    q0_col = header.index(f"q_{model.joint_names[0]}")
    assert np.array_equal(data[:, q0_col], trace.q[:, 0])


def test_joint_limits_and_velocity_clamps_hold(model, person_example):
    config = short_static_config(
        model, duration=1.5, q0=tuple(np.zeros(model.dof) + 0.1))
    trace = run(config, static_stream(person_example, 1.5))
    assert np.all(trace.q >= model.lower - 1e-12)
    assert np.all(trace.q <= model.upper + 1e-12)
    assert np.all(np.abs(trace.qdot) <= model.velocity_limits + 1e-12)


def test_goals_update_only_when_observations_arrive(model, person_example):
    """A 10 Hz stream held at 100 Hz control changes goals on arrivals."""
    from rtwbc.stream import SpiralParams, synth_spiral
    frames = synth_spiral(person_example,
                          SpiralParams(rate=10.0, duration=2.0, turns=1.0))
    config = short_static_config(model, duration=2.0)
    trace = run(config, frames)
    changes = np.nonzero(np.diff(trace.elbow_angle_goal))[0] + 1
    # Arrival ticks are multiples of 10 (0.1 s obs period, 0.01 s ticks).
    assert len(changes) > 0
    assert np.all(changes % 10 == 0)


def test_force_path_updates_at_its_own_rate(model, person_example):
    """psi moves only on force ticks: runs of 2 or 3 control ticks."""
    config = short_static_config(
        model, duration=2.0,
        wrench_script=(WrenchEvent(0.2, 2.0, force=(12.0, 0.0, 0.0)),))
    trace = run(config, static_stream(person_example, 2.0))
    assert trace.psi.max() == pytest.approx(1.0)
    window = trace.psi[(trace.t > 0.45) & (trace.t < 0.95)]
    assert np.all(np.diff(window) >= 0.0)
    assert 0.0 < window[0] < window[-1] < 1.0
    changes = np.nonzero(np.diff(window))[0]
    assert len(changes) >= 10
    spacing = np.diff(changes)
    assert set(spacing.tolist()) <= {2, 3}


def test_degenerate_observation_held_and_flagged(model, person_example):
    poses = dict(person_example.poses)
    poses["pe_r"] = poses["ps_r"]  # elbow collapses onto the shoulder
    degenerate = Observation(timestamp=0.5, poses=poses)
    frames = [Observation(timestamp=0.0, poses=person_example.poses),
              degenerate,
              Observation(timestamp=1.0, poses=person_example.poses)]
    config = short_static_config(model, duration=1.5, gap_tolerance=5.0)
    trace = run(config, frames)
    held = trace.degenerate_hold
    assert held.sum() == 1
    assert trace.t[np.nonzero(held)[0][0]] == pytest.approx(0.5)
    # Goal columns never jump: the bad sample was never mapped.
    assert np.ptp(trace.elbow_angle_goal) < 1e-12


def test_degenerate_first_observation_raises(model, person_example):
    poses = dict(person_example.poses)
    poses["pe_r"] = poses["ps_r"]
    frames = [Observation(timestamp=0.0, poses=poses)]
    config = short_static_config(model, duration=0.5)
    with pytest.raises(Exception, match="degenerate"):
        run(config, frames)


def test_stream_gap_is_flagged(model, person_example):
    frames = [Observation(timestamp=0.0, poses=person_example.poses)]
    config = short_static_config(model, duration=1.0, gap_tolerance=0.25)
    trace = run(config, frames)
    assert np.array_equal(trace.stream_gap, trace.t > 0.25)
    assert trace.stream_gap.sum() == 74


def test_empty_stream_rejected(model):
    with pytest.raises(ValueError, match="empty"):
        run(short_static_config(model, duration=0.5), [])


def test_wrong_q0_length_rejected(model, person_example):
    config = short_static_config(model, duration=0.5, q0=(0.1, 0.2))
    with pytest.raises(ValueError, match="entries"):
        run(config, static_stream(person_example, 0.5))


def test_shuffled_stream_equals_sorted_stream(model, person_example):
    from rtwbc.stream import SpiralParams, synth_spiral
    frames = synth_spiral(person_example,
                          SpiralParams(rate=20.0, duration=1.0, turns=1.0))
    config = short_static_config(model, duration=1.0)
    rng = np.random.default_rng(3)
    shuffled = list(frames)
    rng.shuffle(shuffled)
    a = run(config, frames)
    b = run(config, shuffled)
    assert np.array_equal(a.q, b.q)


def test_base_holds_still_under_a_static_person(model, person_example):
    config = short_static_config(model, duration=1.0)
    trace = run(config, static_stream(person_example, 1.0))
    assert np.all(trace.base_pose == 0.0)
    assert np.all(trace.base_cmd == 0.0)


def test_init_offset_declares_start_coincident(model, person_example):
    """A base far from the person odom origin still starts in agreement."""
    config = short_static_config(model, duration=1.0,
                                 base_start=(1.0, 0.5, 0.3))
    trace = run(config, static_stream(person_example, 1.0))
    assert np.allclose(trace.base_error[0], 0.0, atol=1e-12)
    assert np.allclose(trace.base_pose[-1], (1.0, 0.5, 0.3), atol=1e-12)


def test_scripted_wrench_shows_up_in_the_trace(model, person_example):
    config = short_static_config(
        model, duration=2.0,
        wrench_script=(WrenchEvent(0.5, 1.5, force=(15.0, 0.0, 0.0)),))
    trace = run(config, static_stream(person_example, 2.0))
    inside = (trace.t >= 0.525) & (trace.t <= 1.475)
    outside = trace.t < 0.475
    assert np.all(trace.wrench[inside, 0] == 15.0)
    assert np.all(trace.wrench[outside, 0] == 0.0)
    assert np.max(np.linalg.norm(trace.deflection, axis=1)) > 0.05
    assert trace.k.min() < 450.0


# -- metrics ----------------------------------------------------------------


def test_metrics_zero_for_exact_tracking(model, person_example):
    config = short_static_config(model, duration=0.5)
    trace = run(config, static_stream(person_example, 0.5))
    trace.ee_actual = trace.ee_goal.copy()
    trace.elbow_angle_actual = trace.elbow_angle_goal.copy()
    trace.base_error[:] = 0.0
    m = metrics(trace)
    assert m["ee_mae_m"] == 0.0
    assert m["elbow_angle_mae_rad"] == 0.0
    assert m["base_pos_mae_m"] == 0.0
    assert m["base_yaw_mae_rad"] == 0.0


def test_metrics_report_a_constant_offset_exactly(model, person_example):
    config = short_static_config(model, duration=0.5)
    trace = run(config, static_stream(person_example, 0.5))
    trace.ee_actual = trace.ee_goal + np.array([0.1, 0.0, 0.0])
    m = metrics(trace)
    assert m["ee_mae_m"] == pytest.approx(0.1, abs=1e-12)


def test_metrics_schema(grasp_trace):
    _, trace = grasp_trace
    m = metrics(trace)
    for key in ("ticks", "duration_s", "ee_mae_m", "elbow_angle_mae_rad",
                "base_pos_mae_m", "base_yaw_mae_rad", "max_task_residuals",
                "violations", "saturation", "holds"):
        assert key in m
    assert set(m["max_task_residuals"]) == set(trace.task_names)
    assert m["violations"]["total"] == sum(
        v for k, v in m["violations"].items() if k != "total")


# -- bundled scenarios ------------------------------------------------------


def test_scenario_names_are_stable():
    assert set(SCENARIO_NAMES) == {"static", "spiral", "walk",
                                   "grasp_release"}
    with pytest.raises(ValueError, match="unknown scenario"):
        scenario("cartwheel")


def test_static_scenario_regulates_to_the_example_posture(model):
    config, frames = scenario("static", model)
    trace = run(config, frames)
    final_err = np.linalg.norm(trace.ee_goal[-1] - trace.ee_actual[-1])
    assert final_err < 1e-3
    assert np.allclose(trace.q[-1], example_configuration(model), atol=1e-4)
    assert trace.violation_counts()["total"] == 0


def test_grasp_release_episode_shape(grasp_trace):
    config, trace = grasp_trace
    params = config.admittance
    assert trace.psi.max() == pytest.approx(1.0)
    assert trace.k.min() < 1.01 * params.k_min
    # Pre-grasp stiffness is restored at the end.
    assert abs(trace.k[-1] - trace.k[0]) < 0.01 * trace.k[0]
    final_err = np.linalg.norm(trace.ee_goal[-1] - trace.ee_actual[-1])
    assert final_err < 1e-3
    assert trace.violation_counts()["total"] == 0
    # The grasp visibly displaced the commanded pose.
    assert np.max(np.linalg.norm(trace.deflection, axis=1)) > 0.5


def test_grasp_release_monitor_quiet_but_armed(grasp_trace):
    """k moved fast during release yet stayed under the bound."""
    _, trace = grasp_trace
    rising = trace.k_dot[trace.k_dot > 0.0]
    assert rising.size > 0
    assert np.max(rising) > 10.0
    assert np.all(trace.k_dot <= trace.k_bound + 1e-9)
    assert not trace.stability_violation.any()


def test_bundled_correspondence_matches_a_fresh_calibration(model):
    """The shipped file must stay in sync with the example pair."""
    from rtwbc.retarget import default_correspondence_path, load_correspondence
    path = default_correspondence_path()
    assert path.is_file()
    stored = load_correspondence(path)
    fresh = make_correspondence(model)
    assert stored.side == fresh.side
    assert stored.l_rf_rt == fresh.l_rf_rt
    assert stored.l_rs_re == fresh.l_rs_re
    assert stored.l_re_rw == fresh.l_re_rw
    for pair, rot in fresh.rs.items():
        got = stored.rs[pair].wxyz
        want = rot.wxyz
        assert min(np.linalg.norm(got - want),
                   np.linalg.norm(got + want)) < 1e-12, pair
