import numpy as np
import pytest

from pregrasp.errors import DataError
from pregrasp.geom import (
    Pose,
    angular_distance,
    quat_about_z,
    quat_from_axis_angle,
    quat_identity,
    quat_multiply,
)
from pregrasp.surrogate import (
    ObjectState,
    SurrogateConfig,
    attachment_step,
    push_response,
    resolve_push,
    rest_height,
    settle,
    snap_to_stable,
    support_fraction,
    update_attachment,
    world_aabb,
)

CFG = SurrogateConfig()
TABLE_LO = np.array([-0.5, -0.5])
TABLE_HI = np.array([0.5, 0.5])
X = np.array([1.0, 0.0, 0.0])

STABLE = np.stack([
    quat_identity(),
    quat_from_axis_angle(X, np.pi / 2),
    quat_from_axis_angle(X, -np.pi / 2),
])


def box_object(pos=(0.0, 0.0, 0.05), rot=None, half=(0.05, 0.03, 0.05)):
    h = np.asarray(half)
    return ObjectState(
        pose=Pose(np.asarray(pos, dtype=float), quat_identity() if rot is None else rot),
        mass=1.0,
        category=0,
        stable_rotations=STABLE,
        bbox_lo=-h,
        bbox_hi=h,
    )


def test_push_no_penetration_is_identity():
    obj = box_object()
    out = resolve_push(obj, np.array([0.01, 0.5]), np.zeros((2, 3)), X * 0.02,
                       TABLE_LO, TABLE_HI, CFG)
    assert out is obj


def test_push_translates_by_max_depth():
    obj = box_object()
    probes = np.array([[0.0, 0.0, 0.05]])
    out = resolve_push(obj, np.array([-0.004]), probes, X * 0.02, TABLE_LO, TABLE_HI, CFG)
    np.testing.assert_allclose(out.pose.position, [0.004, 0.0, 0.05], atol=1e-12)
    assert not out.falling


def test_push_ignores_vertical_motion():
    obj = box_object()
    probes = np.array([[0.0, 0.0, 0.05]])
    out = resolve_push(obj, np.array([-0.004]), probes, np.array([0.0, 0.0, -0.05]),
                       TABLE_LO, TABLE_HI, CFG)
    np.testing.assert_allclose(out.pose.position, obj.pose.position, atol=1e-12)


def test_push_yaw_sign_and_magnitude():
    # probe on the -y side of center, hand pushing +x: counter-clockwise spin
    obj = box_object()
    probes = np.array([[0.0, -0.05, 0.05]])
    depth = 0.02
    delta_pos, delta_yaw = push_response(
        np.array([[-depth]]), probes[None], obj.pose.position[None],
        (X * 0.01)[None], CFG.push_yaw_gain,
    )
    assert delta_yaw[0] == pytest.approx(CFG.push_yaw_gain * depth)
    np.testing.assert_allclose(delta_pos[0], [depth, 0, 0], atol=1e-12)
    # mirrored probe spins the other way
    _, yaw2 = push_response(
        np.array([[-depth]]), np.array([[[0.0, 0.05, 0.05]]]),
        obj.pose.position[None], (X * 0.01)[None], CFG.push_yaw_gain,
    )
    assert yaw2[0] == pytest.approx(-CFG.push_yaw_gain * depth)


def test_push_centered_probe_does_not_spin():
    obj = box_object()
    _, yaw = push_response(
        np.array([[-0.01]]), np.array([[[0.0, 0.0, 0.02]]]),
        obj.pose.position[None], (X * 0.01)[None], CFG.push_yaw_gain,
    )
    assert yaw[0] == 0.0


def test_push_off_table_sets_falling():
    obj = box_object(pos=(0.48, 0.0, 0.05))
    probes = np.array([[0.44, 0.0, 0.05]])
    out = resolve_push(obj, np.array([-0.06]), probes, X * 0.05, TABLE_LO, TABLE_HI, CFG)
    assert out.pose.position[0] == pytest.approx(0.54)
    # footprint [0.49, 0.59] x width 0.1 -> 0.01 over table = 10% support
    assert out.falling


def test_push_skips_attached_and_falling():
    from dataclasses import replace
    obj = replace(box_object(), attached=True)
    out = resolve_push(obj, np.array([-0.01]), np.zeros((1, 3)), X, TABLE_LO, TABLE_HI, CFG)
    assert out is obj


def test_support_fraction_values():
    lo = np.array([-0.05, -0.05])
    hi = np.array([0.05, 0.05])
    assert support_fraction(lo, hi, TABLE_LO, TABLE_HI) == pytest.approx(1.0)
    shift = np.array([0.5, 0.0])
    assert support_fraction(lo + shift, hi + shift, TABLE_LO, TABLE_HI) == pytest.approx(0.5)
    assert support_fraction(lo + 2.0, hi + 2.0, TABLE_LO, TABLE_HI) == 0.0


def test_attachment_spec_sequences():
    hand = Pose(np.array([0.0, 0, 0.3]), quat_identity())
    obj = box_object()
    for _ in range(4):
        obj = update_attachment(obj, 0.6, hand, CFG)
        assert not obj.attached
    obj = update_attachment(obj, 0.6, hand, CFG)
    assert obj.attached
    assert obj.grasp_offset is not None

    dropped = update_attachment(obj, 0.1, hand, CFG)
    assert not dropped.attached
    assert dropped.grasp_offset is None

    # 4 good steps then a bad one resets the streak
    obj = box_object()
    for _ in range(4):
        obj = update_attachment(obj, 0.6, hand, CFG)
    obj = update_attachment(obj, 0.3, hand, CFG)
    assert not obj.attached
    assert obj.hold_streak == 0


def test_attachment_holds_between_thresholds():
    hand = Pose(np.array([0.0, 0, 0.3]), quat_identity())
    obj = box_object()
    for _ in range(5):
        obj = update_attachment(obj, 0.9, hand, CFG)
    assert obj.attached
    # score in the hysteresis band keeps the grasp
    obj = update_attachment(obj, 0.3, hand, CFG)
    assert obj.attached


def test_attachment_never_toggles_both_ways():
    rng = np.random.default_rng(21)
    attached = np.zeros(256, dtype=bool)
    streak = np.zeros(256, dtype=np.int64)
    for _ in range(200):
        hold = rng.uniform(0, 1, 256)
        attached, streak, att, det = attachment_step(attached, streak, hold, CFG)
        assert not np.any(att & det)
        assert np.all(streak[attached] == 0)


def test_settle_noop_when_stable():
    obj = box_object(pos=(0.1, 0.2, 0.05))
    out = settle(obj, 0.0, TABLE_LO, TABLE_HI, CFG)
    np.testing.assert_allclose(out.pose.position, obj.pose.position, atol=1e-9)
    assert angular_distance(out.pose.rotation, obj.pose.rotation) < 1e-7


def test_settle_rights_small_tilt_preserving_yaw():
    yaw = 0.7
    tilted = quat_multiply(quat_about_z(yaw), quat_from_axis_angle(X, np.deg2rad(10)))
    obj = box_object(pos=(0.1, 0.0, 0.08), rot=tilted)
    out = settle(obj, 0.0, TABLE_LO, TABLE_HI, CFG)
    assert angular_distance(out.pose.rotation, quat_about_z(yaw)) < 1e-7
    # rests exactly on the table
    lo, _ = out.world_bounds()
    assert lo[2] == pytest.approx(0.0, abs=1e-9)


def test_settle_picks_side_pose():
    near_side = quat_multiply(quat_about_z(0.3),
                              quat_from_axis_angle(X, np.pi / 2 - 0.1))
    obj = box_object(rot=near_side)
    out = settle(obj, 0.0, TABLE_LO, TABLE_HI, CFG)
    _, res, choice = snap_to_stable(near_side, STABLE)
    assert choice == 1
    assert res == pytest.approx(0.1, abs=1e-7)
    # lying on its side: the y half-extent (0.03) now points up
    lo, hi = out.world_bounds()
    assert hi[2] - lo[2] == pytest.approx(0.06, abs=1e-9)
    assert lo[2] == pytest.approx(0.0, abs=1e-9)


def test_settle_idempotent():
    rng = np.random.default_rng(31)
    for _ in range(20):
        axis = rng.normal(size=3)
        q = quat_from_axis_angle(axis / np.linalg.norm(axis), rng.uniform(0, 3))
        obj = box_object(pos=(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 0.2), rot=q)
        once = settle(obj, 0.0, TABLE_LO, TABLE_HI, CFG)
        twice = settle(once, 0.0, TABLE_LO, TABLE_HI, CFG)
        np.testing.assert_allclose(twice.pose.position, once.pose.position, atol=1e-9)
        assert angular_distance(twice.pose.rotation, once.pose.rotation) < 1e-7
        lo, _ = once.world_bounds()
        assert lo[2] >= -1e-6


def test_settle_off_table_flag():
    obj = box_object(pos=(0.8, 0.0, 0.1))
    out = settle(obj, 0.0, TABLE_LO, TABLE_HI, CFG)
    assert out.falling


def test_snap_batch_matches_scalar():
    rng = np.random.default_rng(41)
    qs = []
    for _ in range(32):
        axis = rng.normal(size=3)
        qs.append(quat_from_axis_angle(axis / np.linalg.norm(axis), rng.uniform(0, 3)))
    qs = np.array(qs)
    snapped, res, choice = snap_to_stable(qs, STABLE)
    for i in range(32):
        s1, r1, c1 = snap_to_stable(qs[i], STABLE)
        np.testing.assert_array_equal(s1, snapped[i])
        assert r1 == res[i]
        assert c1 == choice[i]


def test_rest_height_and_world_aabb():
    h = np.array([0.05, 0.03, 0.05])
    q = quat_from_axis_angle(X, np.pi / 2)
    z = rest_height(q, -h, h, 0.1)
    assert z == pytest.approx(0.1 + 0.03, abs=1e-12)
    lo, hi = world_aabb(np.array([0.0, 0, z]), q, -h, h)
    np.testing.assert_allclose(hi - lo, [0.10, 0.10, 0.06], atol=1e-12)


def test_config_validation():
    with pytest.raises(DataError, match="detach"):
        SurrogateConfig(attach_threshold=0.2, detach_threshold=0.5)
    with pytest.raises(DataError, match="streak"):
        SurrogateConfig(attach_streak=0)
    with pytest.raises(DataError, match="support"):
        SurrogateConfig(min_support_fraction=1.5)
    with pytest.raises(DataError, match="empty"):
        box_object(half=(0.0, 0.01, 0.01))


def test_object_state_validation():
    with pytest.raises(DataError, match="mass"):
        ObjectState(Pose.identity(), 0.0, 0, STABLE, -np.ones(3), np.ones(3))
