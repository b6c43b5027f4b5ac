import json

import numpy as np
import pytest

from pregrasp.assets import data_path
from pregrasp.errors import DataError
from pregrasp.geom import Pose, quat_from_axis_angle, quat_rotate, quat_to_mat
from pregrasp.handmodel import (
    FINGER_ORDER,
    HOLD_FRACTIONS,
    FingerSpec,
    HandSpec,
    hand_from_dict,
    hand_to_dict,
    load_hand,
    save_hand,
)


@pytest.fixture(scope="module")
def hand():
    return load_hand(data_path("hand", "hand.json"))


def random_palm(rng):
    axis = rng.normal(size=3)
    return Pose(rng.normal(size=3) * 0.3,
                quat_from_axis_angle(axis / np.linalg.norm(axis), rng.uniform(-3, 3)))


def test_bundled_hand_shape(hand):
    assert tuple(f.name for f in hand.fingers) == FINGER_ORDER
    assert hand.dof == 11
    assert hand.n_controls == 5
    assert hand.coupling.shape == (11, 5)
    assert hand.hand_length == pytest.approx(0.18)
    assert hand.probe_names[:5] == ("thumb_tip", "index_tip", "middle_tip", "ring_tip", "pinky_tip")
    assert hand.probe_names[5:] == ("thumb_mid", "index_mid", "middle_mid", "ring_mid", "pinky_mid")


def test_open_hand_middle_sites(hand):
    # with zero controls every finger lies straight along its base x axis
    pts = hand.probe_points(Pose.identity(), np.zeros(5))
    assert pts.shape == (10, 3)
    mid_finger = hand.fingers[2]
    tip = mid_finger.base.position + np.array([np.sum(mid_finger.segments), 0, 0])
    mid = mid_finger.base.position + np.array(
        [mid_finger.segments[0] + mid_finger.middle_length, 0, 0]
    )
    np.testing.assert_allclose(pts[2], tip, atol=1e-12)
    np.testing.assert_allclose(pts[7], mid, atol=1e-12)
    assert pts[2][0] == pytest.approx(hand.hand_length, abs=1e-9)


def test_expand_controls_respects_joint_limits(hand):
    rng = np.random.default_rng(303)
    u = rng.uniform(hand.control_lower, hand.control_upper, size=(1000, 5))
    joints = hand.expand_controls(u)
    assert joints.shape == (1000, 11)
    assert np.all(joints >= hand.joint_lower - 1e-12)
    assert np.all(joints <= hand.joint_upper + 1e-12)
    # wildly out-of-range controls still land inside the joint limits
    crazy = rng.uniform(-10, 10, size=(200, 5))
    joints = hand.expand_controls(crazy)
    assert np.all(joints >= hand.joint_lower - 1e-12)
    assert np.all(joints <= hand.joint_upper + 1e-12)


def test_clamp_controls(hand):
    u = np.array([-1.0, 0.5, 3.0, 0.0, 1.5708])
    c = hand.clamp_controls(u)
    assert np.all(c >= hand.control_lower)
    assert np.all(c <= hand.control_upper)
    assert c[1] == 0.5


def test_closing_shrinks_pinch_gap(hand):
    palm = Pose.identity()
    gaps = []
    for u in np.linspace(0.0, 1.5708, 25):
        pts = hand.probe_points(palm, np.full(5, u))
        gaps.append(np.linalg.norm(pts[0] - pts[2]))
    gaps = np.array(gaps)
    assert np.all(np.diff(gaps) < 0)
    assert gaps[0] > 0.08
    assert gaps[-1] < 0.03


def test_hold_points_fractions(hand):
    rng = np.random.default_rng(90)
    palm = random_palm(rng)
    u = rng.uniform(0, 1.5, size=5)
    probes = hand.probe_points(palm, u)
    thumb_tip, middle_tip, middle_mid = probes[0], probes[2], probes[7]
    hold = hand.hold_points(palm, u)
    assert hold.shape == (6, 3)
    expected = [thumb_tip + f * (middle_tip - thumb_tip) for f in HOLD_FRACTIONS]
    expected += [thumb_tip + f * (middle_mid - thumb_tip) for f in HOLD_FRACTIONS]
    np.testing.assert_allclose(hold, expected, atol=1e-12)


def test_probe_points_world_transform(hand):
    rng = np.random.default_rng(91)
    u = rng.uniform(0, 1.5, size=5)
    local = hand.probe_points(Pose.identity(), u)
    for _ in range(5):
        palm = random_palm(rng)
        world = hand.probe_points(palm, u)
        expected = np.array([palm.transform_point(p) for p in local])
        np.testing.assert_allclose(world, expected, atol=1e-12)


def test_batch_matches_scalar(hand):
    rng = np.random.default_rng(92)
    b = 17
    pos = rng.normal(size=(b, 3)) * 0.2
    quats = []
    for _ in range(b):
        axis = rng.normal(size=3)
        quats.append(quat_from_axis_angle(axis / np.linalg.norm(axis), rng.uniform(-3, 3)))
    quats = np.array(quats)
    rots = quat_to_mat(quats)
    joints = hand.expand_controls(rng.uniform(0, 1.5708, size=(b, 5)))
    probes = hand.probe_points_batch(pos, rots, joints)
    holds = hand.hold_points_batch(pos, rots, joints)
    assert probes.shape == (b, 10, 3)
    assert holds.shape == (b, 6, 3)
    for i in range(b):
        p1 = hand.probe_points_batch(pos[i : i + 1], rots[i : i + 1], joints[i : i + 1])[0]
        h1 = hand.hold_points_batch(pos[i : i + 1], rots[i : i + 1], joints[i : i + 1])[0]
        assert np.array_equal(p1, probes[i])
        assert np.array_equal(h1, holds[i])


def test_inner_normal(hand):
    palm = Pose(np.zeros(3), quat_from_axis_angle(np.array([1.0, 0, 0]), np.pi / 2))
    n = hand.inner_normal_world(palm)
    np.testing.assert_allclose(n, quat_rotate(palm.rotation, np.array([0.0, 0, 1.0])), atol=1e-12)
    np.testing.assert_allclose(n, [0.0, -1.0, 0.0], atol=1e-12)


def test_probe_index(hand):
    assert hand.probe_index("thumb_tip") == 0
    assert hand.probe_index("middle_mid") == 7
    with pytest.raises(DataError, match="unknown probe"):
        hand.probe_index("palm_center")


def test_round_trip(hand, tmp_path):
    again = hand_from_dict(hand_to_dict(hand))
    np.testing.assert_array_equal(again.coupling, hand.coupling)
    path = tmp_path / "hand.json"
    save_hand(hand, path)
    loaded = load_hand(path)
    u = np.linspace(0, 1.5, 5)
    np.testing.assert_array_equal(
        loaded.probe_points(Pose.identity(), u), hand.probe_points(Pose.identity(), u)
    )


def test_rejects_bad_records(hand, tmp_path):
    good = hand_to_dict(hand)

    bad = dict(good, schema="hand-v2")
    with pytest.raises(DataError, match="hand-v1"):
        hand_from_dict(bad)

    bad = json.loads(json.dumps(good))
    bad["coupling"] = bad["coupling"][:-1]
    with pytest.raises(DataError, match="coupling"):
        hand_from_dict(bad)

    bad = json.loads(json.dumps(good))
    bad["coupling"][0][0] = 50.0
    with pytest.raises(DataError, match="outside their limits"):
        hand_from_dict(bad)

    bad = json.loads(json.dumps(good))
    bad["fingers"][0], bad["fingers"][1] = bad["fingers"][1], bad["fingers"][0]
    with pytest.raises(DataError, match="order"):
        hand_from_dict(bad)

    bad = json.loads(json.dumps(good))
    bad["fingers"][0]["middle_site"]["joint"] = 9
    with pytest.raises(DataError, match="middle joint"):
        hand_from_dict(bad)

    bad = json.loads(json.dumps(good))
    del bad["hand_length"]
    with pytest.raises(DataError, match="malformed"):
        hand_from_dict(bad)

    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(DataError):
        load_hand(path)


def test_segment_validation():
    with pytest.raises(DataError, match="positive"):
        FingerSpec("thumb", Pose.identity(), np.array([0.04, -0.01]), 0, 0.01)
    with pytest.raises(DataError, match="length out of range"):
        FingerSpec("thumb", Pose.identity(), np.array([0.04, 0.03]), 0, 0.5)
