import numpy as np
import pytest

from pregrasp.geom import (
    Pose,
    angular_distance,
    mat_to_quat,
    quat_about_z,
    quat_conjugate,
    quat_from_axis_angle,
    quat_from_euler_xyz,
    quat_from_rotvec,
    quat_identity,
    quat_multiply,
    quat_normalize,
    quat_rotate,
    quat_to_mat,
    quat_to_rotvec,
    quat_uniform,
    yaw_twist,
)


def trace_angle(qa, qb):
    # independent oracle: relative rotation angle from the matrix trace
    ra = quat_to_mat(np.asarray(qa))
    rb = quat_to_mat(np.asarray(qb))
    rel = ra.T @ rb
    c = (np.trace(rel) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def random_quats(rng, n):
    return quat_uniform(rng, n)


def test_angular_distance_of_identical_rotations_is_zero():
    q = quat_from_axis_angle([0.3, -1.0, 0.5], 1.2)
    assert angular_distance(q, q) == pytest.approx(0.0, abs=1e-12)


def test_angular_distance_quarter_turn_about_x():
    qa = quat_identity()
    qb = quat_from_axis_angle([1.0, 0.0, 0.0], np.pi / 2)
    expected = trace_angle(qa, qb)
    assert expected == pytest.approx(np.pi / 2, abs=1e-12)
    assert angular_distance(qa, qb) == pytest.approx(expected, abs=1e-9)


def test_angular_distance_double_cover():
    q = quat_from_axis_angle([0.0, 1.0, 0.0], 0.7)
    assert angular_distance(q, -q) == pytest.approx(0.0, abs=1e-12)


def test_angular_distance_matches_trace_oracle_on_fuzz():
    rng = np.random.default_rng(101)
    qa = random_quats(rng, 1000)
    qb = random_quats(rng, 1000)
    got = angular_distance(qa, qb)
    want = np.array([trace_angle(a, b) for a, b in zip(qa, qb)])
    assert np.max(np.abs(got - want)) < 1e-7


def test_angular_distance_range_and_triangle_inequality():
    rng = np.random.default_rng(7)
    qa = random_quats(rng, 1000)
    qb = random_quats(rng, 1000)
    qc = random_quats(rng, 1000)
    dab = angular_distance(qa, qb)
    dbc = angular_distance(qb, qc)
    dac = angular_distance(qa, qc)
    assert np.all(dab >= 0.0) and np.all(dab <= np.pi)
    assert np.all(dac <= dab + dbc + 1e-7)


def test_angular_distance_left_invariance():
    rng = np.random.default_rng(11)
    qa = random_quats(rng, 1000)
    qb = random_quats(rng, 1000)
    r = random_quats(rng, 1000)
    base = angular_distance(qa, qb)
    moved = angular_distance(quat_multiply(r, qa), quat_multiply(r, qb))
    assert np.max(np.abs(base - moved)) < 1e-7


def test_angular_distance_rejects_non_finite():
    with pytest.raises(ValueError):
        angular_distance(np.array([np.nan, 0, 0, 1.0]), quat_identity())


def test_quat_multiply_matches_matrix_product():
    rng = np.random.default_rng(3)
    qa = random_quats(rng, 200)
    qb = random_quats(rng, 200)
    q_ab = quat_multiply(qa, qb)
    m_ab = quat_to_mat(qa) @ quat_to_mat(qb)
    assert np.max(np.abs(quat_to_mat(q_ab) - m_ab)) < 1e-12


def test_quat_rotate_matches_matrix_apply():
    rng = np.random.default_rng(5)
    q = random_quats(rng, 500)
    v = rng.normal(size=(500, 3))
    got = quat_rotate(q, v)
    want = np.einsum("nij,nj->ni", quat_to_mat(q), v)
    assert np.max(np.abs(got - want)) < 1e-12


def quat_component_gap(qa, qb):
    # sign-folded component distance; angular_distance loses precision
    # near zero angle (arccos flattens), this does not
    d_plus = np.max(np.abs(qa - qb), axis=-1)
    d_minus = np.max(np.abs(qa + qb), axis=-1)
    return np.minimum(d_plus, d_minus)


def test_mat_to_quat_round_trip():
    rng = np.random.default_rng(13)
    q = random_quats(rng, 1000)
    back = mat_to_quat(quat_to_mat(q))
    assert np.max(quat_component_gap(q, back)) < 1e-9


def test_norm_preserved_over_long_composition_chain():
    rng = np.random.default_rng(17)
    q = quat_identity()
    for step in random_quats(rng, 1000):
        q = quat_multiply(q, step)
    assert abs(np.linalg.norm(q) - 1.0) < 1e-12


def test_euler_xyz_matches_single_axis_factors():
    e = np.array([0.3, -0.6, 1.1])
    qx = quat_from_axis_angle([1, 0, 0], e[0])
    qy = quat_from_axis_angle([0, 1, 0], e[1])
    qz = quat_from_axis_angle([0, 0, 1], e[2])
    want = quat_multiply(quat_multiply(qx, qy), qz)
    got = quat_from_euler_xyz(e)
    assert angular_distance(got, want) < 1e-12


def test_rotvec_round_trip():
    rng = np.random.default_rng(19)
    rv = rng.normal(size=(500, 3))
    # keep angles below pi so the log map is unique
    norms = np.linalg.norm(rv, axis=-1, keepdims=True)
    rv = rv / norms * (norms % 3.0)
    back = quat_to_rotvec(quat_from_rotvec(rv))
    assert np.max(np.abs(back - rv)) < 1e-9


def test_rotvec_small_angle_stable():
    rv = np.array([1e-12, -2e-12, 1e-13])
    q = quat_from_rotvec(rv)
    assert np.max(np.abs(quat_to_rotvec(q) - rv)) < 1e-15


def test_yaw_twist_extracts_z_rotation():
    q = quat_multiply(quat_about_z(0.9), quat_from_axis_angle([1, 0, 0], 0.2))
    # twist of (yaw about z) * (small swing) recovers the yaw
    assert yaw_twist(quat_about_z(0.9)) == pytest.approx(0.9, abs=1e-12)
    assert yaw_twist(q) == pytest.approx(0.9, abs=0.05)


def test_pose_compose_inverse_round_trip():
    rng = np.random.default_rng(23)
    for _ in range(1000):
        p = Pose(rng.normal(size=3), quat_uniform(rng))
        r = p.compose(p.inverse())
        assert np.max(np.abs(r.position)) < 1e-9
        assert angular_distance(r.rotation, quat_identity()) < 1e-9


def test_pose_frame_round_trip():
    rng = np.random.default_rng(29)
    for _ in range(1000):
        world = Pose(rng.normal(size=3), quat_uniform(rng))
        frame = Pose(rng.normal(size=3), quat_uniform(rng))
        again = world.to_frame(frame).from_frame(frame)
        assert np.max(np.abs(again.position - world.position)) < 1e-9
        assert quat_component_gap(again.rotation, world.rotation) < 1e-9


def test_pose_transform_point_matches_matrix():
    rng = np.random.default_rng(31)
    p = Pose(rng.normal(size=3), quat_uniform(rng))
    pts = rng.normal(size=(50, 3))
    m = p.as_matrix()
    want = (m[:3, :3] @ pts.T).T + m[:3, 3]
    assert np.max(np.abs(p.transform_point(pts) - want)) < 1e-12
    back = p.inverse_transform_point(p.transform_point(pts))
    assert np.max(np.abs(back - pts)) < 1e-9


def test_pose_constructor_normalizes_and_validates():
    p = Pose([0, 0, 0], [0, 0, 0, 2.0])
    assert np.linalg.norm(p.rotation) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        Pose([np.inf, 0, 0], quat_identity())
    with pytest.raises(ValueError):
        Pose([0, 0, 0], [0.0, 0.0, 0.0, 0.0])


def test_pose_arrays_are_read_only():
    p = Pose()
    with pytest.raises(ValueError):
        p.position[0] = 1.0


def test_quat_normalize_rejects_zero():
    with pytest.raises(ValueError):
        quat_normalize(np.zeros(4))


def test_conjugate_is_inverse_for_unit_quats():
    rng = np.random.default_rng(37)
    q = random_quats(rng, 100)
    prod = quat_multiply(q, quat_conjugate(q))
    ident = np.zeros((100, 4))
    ident[:, 3] = 1.0
    assert np.max(angular_distance(prod, ident)) < 1e-9
