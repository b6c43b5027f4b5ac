import json

import numpy as np
import pytest

from pregrasp.assets import data_path
from pregrasp.errors import DataError
from pregrasp.handmodel import Pose, load_hand
from pregrasp.objects import (
    GraspAnnotation,
    annotation_from_dict,
    annotation_to_dict,
    bundled_object_dir,
    find_annotations,
    load_annotation,
    load_object_set,
    save_annotation,
)
from pregrasp.reward import RewardConfig, hold_closure
from pregrasp.surrogate import SurrogateConfig

MASSES = {
    "drill": (1.4, 0.2),
    "spray_bottle": (0.5, 0.15),
    "mug": (0.3, 0.07),
    "box": (0.4, 0.05),
}


@pytest.fixture(scope="module")
def hand():
    return load_hand(data_path("hand", "hand.json"))


@pytest.fixture(scope="module")
def bundled(hand):
    return load_object_set("bundled", hand, MASSES)


def _sample_annotation(**overrides):
    fields = dict(
        object_id="widget",
        category="widget",
        mesh="widget.obj",
        grasp_position=(0.0, 0.01, 0.08),
        grasp_rotation=(1.0, 0.0, 0.0, 0.0),
        grasp_controls=(0.5,) * 5,
        close_controls=(1.5708,) * 5,
        key_probe="index_tip",
        nominal_rotation=(0.0, 0.0, 0.0, 1.0),
        stable_rotations=np.array([
            [0.0, 0.0, 0.0, 1.0],
            [np.sin(np.pi / 4), 0.0, 0.0, np.cos(np.pi / 4)],
            [-np.sin(np.pi / 4), 0.0, 0.0, np.cos(np.pi / 4)],
        ]),
    )
    fields.update(overrides)
    return GraspAnnotation(**fields)


def test_annotation_round_trip(tmp_path):
    ann = _sample_annotation()
    path = tmp_path / "widget.json"
    save_annotation(ann, path)
    back = load_annotation(path)
    assert back.object_id == ann.object_id
    assert back.category == ann.category
    assert back.mesh == ann.mesh
    np.testing.assert_allclose(back.grasp_position, ann.grasp_position)
    np.testing.assert_allclose(back.grasp_rotation, ann.grasp_rotation)
    np.testing.assert_allclose(back.grasp_controls, ann.grasp_controls)
    np.testing.assert_allclose(back.close_controls, ann.close_controls)
    assert back.key_probe == ann.key_probe
    np.testing.assert_allclose(back.stable_rotations, ann.stable_rotations)


def test_annotation_arrays_frozen():
    ann = _sample_annotation()
    with pytest.raises(ValueError):
        ann.grasp_position[0] = 1.0
    with pytest.raises(ValueError):
        ann.stable_rotations[0, 0] = 1.0


def test_annotation_rejects_unnormalized_quat():
    with pytest.raises(DataError, match="norm"):
        _sample_annotation(grasp_rotation=(2.0, 0.0, 0.0, 0.0))


def test_annotation_rejects_wrong_control_count():
    with pytest.raises(DataError, match="grasp_controls"):
        _sample_annotation(grasp_controls=(0.5, 0.5, 0.5))


def test_annotation_rejects_two_stable_poses():
    with pytest.raises(DataError, match="stable"):
        _sample_annotation(stable_rotations=np.array([
            [0.0, 0.0, 0.0, 1.0],
            [1.0, 0.0, 0.0, 0.0],
        ]))


def test_annotation_schema_gate():
    data = annotation_to_dict(_sample_annotation())
    data["schema"] = "grasp-v2"
    with pytest.raises(DataError, match="grasp-v1"):
        annotation_from_dict(data)


def test_annotation_missing_field():
    data = annotation_to_dict(_sample_annotation())
    del data["key_probe"]
    with pytest.raises(DataError, match="key_probe"):
        annotation_from_dict(data)


def test_find_annotations_skips_other_json(tmp_path):
    save_annotation(_sample_annotation(), tmp_path / "widget.json")
    (tmp_path / "notes.json").write_text(json.dumps({"hello": 1}))
    found = find_annotations(tmp_path)
    assert [p.name for p in found] == ["widget.json"]


def test_find_annotations_empty_dir(tmp_path):
    with pytest.raises(DataError, match="no grasp-v1"):
        find_annotations(tmp_path)


def test_bundled_set_contents(bundled):
    assert len(bundled) == 3
    assert bundled.categories == ("drill", "mug", "spray_bottle")
    ids = sorted(e.annotation.object_id for e in bundled)
    assert ids == ["drill", "mug", "spray_bottle"]
    # stacked arrays line up with the entries
    for i, e in enumerate(bundled):
        np.testing.assert_array_equal(bundled.grasp_pos[i], e.annotation.grasp_position)
        assert bundled.categories[bundled.category_index[i]] == e.annotation.category
    assert bundled.mass_mean[[e.annotation.category for e in bundled].index("drill")] == 1.4


def test_toy_set_single_box(hand):
    toy = load_object_set("toy", hand, MASSES)
    assert len(toy) == 1
    assert toy.categories == ("box",)
    assert toy.mass_mean[0] == 0.4


def test_missing_mass_distribution(hand):
    with pytest.raises(DataError, match="mass distribution"):
        load_object_set("bundled", hand, {"drill": (1.4, 0.2)})


def test_duplicate_ids_rejected(tmp_path, hand):
    mesh = bundled_object_dir() / "drill.obj"
    ann = load_annotation(bundled_object_dir() / "drill.json")
    for name in ("a.json", "b.json"):
        data = annotation_to_dict(ann)
        data["mesh"] = str(mesh)
        (tmp_path / name).write_text(json.dumps(data))
    with pytest.raises(DataError, match="duplicate"):
        load_object_set(tmp_path, hand, MASSES)


def test_key_probe_resolves(bundled, hand):
    for e in bundled:
        assert hand.probe_names[e.key_probe_index] == e.annotation.key_probe


def test_grasp_controls_inside_limits(bundled, hand):
    for e in bundled:
        assert np.all(e.annotation.grasp_controls >= hand.control_lower - 1e-9)
        assert np.all(e.annotation.grasp_controls <= hand.control_upper + 1e-9)
        assert np.all(e.annotation.close_controls <= hand.control_upper + 1e-9)


def test_stable_rotations_start_upright(bundled):
    for e in bundled:
        np.testing.assert_allclose(
            e.annotation.stable_rotations[0], e.annotation.nominal_rotation)


def test_bbox_matches_mesh_extents(bundled):
    # boxes are centered at the origin, so lo == -hi for those entries
    for e in bundled:
        assert np.all(e.bbox_lo < 0) and np.all(e.bbox_hi > 0)
        np.testing.assert_allclose(e.bbox_lo, -e.bbox_hi, atol=1e-9)


def test_annotated_grasp_closes(bundled, hand):
    """Closing the hand at the annotated pose must clear the attachment
    threshold with room to spare, and the pre-grasp must not start deeply
    penetrated; otherwise the dataset ships an ungraspable object."""
    rcfg = RewardConfig()
    scfg = SurrogateConfig()
    for e in bundled:
        ann = e.annotation
        palm = Pose(ann.grasp_position, ann.grasp_rotation)
        closed = hand.hold_points(palm, ann.close_controls)
        score = hold_closure(e.sdf.query(closed)[None, :], rcfg)[0]
        assert score >= scfg.attach_threshold + 0.1, ann.object_id
        pre = hand.probe_points(palm, ann.grasp_controls)
        assert e.sdf.query(pre).min() >= -0.002, ann.object_id
        key = e.sdf.query(closed)  # hold chord penetrates, key probe touches
        assert key.min() < -rcfg.hold_radius, ann.object_id


def test_grasp_close_tolerates_pose_error(bundled, hand):
    """The task counts a pose inside its tolerance ball as reached, so
    the closed hold score must stay above the attachment threshold for
    palm positions at the edge of that ball."""
    rcfg = RewardConfig()
    scfg = SurrogateConfig()
    for e in bundled:
        ann = e.annotation
        for k in range(3):
            for sign in (1.0, -1.0):
                off = np.zeros(3)
                off[k] = sign * 0.008
                palm = Pose(ann.grasp_position + off, ann.grasp_rotation)
                closed = hand.hold_points(palm, ann.close_controls)
                score = hold_closure(e.sdf.query(closed)[None, :], rcfg)[0]
                assert score >= scfg.attach_threshold, (ann.object_id, off)
