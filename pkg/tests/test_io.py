import json
import math

import numpy as np
import pytest

from pointvox.geom import Box3D, ObjectClass, PointCloud
from pointvox.io import (
    Scene,
    SceneFormatError,
    foreground_fraction,
    generate_scene,
    read_kitti_bin,
    read_scene_json,
    scene_from_dict,
    scene_to_dict,
    write_kitti_bin,
    write_scene_json,
)
from pointvox.voxelize import GridSpec, crop_to_range


class TestKittiBin:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.bin"
        path.write_bytes(b"")
        cloud = read_kitti_bin(path)
        assert len(cloud) == 0
        assert cloud.feat_dim == 1

    def test_single_record(self, tmp_path):
        path = tmp_path / "one.bin"
        path.write_bytes(np.array([1.0, 2.0, 3.0, 0.5], dtype="<f4").tobytes())
        cloud = read_kitti_bin(path)
        np.testing.assert_array_equal(cloud.xyz, [[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(cloud.feat, [[0.5]])

    def test_truncated_file_reports_offset(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x00" * 35)
        with pytest.raises(SceneFormatError, match="byte offset 32"):
            read_kitti_bin(path)

    def test_write_read_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        xyz = rng.uniform(-50, 50, size=(1000, 3)).astype(np.float32).astype(np.float64)
        feat = rng.uniform(0, 1, size=(1000, 1)).astype(np.float32).astype(np.float64)
        cloud = PointCloud(xyz, feat)
        path = tmp_path / "cloud.bin"
        write_kitti_bin(path, cloud)
        back = read_kitti_bin(path)
        np.testing.assert_array_equal(back.xyz, cloud.xyz)
        np.testing.assert_array_equal(back.feat, cloud.feat)

    def test_featureless_cloud_writes_zero_intensity(self, tmp_path):
        cloud = PointCloud(np.ones((3, 3)))
        path = tmp_path / "plain.bin"
        write_kitti_bin(path, cloud)
        back = read_kitti_bin(path)
        np.testing.assert_array_equal(back.feat, np.zeros((3, 1)))


class TestSceneJson:
    def test_minimal_scene(self, tmp_path):
        path = tmp_path / "scene.json"
        path.write_text(json.dumps({"points": [[1.0, 2.0, 3.0]]}))
        scene = read_scene_json(path)
        assert len(scene.cloud) == 1
        assert scene.gt_boxes == []
        assert scene.scores is None

    def test_yaw_normalized_with_warning(self, tmp_path):
        path = tmp_path / "scene.json"
        doc = {
            "points": [[0.0, 0.0, 0.0]],
            "boxes": [{"center": [0, 0, 0], "size": [1, 1, 1], "yaw": 3 * math.pi / 2, "class": "Car"}],
        }
        path.write_text(json.dumps(doc))
        with pytest.warns(UserWarning, match="normalizing"):
            scene = read_scene_json(path)
        assert scene.gt_boxes[0].yaw == pytest.approx(-math.pi / 2)

    def test_json_syntax_error_is_line_precise(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{\n "points": [[0, 0, 0]\n}')
        with pytest.raises(SceneFormatError, match=r":3:1"):
            read_scene_json(path)

    @pytest.mark.parametrize(
        "doc,fragment",
        [
            ({}, "missing field 'points'"),
            ({"points": "nope"}, "points: expected a list"),
            ({"points": [[1.0, 2.0]]}, "points\\[0\\]"),
            ({"points": [[1, 2, 3], [1, 2, 3, 4]]}, "row length 4 != 3"),
            (
                {"points": [[0, 0, 0]], "boxes": [{"center": [0, 0, 0]}]},
                "missing field 'size'",
            ),
            (
                {
                    "points": [[0, 0, 0]],
                    "boxes": [
                        {"center": [0, 0, 0], "size": [0, 1, 1], "yaw": 0, "class": "Car"}
                    ],
                },
                "sizes must be positive",
            ),
            (
                {
                    "points": [[0, 0, 0]],
                    "boxes": [
                        {"center": [0, 0, 0], "size": [1, 1, 1], "yaw": 0, "class": "Tree"}
                    ],
                },
                "unknown class",
            ),
            ({"points": [[0, 0, 0]], "scores": [0.5, 0.5]}, "expected 1 values"),
            ({"points": [[0, 0, 0]], "scores": [1.5]}, "must lie in"),
        ],
    )
    def test_schema_violations(self, tmp_path, doc, fragment):
        path = tmp_path / "scene.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(SceneFormatError, match=fragment):
            read_scene_json(path)

    def test_round_trip_field_equal(self, tmp_path):
        scene = generate_scene(17, n_points=50, n_boxes=3)
        scene = Scene(
            scene.cloud,
            scene.gt_boxes,
            scores=np.linspace(0, 1, 50),
            frame_id=scene.frame_id,
            source=scene.source,
        )
        path = tmp_path / "scene.json"
        write_scene_json(path, scene)
        back = read_scene_json(path)
        np.testing.assert_array_equal(back.cloud.xyz, scene.cloud.xyz)
        np.testing.assert_array_equal(back.cloud.feat, scene.cloud.feat)
        np.testing.assert_array_equal(back.scores, scene.scores)
        assert back.frame_id == scene.frame_id
        assert len(back.gt_boxes) == len(scene.gt_boxes)
        for a, b in zip(back.gt_boxes, scene.gt_boxes):
            assert a == b

    def test_dict_round_trip_is_exact_for_arbitrary_floats(self):
        rng = np.random.default_rng(1)
        cloud = PointCloud(rng.normal(size=(20, 3)) * 17.3, rng.normal(size=(20, 2)))
        scene = Scene(cloud, [Box3D(0.1, -0.2, 0.3, 1.7, 2.9, 0.4, yaw=1.234)])
        back = scene_from_dict(json.loads(json.dumps(scene_to_dict(scene))))
        np.testing.assert_array_equal(back.cloud.xyz, cloud.xyz)
        np.testing.assert_array_equal(back.cloud.feat, cloud.feat)
        assert back.gt_boxes[0] == scene.gt_boxes[0]


class TestGenerateScene:
    def test_deterministic(self):
        a = generate_scene(5)
        b = generate_scene(5)
        np.testing.assert_array_equal(a.cloud.xyz, b.cloud.xyz)
        assert a.gt_boxes == b.gt_boxes

    def test_respects_grid_range_and_counts(self):
        spec = GridSpec.small()
        scene = generate_scene(9, spec=spec, n_points=500, n_boxes=3)
        assert len(scene.cloud) == 500
        assert len(scene.gt_boxes) == 3
        cropped = crop_to_range(scene.cloud, spec)
        assert len(cropped) == 500  # everything inside the half-open range

    def test_foreground_fraction_near_target(self):
        scene = generate_scene(11, n_points=4000, n_boxes=2, fg_fraction=0.05)
        frac = foreground_fraction(scene)
        assert 0.04 <= frac <= 0.09  # background may add a few hits

    def test_zero_boxes(self):
        scene = generate_scene(13, n_boxes=0, n_points=100)
        assert scene.gt_boxes == []
        assert foreground_fraction(scene) == 0.0

    def test_scene_scores_validation(self):
        cloud = PointCloud(np.zeros((2, 3)))
        with pytest.raises(SceneFormatError):
            Scene(cloud, scores=np.array([0.5]))
        with pytest.raises(SceneFormatError):
            Scene(cloud, scores=np.array([0.5, 2.0]))
