import os

import numpy as np
import pytest

from fmtnet import geometry, synthdata
from fmtnet.errors import InvalidArgument
from fmtnet.geometry import RigidTransform, project_warp
from fmtnet.models import CameraIntrinsics, MotionProfile, SequenceKind
from fmtnet.synthdata import Rectangle, Scene, SequenceDataset
from fmtnet.tensor import Tensor


class TestScenes:
    def test_deterministic(self):
        assert synthdata.generate_scene(11, 6) == synthdata.generate_scene(11, 6)

    def test_class_ids_in_range(self):
        for seed in range(50):
            scene = synthdata.generate_scene(seed, 4)
            assert all(0 < rect.class_id < 4 for rect in scene.rectangles)
            assert 3 <= len(scene.rectangles) <= 8

    def test_classes_distinct_until_exhausted(self):
        for seed in range(100):
            classes = [rect.class_id for rect in synthdata.generate_scene(seed, 6).rectangles]
            foreground = min(len(classes), 5)
            assert len(set(classes[:foreground])) == foreground
            if len(classes) > 5:
                assert set(classes) == {1, 2, 3, 4, 5}

    def test_seeds_give_distinct_layouts(self):
        layouts = {hash(synthdata.generate_scene(seed, 6)) for seed in range(100)}
        assert len(layouts) == 100

    def test_out_of_range_class_rejected(self):
        rect = Rectangle(2, 2.0, (-1.0, -1.0), (2.0, 2.0), 5, 0, 3.0)
        with pytest.raises(InvalidArgument):
            Scene((rect,), class_count=3)


class TestRender:
    def test_full_view_plane(self):
        K = CameraIntrinsics.default_for(16, 16)
        scene = Scene((Rectangle(2, 2.0, (-10.0, -10.0), (20.0, 20.0), 1, 0, 3.0),), class_count=2)
        frame, depth, labels = synthdata.render(scene, RigidTransform.identity(), K)
        np.testing.assert_allclose(depth, 2.0)
        np.testing.assert_array_equal(labels, 1)
        assert frame.shape == (3, 16, 16)
        assert frame.min() >= 0.0 and frame.max() <= 1.0

    def test_empty_scene(self):
        K = CameraIntrinsics.default_for(8, 8)
        frame, depth, labels = synthdata.render(Scene((), class_count=3), RigidTransform.identity(), K)
        np.testing.assert_array_equal(depth, synthdata.FAR_DEPTH)
        np.testing.assert_array_equal(labels, synthdata.BACKGROUND_CLASS)

    def test_nearer_rectangle_occludes(self):
        K = CameraIntrinsics.default_for(8, 8)
        far = Rectangle(2, 4.0, (-10.0, -10.0), (20.0, 20.0), 1, 0, 3.0)
        near = Rectangle(2, 1.0, (-10.0, -10.0), (20.0, 20.0), 2, 1, 3.0)
        _, depth, labels = synthdata.render(Scene((far, near), class_count=3), RigidTransform.identity(), K)
        np.testing.assert_allclose(depth, 1.0)
        np.testing.assert_array_equal(labels, 2)


class TestSequences:
    def test_shapes_and_ranges(self):
        sample = synthdata.generate_sequence(1, length=5, class_count=4)
        assert sample.frames.shape == (5, 3, 32, 32)
        assert sample.depths.shape == (5, 1, 32, 32)
        assert sample.labels.shape == (5, 1, 32, 32)
        assert sample.frames.min() >= 0.0 and sample.frames.max() <= 1.0
        assert sample.depths.min() > 0.0
        assert sample.labels.max() < 4

    def test_deterministic(self):
        a, b = synthdata.generate_sequence(8, length=3), synthdata.generate_sequence(8, length=3)
        np.testing.assert_array_equal(a.frames, b.frames)
        np.testing.assert_array_equal(a.poses[-1].matrix(), b.poses[-1].matrix())

    def test_still_profile(self):
        sample = synthdata.generate_sequence(2, length=4, profile=MotionProfile.still())
        for t in range(1, 4):
            np.testing.assert_array_equal(sample.frames[t], sample.frames[0])
            np.testing.assert_allclose(sample.motion(t).matrix(), np.eye(4), atol=1e-12)

    def test_static_kind(self):
        sample = synthdata.generate_sequence(2, length=3, kind=SequenceKind.STATIC)
        assert all(np.array_equal(pose.matrix(), np.eye(4)) for pose in sample.poses)
        np.testing.assert_array_equal(sample.frames[2], sample.frames[0])

    def test_motion_is_consistent_with_poses(self):
        sample = synthdata.generate_sequence(4, length=4)
        for t in range(1, 4):
            recomputed = geometry.compose(geometry.invert(sample.poses[t]), sample.poses[t - 1])
            assert geometry.rotation_error(recomputed, sample.motion(t)) == pytest.approx(0.0, abs=1e-7)
            assert geometry.translation_error(recomputed, sample.motion(t)) == pytest.approx(0.0, abs=1e-20)

    def test_camera_moves_by_a_few_pixels(self):
        displacements = []
        for seed in range(100):
            sample = synthdata.generate_sequence(seed, length=4)
            K = sample.intrinsics
            grid_v, grid_u = np.meshgrid(np.arange(K.height), np.arange(K.width), indexing="ij")
            for t in range(1, 4):
                depth = geometry.DepthMap(sample.depths[t - 1])
                ut, vt, _ = geometry.transformed_coordinates(depth, sample.motion(t), K)
                displacements.append(np.hypot(ut - grid_u, vt - grid_v).mean())
        assert 0.5 <= np.mean(displacements) <= 3.0

    def test_warp_reproduces_next_labels(self):
        K = CameraIntrinsics.default_for(32, 32)
        matched = valid = 0
        for seed in range(20):
            sample = synthdata.generate_sequence(seed, length=3, intrinsics=K)
            for t in range(1, 3):
                result = project_warp(Tensor(sample.labels[t - 1]), sample.depths[t - 1], sample.motion(t), K)
                mask = result.validity[0] > 0
                matched += int(np.sum(result.warped.data[0][mask] == sample.labels[t][0][mask]))
                valid += int(mask.sum())
        assert matched / valid >= 0.95

    def test_too_short(self):
        with pytest.raises(InvalidArgument):
            synthdata.generate_sequence(0, length=1)


class TestDatasetFiles:
    def test_save_load_round_trip(self, tmp_path):
        sample = synthdata.generate_sequence(6, length=3, class_count=5, seq_id="seq_a")
        path = synthdata.save_sequence(str(tmp_path), sample)
        loaded = synthdata.load_sequence(path)
        np.testing.assert_array_equal(loaded.frames, sample.frames)
        np.testing.assert_array_equal(loaded.depths, sample.depths)
        np.testing.assert_array_equal(loaded.labels, sample.labels)
        for a, b in zip(loaded.poses, sample.poses):
            np.testing.assert_array_equal(a.matrix(), b.matrix())
        assert loaded.intrinsics == sample.intrinsics
        assert (loaded.seq_id, loaded.class_count, loaded.seed) == ("seq_a", 5, sample.seed)

    def test_dataset_layout(self, tiny_dataset):
        train = SequenceDataset(os.path.join(tiny_dataset, "train"))
        assert train.ids == ["train_00000", "train_00001"]
        assert len(SequenceDataset(os.path.join(tiny_dataset, "train"), limit=1)) == 1
        assert train.kinds() == {SequenceKind.DYNAMIC}
        assert train[0].length == 3

    def test_static_dataset_kind(self, static_dataset):
        assert SequenceDataset(os.path.join(static_dataset, "train")).kinds() == {SequenceKind.STATIC}

    def test_missing_directory(self, tmp_path):
        with pytest.raises(InvalidArgument):
            SequenceDataset(str(tmp_path / "nowhere"))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(InvalidArgument):
            synthdata.load_sequence(str(tmp_path))
