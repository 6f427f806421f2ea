import json
import time

import numpy as np
import pytest

from kpopt.datagen import (ChecksumError, DatasetFormatError, GenerationError, RandomizationConfig,
                           VersionMismatchError, dataset_lines, generate_dataset, generate_sequence, load_dataset,
                           save_dataset, smooth_trajectory)
from kpopt.detector import occlusion_test
from kpopt.geometry import CameraModel, CovarianceError, RigidTransform, look_at, project
from kpopt.kinematics import keypoint_base_position, load_robot
from kpopt.scenario import data_path

CAM = CameraModel(500.0, 500.0, 319.5, 239.5, 640, 480)


@pytest.fixture(scope="module")
def frozen_planar():
    """Planar arm with every joint pinned at zero."""
    with open(data_path("planar_2link.json")) as fh:
        doc = json.load(fh)
    for link in doc["links"][1:3]:
        link["joint"]["limits"] = [0, 0]
    return load_robot(doc)


def test_degenerate_randomization(frozen_planar):
    chain, kps = frozen_planar
    rc = RandomizationConfig(look_at([1.0, 0.0, 3.0], [1.0, 0.0, 0.0], up=[0, 1, 0]))
    ds = generate_dataset(chain, CAM, kps, rc, 4, 4, 0)
    first = ds.samples[0]
    for s in ds.samples[1:]:
        np.testing.assert_array_equal(s.q, first.q)
        assert s.T_cb == first.T_cb
        np.testing.assert_array_equal(s.pixels, first.pixels)
    assert len({s.nuisance for s in ds.samples}) > 1


def test_fixed_seed_is_bit_identical(tool_scenario):
    sc = tool_scenario
    a = generate_dataset(sc.chain, sc.camera, sc.candidates, sc.randomization, 5, 5, 3)
    b = generate_dataset(sc.chain, sc.camera, sc.candidates, sc.randomization, 5, 5, 3)
    assert dataset_lines(a) == dataset_lines(b)
    c = generate_dataset(sc.chain, sc.camera, sc.candidates, sc.randomization, 5, 5, 4)
    assert dataset_lines(a)[1:] != dataset_lines(c)[1:]


def test_samples_independent_of_dataset_size(tool_scenario):
    sc = tool_scenario
    small = generate_dataset(sc.chain, sc.camera, sc.candidates, sc.randomization, 2, 1, 3)
    big = generate_dataset(sc.chain, sc.camera, sc.candidates, sc.randomization, 6, 6, 3)
    for s in small.samples:
        assert big.sample(s.sample_id) == s


def test_split(small_tool_dataset):
    ds = small_tool_dataset
    assert ds.train_ids == tuple(range(60)) and ds.test_ids == tuple(range(60, 100))


def test_ground_truth_consistency(small_tool_dataset):
    ds = small_tool_dataset
    for s in ds.samples[:20]:
        for n, kp in enumerate(ds.candidates):
            p_cam = s.T_cb.apply(keypoint_base_position(ds.chain, s.q, kp))
            np.testing.assert_array_equal(s.points_cam[n], p_cam)
            if p_cam[2] > 1e-9:
                np.testing.assert_array_equal(s.pixels[n], project(ds.camera, p_cam))
            else:
                assert np.isnan(s.pixels[n]).all() and not s.visible[n]


def test_visibility_matches_occlusion_test(small_tool_dataset):
    ds = small_tool_dataset
    for s in ds.samples[:10]:
        for n, kp in enumerate(ds.candidates):
            in_front = np.isfinite(s.pixels[n, 0])
            vis = in_front and occlusion_test(ds.chain, s.q, s.T_cb, keypoint_base_position(ds.chain, s.q, kp))
            assert s.visible[n] == vis


def test_self_occlusion_happens(small_tool_dataset):
    rates = small_tool_dataset.visibility_rates()
    assert any(0.0 < r < 1.0 for r in rates.values())


def test_nuisance_and_draws(small_tool_dataset):
    rc = small_tool_dataset.randomization
    for s in small_tool_dataset.samples:
        assert 0.0 <= s.nuisance <= 1.0
        assert rc.lights_range[0] <= s.draws["lights"] <= rc.lights_range[1]
        assert rc.distractor_range[0] <= s.draws["distractors"] <= rc.distractor_range[1]
        # nuisance is the mean of the three normalized draws
        parts = [(s.draws["lights"] - 1) / 2, s.draws["distractors"] / 10, s.draws["image_noise"] / 0.05]
        assert s.nuisance == pytest.approx(np.mean(parts))


def test_joints_within_limits(small_tool_dataset):
    ch = small_tool_dataset.chain
    q = small_tool_dataset.arrays().q
    assert np.all(q >= ch.lower_limits) and np.all(q <= ch.upper_limits)


def test_keypoint_never_in_front(planar):
    chain, kps = planar
    away = look_at([0.0, 0.0, 10.0], [0.0, 0.0, 20.0], up=[0, 1, 0])
    with pytest.raises(GenerationError, match=r"\[0, 1\]"):
        generate_dataset(chain, CAM, kps, RandomizationConfig(away), 1, 1, 0)


def test_requires_both_splits(planar):
    with pytest.raises(ValueError):
        generate_dataset(planar[0], CAM, planar[1], RandomizationConfig(RigidTransform()), 0, 1, 0)


def test_full_size_generation_time(tool_scenario):
    sc = tool_scenario
    t0 = time.perf_counter()
    generate_dataset(sc.chain, sc.camera, sc.candidates, sc.randomization, 2000, 500, 0)
    assert time.perf_counter() - t0 < 60


class TestRandomizationConfig:
    def test_rejects_bad_covariance(self):
        with pytest.raises(CovarianceError):
            RandomizationConfig(RigidTransform(), -np.eye(7))

    @pytest.mark.parametrize("kw", [{"lights_range": (0, 3)}, {"lights_range": (3, 2)},
                                    {"distractor_range": (5, 1)}, {"image_noise_range": (-1, 0)}])
    def test_rejects_bad_ranges(self, kw):
        with pytest.raises(ValueError):
            RandomizationConfig(RigidTransform(), **kw)

    def test_dict_round_trip(self):
        rc = RandomizationConfig(RigidTransform([0.5, 0.5, 0.5, 0.5], [0.1, 0.2, 0.3]), np.eye(7) * 1e-4, seed=9)
        back = RandomizationConfig.from_dict(rc.to_dict())
        assert back.camera_pose == rc.camera_pose and np.array_equal(back.pose_covariance, rc.pose_covariance)

    def test_sigma_shorthand(self):
        rc = RandomizationConfig.from_dict({"camera_pose": RigidTransform().to_dict(), "quaternion_sigma": 0.01,
                                            "translation_sigma": 0.003})
        np.testing.assert_allclose(np.diag(rc.pose_covariance), [1e-4] * 4 + [9e-6] * 3)


class TestPersistence:
    def test_round_trip(self, tool_scenario, tmp_path):
        sc = tool_scenario
        ds = generate_dataset(sc.chain, sc.camera, sc.candidates, sc.randomization, 6, 4, 5)
        path = tmp_path / "d.jsonl"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert back.samples == ds.samples
        assert back.train_ids == ds.train_ids and back.test_ids == ds.test_ids
        assert back.camera == ds.camera and back.candidates == ds.candidates
        np.testing.assert_array_equal(back.arrays().points_base, ds.arrays().points_base)
        assert dataset_lines(back) == dataset_lines(ds)

    def _saved(self, tool_scenario, tmp_path):
        sc = tool_scenario
        ds = generate_dataset(sc.chain, sc.camera, sc.candidates, sc.randomization, 3, 2, 5)
        path = tmp_path / "d.jsonl"
        save_dataset(ds, path)
        return path, path.read_text().splitlines(keepends=True)

    def test_truncated(self, tool_scenario, tmp_path):
        path, lines = self._saved(tool_scenario, tmp_path)
        path.write_text("".join(lines[:-1]))
        with pytest.raises(ChecksumError):
            load_dataset(path)

    def test_edited_record(self, tool_scenario, tmp_path):
        path, lines = self._saved(tool_scenario, tmp_path)
        lines[2] = lines[2].replace('"nuisance":', '"nuisance":0.0,"x":')
        path.write_text("".join(lines))
        with pytest.raises(ChecksumError):
            load_dataset(path)

    def test_version_bump(self, tool_scenario, tmp_path):
        path, lines = self._saved(tool_scenario, tmp_path)
        header = json.loads(lines[0])
        header["schema_version"] += 1
        path.write_text(json.dumps(header) + "\n" + "".join(lines[1:]))
        with pytest.raises(VersionMismatchError):
            load_dataset(path)

    def test_garbage_header(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text("not json\n")
        with pytest.raises(DatasetFormatError):
            load_dataset(path)


class TestSequence:
    def test_trajectory_within_limits_and_smooth(self, tool_scenario):
        ch = tool_scenario.chain
        q = smooth_trajectory(ch, 200, np.random.default_rng(0))
        assert np.all(q >= ch.lower_limits) and np.all(q <= ch.upper_limits)
        # per-frame steps are bounded by the fastest sinusoid
        half = 0.5 * (ch.upper_limits - ch.lower_limits)
        assert np.all(np.abs(np.diff(q, axis=0)) <= 0.35 * half * 2 * np.pi / 60 + 1e-12)

    def test_sequence_fixed_camera(self, tool_scenario):
        sc = tool_scenario
        seq = generate_sequence(sc.chain, sc.camera, sc.candidates, sc.randomization.camera_pose, 12,
                                np.random.default_rng(1))
        assert seq.train_ids == () and seq.test_ids == tuple(range(12))
        assert all(s.T_cb == sc.randomization.camera_pose for s in seq.samples)
