import json

import numpy as np
import pytest

from pafuse.data import (
    DatasetFile,
    SequenceData,
    SynthConfig,
    dataset_windows,
    denormalize_2d,
    gap_histogram,
    load_dataset,
    make_windows,
    normalize_2d,
    pooled_gap_histogram,
    project_points,
    save_dataset,
    split_holdout,
    synth_generate,
)
from pafuse.errors import DataError, UsageError
from pafuse.skeleton import default_layout

LAYOUT = default_layout()


def tiny_dataset(frames=6, with_3d=True, frame_ids=None):
    rng = np.random.default_rng(0)
    ids = np.arange(frames) * 5 if frame_ids is None else np.asarray(frame_ids)
    kp3d = rng.normal(size=(frames, 133, 3)) * 50 + np.array([0, 0, 4000.0])
    kp2d = project_points(kp3d, 1100.0, (1000, 1000))
    return DatasetFile(
        LAYOUT, (1000, 1000),
        [SequenceData("seq0", ids, kp2d, kp3d if with_3d else None)],
    )


class TestLoadSave:
    def test_valid_roundtrip(self, tmp_path):
        path = tmp_path / "data.json"
        save_dataset(tiny_dataset(frames=2), path)
        ds = load_dataset(path)
        assert len(ds.sequences) == 1
        assert dataset_windows(ds, 2, 1)

    def test_byte_stable_roundtrip(self, tmp_path):
        path = tmp_path / "data.json"
        save_dataset(tiny_dataset(), path)
        first = path.read_bytes()
        save_dataset(load_dataset(path), path)
        assert path.read_bytes() == first

    def test_joint_count_mismatch_names_sequence(self, tmp_path):
        ds = tiny_dataset(frames=2)
        doc = ds.to_json_dict()
        for frame in doc["sequences"][0]["frames"]:
            frame["kp2d"] = frame["kp2d"][:17]
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(DataError, match="seq0"):
            load_dataset(path)

    def test_non_monotone_frame_ids(self, tmp_path):
        ds = tiny_dataset(frames=2)
        doc = ds.to_json_dict()
        for frame in doc["sequences"][0]["frames"]:
            frame["frame_id"] = 5
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(DataError, match="increasing"):
            load_dataset(path)

    def test_non_finite_values(self, tmp_path):
        ds = tiny_dataset(frames=2)
        doc = ds.to_json_dict()
        doc["sequences"][0]["frames"][1]["kp3d"][4][2] = float("nan")
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc).replace("NaN", "NaN"))
        with pytest.raises(DataError, match="seq0.*frame 1|non-finite"):
            load_dataset(path)

    def test_parse_failure(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(DataError, match="parse"):
            load_dataset(path)

    def test_2d_only_dataset(self, tmp_path):
        path = tmp_path / "d2.json"
        save_dataset(tiny_dataset(with_3d=False), path)
        ds = load_dataset(path)
        assert ds.sequences[0].kp3d is None


class TestWindows:
    def test_counts(self):
        seq = tiny_dataset(frames=10).sequences[0]
        assert len(make_windows(seq, 5, 5)) == 2
        assert len(make_windows(seq, 5, 1)) == 6

    def test_short_sequence_empty(self):
        seq = tiny_dataset(frames=4).sequences[0]
        assert make_windows(seq, 5, 1) == []

    def test_windows_preserve_frames(self):
        seq = tiny_dataset(frames=10).sequences[0]
        for w in make_windows(seq, 4, 3):
            np.testing.assert_array_equal(w.frame_ids, seq.frame_ids[w.start : w.start + 4])
            np.testing.assert_array_equal(w.kp2d, seq.kp2d[w.start : w.start + 4])

    def test_gaps_not_excluded(self):
        seq = tiny_dataset(frames=6, frame_ids=[0, 5, 10, 110, 115, 120]).sequences[0]
        windows = make_windows(seq, 6, 1)
        assert len(windows) == 1
        assert int(np.max(np.diff(windows[0].frame_ids))) == 100

    def test_invalid_args(self):
        seq = tiny_dataset().sequences[0]
        with pytest.raises(UsageError):
            make_windows(seq, 0, 1)


class TestGapHistogram:
    def test_even_gaps(self):
        assert gap_histogram(np.array([1, 6, 11])) == {5: 2}

    def test_single_frame(self):
        assert gap_histogram(np.array([3])) == {}

    def test_long_tail(self):
        assert gap_histogram(np.array([1, 6, 11, 111])) == {5: 2, 100: 1}

    def test_counts_sum(self):
        ds = synth_generate(SynthConfig(sequences=3, frames=40, seed=5, gap_profile="uneven"))
        for seq in ds.sequences:
            assert sum(gap_histogram(seq).values()) == seq.n_frames - 1

    def test_pooled(self):
        ds = tiny_dataset(frames=3)
        assert pooled_gap_histogram(ds) == {5: 2}


class TestNormalize2d:
    def test_center_maps_to_origin(self):
        out = normalize_2d(np.array([[500.0, 400.0]]), (1000, 800))
        np.testing.assert_array_equal(out, [[0.0, 0.0]])

    def test_corner_of_square(self):
        out = normalize_2d(np.array([[0.0, 0.0]]), (1000, 1000))
        np.testing.assert_array_equal(out, [[-1.0, -1.0]])

    def test_larger_dimension_scales(self):
        out = normalize_2d(np.array([[0.0, 0.0]]), (2000, 1000))
        np.testing.assert_array_equal(out, [[-1.0, -0.5]])

    def test_roundtrip(self):
        rng = np.random.default_rng(1)
        px = rng.uniform(0, 1000, size=(7, 133, 2))
        back = denormalize_2d(normalize_2d(px, (1000, 800)), (1000, 800))
        np.testing.assert_allclose(back, px, atol=1e-9)


class TestSynthGenerate:
    def test_zero_amplitude_static(self):
        ds = synth_generate(SynthConfig(sequences=1, frames=5, amplitude=0.0, seed=2))
        kp3d = ds.sequences[0].kp3d
        for f in range(1, 5):
            np.testing.assert_array_equal(kp3d[f], kp3d[0])

    def test_same_seed_identical_bytes(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        save_dataset(synth_generate(SynthConfig(sequences=2, frames=20, seed=7)), a)
        save_dataset(synth_generate(SynthConfig(sequences=2, frames=20, seed=7)), b)
        assert a.read_bytes() == b.read_bytes()

    def test_optical_axis_projects_to_center(self):
        out = project_points(np.array([[0.0, 0.0, 3000.0]]), 1100.0, (1000, 800))
        np.testing.assert_array_equal(out, [[500.0, 400.0]])

    def test_projection_consistency(self):
        config = SynthConfig(sequences=2, frames=15, seed=3)
        ds = synth_generate(config)
        for seq in ds.sequences:
            again = project_points(seq.kp3d, config.focal, config.image_size)
            np.testing.assert_allclose(again, seq.kp2d, atol=1e-6)

    def test_generated_passes_validation(self, tmp_path):
        path = tmp_path / "synth.json"
        save_dataset(synth_generate(SynthConfig(sequences=2, frames=10, seed=4)), path)
        ds = load_dataset(path)
        assert len(ds.sequences) == 2

    def test_face_rides_rigidly_on_nose(self):
        ds = synth_generate(SynthConfig(sequences=1, frames=8, seed=6))
        kp3d = ds.sequences[0].kp3d
        face_idx = list(LAYOUT.part("face").joint_indices)
        local = kp3d[:, face_idx] - kp3d[:, 1:2]
        for f in range(1, 8):
            np.testing.assert_allclose(local[f], local[0], atol=1e-9)

    def test_invalid_config(self):
        with pytest.raises(UsageError):
            SynthConfig(frames=0)
        with pytest.raises(UsageError):
            SynthConfig(focal=-1.0)
        with pytest.raises(UsageError):
            SynthConfig(sequences=0)

    def test_even_gap_profile(self):
        ds = synth_generate(SynthConfig(sequences=2, frames=10, seed=8))
        assert pooled_gap_histogram(ds) == {5: 18}

    def test_uneven_gap_profile_has_long_tail(self):
        ds = synth_generate(SynthConfig(sequences=4, frames=120, seed=9, gap_profile="uneven"))
        hist = pooled_gap_histogram(ds)
        assert max(hist) >= 40


class TestSplitHoldout:
    def test_split(self):
        ds = synth_generate(SynthConfig(sequences=4, frames=10, seed=10))
        train, test = split_holdout(ds, 1)
        assert len(train.sequences) == 3 and len(test.sequences) == 1
        assert test.sequences[0].id == ds.sequences[-1].id

    def test_bad_holdout(self):
        ds = synth_generate(SynthConfig(sequences=2, frames=10, seed=11))
        with pytest.raises(UsageError):
            split_holdout(ds, 2)
