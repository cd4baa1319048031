"""Dataset ingestion, windowing, gap statistics, and synthetic motion.

Datasets are UTF-8 JSON: an inline skeleton layout, the image size, and
sequences of annotated frames carrying the original video frame number,
2D keypoints in pixels, and (optionally) 3D keypoints in millimeters in
camera space. Annotated frames may be unevenly sampled; windows are taken
over consecutive *annotations*, keeping whatever frame-id gaps the data
has.

The synthetic generator stands in for real capture data at desk scale:
body joints follow sums of low-frequency sinusoids around a humanoid
template, the face rides rigidly on the nose, each hand rides on its
wrist with a small articulation term, and 2D keypoints are exact pinhole
projections of the 3D ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, UsageError
from .skeleton import SkeletonLayout, default_layout

_MASK64 = (1 << 64) - 1


@dataclass
class SequenceData:
    id: str
    frame_ids: np.ndarray  # (N,) int64
    kp2d: np.ndarray  # (N, J, 2) pixels
    kp3d: np.ndarray | None  # (N, J, 3) millimeters, camera space

    @property
    def n_frames(self) -> int:
        return len(self.frame_ids)


@dataclass
class DatasetFile:
    layout: SkeletonLayout
    image_size: tuple[int, int]
    sequences: list[SequenceData]

    def to_json_dict(self) -> dict:
        seqs = []
        for s in self.sequences:
            frames = []
            for i in range(s.n_frames):
                frame = {"frame_id": int(s.frame_ids[i]), "kp2d": s.kp2d[i].tolist()}
                if s.kp3d is not None:
                    frame["kp3d"] = s.kp3d[i].tolist()
                frames.append(frame)
            seqs.append({"id": s.id, "frames": frames})
        return {
            "layout": self.layout.to_json_dict(),
            "image_size": [int(self.image_size[0]), int(self.image_size[1])],
            "sequences": seqs,
        }


def save_dataset(dataset: DatasetFile, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dataset.to_json_dict(), fh, separators=(",", ":"))
        fh.write("\n")


def _validate_sequence(sid: str, frame_ids, kp2d, kp3d, total_joints: int) -> None:
    if kp2d.shape[1:] != (total_joints, 2):
        raise DataError(
            f"sequence {sid!r}: expected {total_joints} joints x 2, got {kp2d.shape[1:]}"
        )
    if kp3d is not None and kp3d.shape[1:] != (total_joints, 3):
        raise DataError(
            f"sequence {sid!r}: expected {total_joints} joints x 3, got {kp3d.shape[1:]}"
        )
    diffs = np.diff(frame_ids)
    if np.any(diffs <= 0):
        pos = int(np.argmax(diffs <= 0)) + 1
        raise DataError(
            f"sequence {sid!r}: frame_ids not strictly increasing at frame {pos} "
            f"(frame_id {int(frame_ids[pos])})"
        )
    for name, arr in (("kp2d", kp2d), ("kp3d", kp3d)):
        if arr is None:
            continue
        finite = np.isfinite(arr).all(axis=(1, 2))
        if not finite.all():
            pos = int(np.argmin(finite))
            raise DataError(f"sequence {sid!r}: non-finite {name} at frame {pos}")


def load_dataset(path) -> DatasetFile:
    """Parse and fully validate a dataset file.

    Violations are reported with the offending sequence id and frame
    position.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot parse dataset {path}: {exc}") from exc
    try:
        layout = SkeletonLayout.from_json_dict(doc["layout"])
        image_size = (int(doc["image_size"][0]), int(doc["image_size"][1]))
        raw_sequences = doc["sequences"]
    except (KeyError, TypeError, IndexError) as exc:
        raise DataError(f"malformed dataset {path}: {exc}") from exc
    if image_size[0] < 1 or image_size[1] < 1:
        raise DataError(f"invalid image_size {image_size}")

    sequences = []
    for seq in raw_sequences:
        sid = str(seq.get("id", "?"))
        try:
            frames = seq["frames"]
            frame_ids = np.array([f["frame_id"] for f in frames], dtype=np.int64)
            kp2d = np.array([f["kp2d"] for f in frames], dtype=np.float64)
            has_3d = [("kp3d" in f) for f in frames]
            if any(has_3d) and not all(has_3d):
                raise DataError(
                    f"sequence {sid!r}: kp3d present for some frames but not all"
                )
            kp3d = (
                np.array([f["kp3d"] for f in frames], dtype=np.float64)
                if frames and all(has_3d)
                else None
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"sequence {sid!r}: malformed frames: {exc}") from exc
        if len(frames) == 0:
            raise DataError(f"sequence {sid!r}: empty sequence")
        _validate_sequence(sid, frame_ids, kp2d, kp3d, layout.total_joints)
        sequences.append(SequenceData(sid, frame_ids, kp2d, kp3d))
    return DatasetFile(layout, image_size, sequences)


@dataclass
class Window:
    """N consecutive annotations of one sequence (frame-id gaps retained)."""

    sequence_id: str
    start: int  # annotation offset within the sequence
    frame_ids: np.ndarray
    kp2d: np.ndarray  # (N, J, 2)
    kp3d: np.ndarray | None  # (N, J, 3)


def make_windows(seq: SequenceData, frames: int, stride: int) -> list[Window]:
    """Windows of N consecutive annotated frames at the given stride.

    Frames with large frame-id gaps are not excluded: uneven sampling is a
    property of the data. Sequences shorter than N yield no windows.
    """
    if frames < 1 or stride < 1:
        raise UsageError(f"frames and stride must be >= 1, got {frames}, {stride}")
    windows = []
    for start in range(0, seq.n_frames - frames + 1, stride):
        stop = start + frames
        windows.append(
            Window(
                sequence_id=seq.id,
                start=start,
                frame_ids=seq.frame_ids[start:stop],
                kp2d=seq.kp2d[start:stop],
                kp3d=None if seq.kp3d is None else seq.kp3d[start:stop],
            )
        )
    return windows


def dataset_windows(dataset: DatasetFile, frames: int, stride: int) -> list[Window]:
    out: list[Window] = []
    for seq in dataset.sequences:
        out.extend(make_windows(seq, frames, stride))
    return out


def gap_histogram(seq) -> dict[int, int]:
    """Histogram of frame-id differences between consecutive annotations."""
    frame_ids = seq.frame_ids if hasattr(seq, "frame_ids") else np.asarray(seq)
    gaps, counts = np.unique(np.diff(frame_ids), return_counts=True)
    return {int(g): int(c) for g, c in zip(gaps, counts)}


def pooled_gap_histogram(dataset: DatasetFile) -> dict[int, int]:
    pooled: dict[int, int] = {}
    for seq in dataset.sequences:
        for gap, count in gap_histogram(seq).items():
            pooled[gap] = pooled.get(gap, 0) + count
    return dict(sorted(pooled.items()))


def normalize_2d(kp2d: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    """Map pixels to [-1, 1]^2: center at the image center, divide by half
    the larger dimension."""
    w, h = image_size
    if w < 1 or h < 1:
        raise UsageError(f"invalid image size {image_size}")
    center = np.array([w / 2.0, h / 2.0])
    return (np.asarray(kp2d, dtype=np.float64) - center) / (max(w, h) / 2.0)


def denormalize_2d(norm: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    w, h = image_size
    if w < 1 or h < 1:
        raise UsageError(f"invalid image size {image_size}")
    center = np.array([w / 2.0, h / 2.0])
    return np.asarray(norm, dtype=np.float64) * (max(w, h) / 2.0) + center


def project_points(kp3d: np.ndarray, focal: float, image_size: tuple[int, int]) -> np.ndarray:
    """Pinhole projection, principal point at the image center."""
    kp3d = np.asarray(kp3d, dtype=np.float64)
    z = kp3d[..., 2]
    if np.any(z <= 0):
        raise DataError("projection requires all points in front of the camera (z > 0)")
    u = focal * kp3d[..., 0] / z + image_size[0] / 2.0
    v = focal * kp3d[..., 1] / z + image_size[1] / 2.0
    return np.stack([u, v], axis=-1)


@dataclass(frozen=True)
class SynthConfig:
    sequences: int = 8
    frames: int = 200
    amplitude: float = 80.0  # mm of motion per harmonic stack
    focal: float = 1100.0  # pixels
    image_size: tuple[int, int] = (1000, 1000)
    seed: int = 0
    gap_profile: str = "even"  # "even" (stride 5) or "uneven" (long-tailed)

    def __post_init__(self):
        if self.sequences < 1 or self.frames < 1:
            raise UsageError(
                f"sequences and frames must be >= 1, got {self.sequences}, {self.frames}"
            )
        if self.focal <= 0:
            raise UsageError(f"focal length must be > 0, got {self.focal}")
        if self.amplitude < 0:
            raise UsageError(f"amplitude must be >= 0, got {self.amplitude}")
        if self.image_size[0] < 1 or self.image_size[1] < 1:
            raise UsageError(f"invalid image size {self.image_size}")
        if self.gap_profile not in ("even", "uneven"):
            raise UsageError(f"gap_profile must be 'even' or 'uneven', got {self.gap_profile}")


# Humanoid body template, millimeters, y pointing down (image convention),
# pelvis at the origin. Index semantics match the default layout roots:
# 0 pelvis, 1 nose, 10/11 wrists.
_BODY_TEMPLATE = np.array(
    [
        [0, 0, 0],  # 0 pelvis
        [0, -620, 60],  # 1 nose
        [-30, -655, 75],  # 2 left eye
        [30, -655, 75],  # 3 right eye
        [-70, -640, 20],  # 4 left ear
        [70, -640, 20],  # 5 right ear
        [-180, -510, 0],  # 6 left shoulder
        [180, -510, 0],  # 7 right shoulder
        [-235, -270, 25],  # 8 left elbow
        [235, -270, 25],  # 9 right elbow
        [-260, -55, 45],  # 10 left wrist
        [260, -55, 45],  # 11 right wrist
        [-95, 5, 0],  # 12 left hip
        [95, 5, 0],  # 13 right hip
        [-105, 405, 35],  # 14 left knee
        [105, 405, 35],  # 15 right knee
        [-110, 790, 15],  # 16 left ankle
        [110, 790, 15],  # 17 right ankle
        [-115, 845, -60],  # 18 left heel
        [115, 845, -60],  # 19 right heel
        [-118, 855, 135],  # 20 left big toe
        [118, 855, 135],  # 21 right big toe
        [0, -430, 15],  # 22 chest
    ],
    dtype=np.float64,
)


def _face_template(rng: np.random.Generator) -> np.ndarray:
    # 68 points: an oval outline plus interior features, mildly jittered
    # so each dataset gets its own rigid face cloud.
    pts = []
    for i in range(28):  # jaw/outline ring
        a = 2 * np.pi * i / 28
        pts.append([75 * np.sin(a), -85 * np.cos(a), -18])
    for i in range(20):  # mid ring (brows/cheeks)
        a = 2 * np.pi * i / 20
        pts.append([48 * np.sin(a), -52 * np.cos(a), 2])
    for i in range(20):  # inner features (eyes/nose/mouth)
        a = 2 * np.pi * i / 20
        pts.append([24 * np.sin(a), -20 * np.cos(a) + 12, 14])
    cloud = np.array(pts, dtype=np.float64)
    return cloud + rng.normal(scale=2.0, size=cloud.shape)


def _hand_template(rng: np.random.Generator, side: float) -> np.ndarray:
    # 21 points: a root near the wrist plus five 4-joint fingers fanning
    # forward; `side` mirrors left/right.
    pts = [[0.0, 0.0, 0.0]]
    for finger in range(5):
        spread = (finger - 2) * 0.28
        direction = np.array([side * np.sin(spread) * 0.55, 0.35, np.cos(spread)])
        direction = direction / np.linalg.norm(direction)
        for knuckle, dist in enumerate((32.0, 55.0, 74.0, 88.0)):
            shrink = 1.0 - 0.18 * (finger in (0, 4)) - 0.25 * (finger == 0) * (knuckle > 1)
            pts.append(list(direction * dist * shrink))
    cloud = np.array(pts, dtype=np.float64)
    return cloud + rng.normal(scale=1.5, size=cloud.shape)


def _frame_ids(rng: np.random.Generator, frames: int, profile: str) -> np.ndarray:
    if profile == "even":
        return np.arange(frames, dtype=np.int64) * 5
    gaps = rng.choice([2, 3, 4, 5, 6, 7, 8], size=frames - 1, p=[0.04, 0.08, 0.16, 0.44, 0.16, 0.08, 0.04])
    big = rng.random(frames - 1) < 0.06
    gaps = np.where(big, rng.integers(40, 161, size=frames - 1), gaps)
    return np.concatenate([[0], np.cumsum(gaps)]).astype(np.int64)


def synth_generate(config: SynthConfig) -> DatasetFile:
    """Deterministic synthetic whole-body dataset with pinhole 2D."""
    layout = default_layout()
    rng = np.random.Generator(np.random.PCG64(config.seed & _MASK64))
    face_cloud = _face_template(rng)
    hand_clouds = {"left_hand": _hand_template(rng, -1.0), "right_hand": _hand_template(rng, 1.0)}

    sequences = []
    tau = np.arange(config.frames, dtype=np.float64) / max(config.frames, 1)
    harmonics = np.array([0.7, 1.3, 2.9])
    weights = np.array([0.55, 0.3, 0.15])
    for s in range(config.sequences):
        frame_ids = _frame_ids(rng, config.frames, config.gap_profile)
        center = np.array(
            [rng.uniform(-150, 150), rng.uniform(-80, 80), 4300.0 + rng.uniform(-250, 250)]
        )
        # Per-joint sinusoid stacks: direction, phase, and mobility vary
        # per joint; the pelvis moves least, extremities most.
        n_body = _BODY_TEMPLATE.shape[0]
        mobility = rng.uniform(0.3, 1.3, size=(n_body, 1, 1))
        mobility[0] *= 0.35
        dirs = rng.normal(size=(n_body, len(harmonics), 3))
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        phases = rng.uniform(0, 2 * np.pi, size=(n_body, len(harmonics), 1))
        waves = np.sin(2 * np.pi * harmonics[None, :, None] * tau[None, None, :] + phases)
        # (n_body, harmonics, frames) x weights -> (frames, n_body, 3)
        wobble = np.einsum("jk,jkf,jkd->fjd", weights[None, :].repeat(n_body, 0), waves, dirs)
        body = center + _BODY_TEMPLATE[None, :, :] + config.amplitude * mobility.transpose(2, 0, 1) * wobble

        drift_dir = rng.normal(size=3)
        drift_dir /= np.linalg.norm(drift_dir)
        drift_phase = rng.uniform(0, 2 * np.pi)
        body = body + (config.amplitude * 0.8) * np.outer(
            np.sin(2 * np.pi * 0.4 * tau + drift_phase), drift_dir
        )[:, None, :]

        coords = np.empty((config.frames, layout.total_joints, 3))
        coords[:, list(layout.part("body").joint_indices)] = body
        nose = body[:, 1]
        coords[:, list(layout.part("face").joint_indices)] = nose[:, None, :] + face_cloud
        for part_name, wrist_idx in (("left_hand", 10), ("right_hand", 11)):
            wrist = body[:, wrist_idx]
            static = rng.normal(scale=3.0, size=hand_clouds[part_name].shape)
            art_phase = rng.uniform(0, 2 * np.pi, size=(21, 3))
            articulation = (config.amplitude * 0.06) * np.sin(
                2 * np.pi * 1.7 * tau[:, None, None] + art_phase
            )
            coords[:, list(layout.part(part_name).joint_indices)] = (
                wrist[:, None, :] + hand_clouds[part_name] + static + articulation
            )

        kp2d = project_points(coords, config.focal, config.image_size)
        sequences.append(SequenceData(f"synth{s:02d}", frame_ids, kp2d, coords))

    return DatasetFile(layout, config.image_size, sequences)


def split_holdout(dataset: DatasetFile, holdout: int = 1) -> tuple[DatasetFile, DatasetFile]:
    """Split off the last `holdout` sequences as a test set."""
    if not 0 < holdout < len(dataset.sequences):
        raise UsageError(
            f"holdout must be in [1, {len(dataset.sequences) - 1}], got {holdout}"
        )
    return (
        DatasetFile(dataset.layout, dataset.image_size, dataset.sequences[:-holdout]),
        DatasetFile(dataset.layout, dataset.image_size, dataset.sequences[-holdout:]),
    )
