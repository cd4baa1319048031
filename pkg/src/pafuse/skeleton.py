"""Whole-body skeleton layout and part-frame conversions.

A 133-keypoint whole-body skeleton is split into four parts (body incl.
feet, face, left hand, right hand). Each part can be re-expressed in a
local coordinate frame anchored at its root joint: keypoint 0 for the
body, the nose for the face, and the wrists for the hands. Because every
non-body root is itself a body joint, the whole skeleton can be
reassembled from part-local coordinates plus per-part root offsets.

All coordinate operations are pure functions and accept arrays with
arbitrary leading dimensions before the (J, D) trailing axes, so the same
code paths serve single sequences and training batches.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError

PART_NAMES = ("body", "face", "left_hand", "right_hand")


@dataclass(frozen=True)
class PartSpec:
    """One body part: its global joint indices and its root joint."""

    name: str
    joint_indices: tuple[int, ...]
    root_index: int

    @property
    def size(self) -> int:
        return len(self.joint_indices)


@dataclass(frozen=True)
class SkeletonLayout:
    """Partition of the whole-body joints into parts with root joints.

    Invariants (checked on construction): part joint sets are disjoint and
    cover range(total_joints); part names are drawn from PART_NAMES with a
    "body" part present; the body root is a body joint; every non-body
    root is also a body joint, which is what makes hierarchical
    reconstruction possible.
    """

    total_joints: int
    parts: tuple[PartSpec, ...]

    def __post_init__(self):
        seen: set[int] = set()
        names = [p.name for p in self.parts]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate part names in layout: {names}")
        for p in self.parts:
            if p.name not in PART_NAMES:
                raise DataError(f"unknown part name {p.name!r}; expected one of {PART_NAMES}")
            if list(p.joint_indices) != sorted(p.joint_indices):
                raise DataError(f"part {p.name!r} joint indices are not sorted")
            overlap = seen.intersection(p.joint_indices)
            if overlap:
                raise DataError(f"part {p.name!r} reuses joints {sorted(overlap)}")
            seen.update(p.joint_indices)
        if seen != set(range(self.total_joints)):
            missing = sorted(set(range(self.total_joints)) - seen)
            extra = sorted(seen - set(range(self.total_joints)))
            raise DataError(
                f"parts must partition 0..{self.total_joints - 1}: "
                f"missing {missing[:8]}, out-of-range {extra[:8]}"
            )
        if "body" not in names:
            raise DataError("layout must contain a 'body' part")
        body = self.part("body")
        for p in self.parts:
            if p.root_index not in body.joint_indices:
                raise DataError(
                    f"root {p.root_index} of part {p.name!r} is not a body joint; "
                    "hierarchical reconstruction requires body-anchored roots"
                )

    def part(self, name: str) -> PartSpec:
        for p in self.parts:
            if p.name == name:
                return p
        raise KeyError(name)

    @property
    def part_names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.parts)

    @property
    def body(self) -> PartSpec:
        return self.part("body")

    def root_position_in_body(self, part: PartSpec) -> int:
        """Index of the part's root joint inside the body joint list."""
        return self.body.joint_indices.index(part.root_index)

    def to_json_dict(self) -> dict:
        return {
            "total_joints": self.total_joints,
            "parts": [
                {"name": p.name, "joints": list(p.joint_indices), "root": p.root_index}
                for p in self.parts
            ],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "SkeletonLayout":
        try:
            parts = tuple(
                PartSpec(p["name"], tuple(int(j) for j in p["joints"]), int(p["root"]))
                for p in obj["parts"]
            )
            return cls(total_joints=int(obj["total_joints"]), parts=parts)
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed layout object: {exc}") from exc

    def canonical_json(self) -> str:
        return json.dumps(self.to_json_dict(), separators=(",", ":"), sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def default_layout() -> SkeletonLayout:
    """Built-in 133-joint layout with contiguous part blocks.

    Body (17 main joints + 6 foot keypoints) occupies 0..22 with root 0,
    face 23..90 with the nose (1) as root, left hand 91..111 rooted at
    wrist 10, right hand 112..132 rooted at wrist 11. The global ordering
    is layout-driven; swap in a layout file for other conventions.
    """
    return SkeletonLayout(
        total_joints=133,
        parts=(
            PartSpec("body", tuple(range(0, 23)), 0),
            PartSpec("face", tuple(range(23, 91)), 1),
            PartSpec("left_hand", tuple(range(91, 112)), 10),
            PartSpec("right_hand", tuple(range(112, 133)), 11),
        ),
    )


def load_layout(path) -> SkeletonLayout:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read layout file {path}: {exc}") from exc
    return SkeletonLayout.from_json_dict(obj)


@dataclass
class PoseSequence:
    """N frames of J x D keypoints plus the original video frame numbers."""

    frame_ids: np.ndarray  # (N,) int64, strictly increasing
    coords: np.ndarray  # (N, J, D) float64, D in {2, 3}

    def __post_init__(self):
        self.frame_ids = np.asarray(self.frame_ids, dtype=np.int64)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 3 or self.coords.shape[2] not in (2, 3):
            raise DataError(f"coords must be (N, J, 2|3), got shape {self.coords.shape}")
        if self.frame_ids.shape != (self.coords.shape[0],):
            raise DataError(
                f"frame_ids length {self.frame_ids.shape} does not match "
                f"{self.coords.shape[0]} frames"
            )
        if self.frame_ids.size > 1 and not np.all(np.diff(self.frame_ids) > 0):
            raise DataError("frame_ids must be strictly increasing")
        if not np.all(np.isfinite(self.coords)):
            raise DataError("coords contain non-finite values")

    @property
    def n_frames(self) -> int:
        return self.coords.shape[0]

    @property
    def n_joints(self) -> int:
        return self.coords.shape[1]

    @property
    def dims(self) -> int:
        return self.coords.shape[2]


@dataclass
class RootOffsets:
    """Per-frame, per-part root positions relative to the body root.

    offsets has shape (..., P, 3) following the layout's part order; the
    body entry is identically zero.
    """

    part_names: tuple[str, ...]
    offsets: np.ndarray

    def for_part(self, name: str) -> np.ndarray:
        return self.offsets[..., self.part_names.index(name), :]


def _require_joints(coords: np.ndarray, layout: SkeletonLayout) -> None:
    if coords.shape[-2] != layout.total_joints:
        raise DataError(
            f"expected {layout.total_joints} joints, got {coords.shape[-2]}"
        )


def _require_3d(coords: np.ndarray) -> None:
    if coords.shape[-1] != 3:
        raise DataError(f"operation requires 3D coordinates, got D={coords.shape[-1]}")


# Array-level cores. coords may carry arbitrary leading dims before (J, D).

def split_coords(coords: np.ndarray, layout: SkeletonLayout) -> dict[str, np.ndarray]:
    _require_joints(coords, layout)
    return {p.name: coords[..., list(p.joint_indices), :] for p in layout.parts}


def root_offsets_coords(coords: np.ndarray, layout: SkeletonLayout) -> np.ndarray:
    _require_joints(coords, layout)
    _require_3d(coords)
    body_root = coords[..., layout.body.root_index, :]
    roots = coords[..., [p.root_index for p in layout.parts], :]
    return roots - body_root[..., None, :]


def shift_coords(
    coords: np.ndarray, layout: SkeletonLayout
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    _require_joints(coords, layout)
    _require_3d(coords)
    locals_ = {}
    for p in layout.parts:
        root = coords[..., p.root_index, :]
        locals_[p.name] = coords[..., list(p.joint_indices), :] - root[..., None, :]
    return locals_, root_offsets_coords(coords, layout)


def offsets_from_body_coords(body_local: np.ndarray, layout: SkeletonLayout) -> np.ndarray:
    """Root offsets read off a body part expressed in its local frame.

    Works because every non-body root is a body joint: its body-local
    coordinate *is* its offset from the body root.
    """
    body = layout.body
    if body_local.shape[-2] != body.size:
        raise DataError(
            f"body part has {body.size} joints, got {body_local.shape[-2]}"
        )
    _require_3d(body_local)
    positions = []
    for p in layout.parts:
        if p.root_index not in body.joint_indices:
            raise DataError(f"root of part {p.name!r} is not inside the body part")
        positions.append(layout.root_position_in_body(p))
    offsets = body_local[..., positions, :].copy()
    offsets[..., layout.part_names.index("body"), :] = 0.0
    return offsets


def reconstruct_coords(
    parts: dict[str, np.ndarray], offsets: np.ndarray, layout: SkeletonLayout
) -> np.ndarray:
    for p in layout.parts:
        if p.name not in parts:
            raise DataError(f"missing part {p.name!r} for reconstruction")
    first = parts[layout.parts[0].name]
    lead = first.shape[:-2]
    out = np.empty(lead + (layout.total_joints, 3), dtype=np.float64)
    for i, p in enumerate(layout.parts):
        local = parts[p.name]
        if local.shape[:-2] != lead:
            raise DataError(
                f"part {p.name!r} frame shape {local.shape[:-2]} does not match {lead}"
            )
        if local.shape[-2] != p.size:
            raise DataError(
                f"part {p.name!r} expects {p.size} joints, got {local.shape[-2]}"
            )
        out[..., list(p.joint_indices), :] = local + offsets[..., i, None, :]
    return out


# PoseSequence wrappers.

def split_parts(seq: PoseSequence, layout: SkeletonLayout) -> dict[str, PoseSequence]:
    """Split a whole-body sequence into per-part sequences (layout order)."""
    return {
        name: PoseSequence(seq.frame_ids, coords)
        for name, coords in split_coords(seq.coords, layout).items()
    }


def compute_root_offsets(seq3d: PoseSequence, layout: SkeletonLayout) -> RootOffsets:
    return RootOffsets(layout.part_names, root_offsets_coords(seq3d.coords, layout))


def shift_to_part_frames(
    seq3d: PoseSequence, layout: SkeletonLayout
) -> tuple[dict[str, PoseSequence], RootOffsets]:
    """Re-express each part relative to its root joint.

    Returns the part-local sequences and the root-offset tensor needed to
    reassemble the whole body. Note the body root's absolute position is
    not retained: reconstruction yields the body-root-centered sequence.
    """
    locals_, offsets = shift_coords(seq3d.coords, layout)
    seqs = {name: PoseSequence(seq3d.frame_ids, c) for name, c in locals_.items()}
    return seqs, RootOffsets(layout.part_names, offsets)


def derive_root_offsets_from_body(
    body_local: PoseSequence | np.ndarray, layout: SkeletonLayout
) -> RootOffsets:
    coords = body_local.coords if isinstance(body_local, PoseSequence) else np.asarray(body_local)
    return RootOffsets(layout.part_names, offsets_from_body_coords(coords, layout))


def reconstruct_whole_body(
    local_parts: dict[str, PoseSequence],
    offsets: RootOffsets,
    layout: SkeletonLayout,
) -> PoseSequence:
    """Reassemble a whole-body sequence from part-local frames and offsets."""
    for p in layout.parts:
        if p.name not in local_parts:
            raise DataError(f"missing part {p.name!r} for reconstruction")
    frame_ids = local_parts[layout.parts[0].name].frame_ids
    n = len(frame_ids)
    for name, seq in local_parts.items():
        if seq.n_frames != n:
            raise DataError(f"part {name!r} has {seq.n_frames} frames, expected {n}")
    if offsets.offsets.shape[0] != n:
        raise DataError(
            f"offsets cover {offsets.offsets.shape[0]} frames, expected {n}"
        )
    coords = reconstruct_coords(
        {name: seq.coords for name, seq in local_parts.items()},
        offsets.offsets,
        layout,
    )
    return PoseSequence(frame_ids, coords)
