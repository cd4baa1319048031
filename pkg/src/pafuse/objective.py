"""Losses, MPJPE metric family, and hypothesis selection/aggregation.

Training losses compare part tensors either in their local frames (part
loss) or after adding root offsets back (whole-body loss). Evaluation
follows Protocol #1: the whole-body metric translates the predicted root
onto the ground-truth root per frame; part metrics align each part to its
own root joint; PB is the unweighted mean of the Body, Face, and Hands
part metrics. P-Best takes per-metric minima over hypotheses, P-Agg
scores the averaged hypothesis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .diffusion import HypothesisSet
from .errors import DataError
from .skeleton import PoseSequence, RootOffsets, SkeletonLayout

LOSS_KINDS = ("mpjpe", "mse")
PART_METRICS = ("body", "face", "hands")


def _coords(x) -> np.ndarray:
    arr = x.coords if hasattr(x, "coords") else x
    return np.asarray(arr, dtype=np.float64)


def mpjpe(pred, gt) -> float:
    """Mean over frames and joints of the per-joint Euclidean error."""
    p, g = _coords(pred), _coords(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return float(np.mean(np.linalg.norm(p - g, axis=-1)))


def mse(pred, gt) -> float:
    p, g = _coords(pred), _coords(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return float(np.mean((p - g) ** 2))


def _loss_fn(kind: str):
    kind = kind.lower()
    if kind not in LOSS_KINDS:
        raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {kind!r}")
    return mpjpe if kind == "mpjpe" else mse


def _concat_parts(parts: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([_coords(v) for v in parts.values()], axis=-2)


def part_loss(pred_parts: dict, gt_parts: dict, kind: str = "mpjpe") -> float:
    """Loss over parts in their local frames, concatenated on the joint axis.

    Equivalent to a joint-count-weighted mean of per-part losses; parts
    are concatenated in the mapping's iteration order (layout order when
    the maps come from split/shift).
    """
    if list(pred_parts) != list(gt_parts):
        raise ValueError(f"part mismatch: {list(pred_parts)} vs {list(gt_parts)}")
    return _loss_fn(kind)(_concat_parts(pred_parts), _concat_parts(gt_parts))


def _offsets_for(offsets, name: str, index: int) -> np.ndarray:
    if isinstance(offsets, RootOffsets):
        return offsets.for_part(name)
    return np.asarray(offsets, dtype=np.float64)[..., index, :]


def wb_loss(pred_parts: dict, pred_offsets, gt_parts: dict, gt_offsets, kind: str = "mpjpe") -> float:
    """Whole-body loss: each side's offsets restore its global coordinates."""
    if list(pred_parts) != list(gt_parts):
        raise ValueError(f"part mismatch: {list(pred_parts)} vs {list(gt_parts)}")
    pred_glob, gt_glob = [], []
    for i, name in enumerate(pred_parts):
        pred_glob.append(_coords(pred_parts[name]) + _offsets_for(pred_offsets, name, i)[..., None, :])
        gt_glob.append(_coords(gt_parts[name]) + _offsets_for(gt_offsets, name, i)[..., None, :])
    return _loss_fn(kind)(np.concatenate(pred_glob, axis=-2), np.concatenate(gt_glob, axis=-2))


def metric_wb(pred_wb, gt_wb, layout: SkeletonLayout) -> float:
    """Protocol #1 MPJPE: translate the predicted root onto the true root.

    Computed as the root-aligned difference (p - g) - (p_root - g_root),
    which is exact (identically zero) when pred equals gt.
    """
    p, g = _coords(pred_wb), _coords(gt_wb)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    root = layout.body.root_index
    diff = (p - g) - (p[..., root, None, :] - g[..., root, None, :])
    return float(np.mean(np.linalg.norm(diff, axis=-1)))


def metric_part(pred_wb, gt_wb, layout: SkeletonLayout, part: str) -> float:
    """Part MPJPE after aligning pred and gt to the part's own root joint.

    "hands" pools both hands' joints, each aligned to its own wrist.
    """
    p, g = _coords(pred_wb), _coords(gt_wb)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    part = part.lower()
    if part not in PART_METRICS:
        raise ValueError(f"part must be one of {PART_METRICS}, got {part!r}")
    names = ("left_hand", "right_hand") if part == "hands" else (part,)
    errors = []
    for name in names:
        spec = layout.part(name)
        idx = list(spec.joint_indices)
        p_local = p[..., idx, :] - p[..., spec.root_index, None, :]
        g_local = g[..., idx, :] - g[..., spec.root_index, None, :]
        errors.append(np.linalg.norm(p_local - g_local, axis=-1))
    return float(np.mean(np.concatenate(errors, axis=-1)))


def metric_pb(pred_wb, gt_wb, layout: SkeletonLayout) -> float:
    """Unweighted mean of the body, face, and hands part metrics."""
    return float(np.mean([metric_part(pred_wb, gt_wb, layout, m) for m in PART_METRICS]))


def aggregate_hypotheses(hyps: HypothesisSet) -> PoseSequence:
    """The averaged hypothesis (element-wise mean over H)."""
    return PoseSequence(hyps.frame_ids, hyps.coords.mean(axis=0))


def select_best(hyps: HypothesisSet, gt_wb, metric_fn) -> tuple[int, float]:
    """Hypothesis index minimizing metric_fn, ties broken by lowest index."""
    values = [metric_fn(hyps.hypothesis(i), gt_wb) for i in range(len(hyps))]
    idx = int(np.argmin(values))
    return idx, float(values[idx])


@dataclass(frozen=True)
class MetricsBlock:
    wb: float
    pb: float
    body: float
    face: float
    hands: float

    def __post_init__(self):
        vals = (self.wb, self.pb, self.body, self.face, self.hands)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise DataError(f"metric values must be finite and >= 0: {vals}")

    def check_pb(self, tol: float = 1e-9) -> "MetricsBlock":
        mean3 = (self.body + self.face + self.hands) / 3.0
        if abs(self.pb - mean3) > tol:
            raise DataError(f"PB {self.pb} != mean(Body,Face,Hands) {mean3} beyond {tol}")
        return self

    def to_json_dict(self) -> dict:
        return {
            "wb": round(self.wb, 3),
            "pb": round(self.pb, 3),
            "body": round(self.body, 3),
            "face": round(self.face, 3),
            "hands": round(self.hands, 3),
        }


@dataclass(frozen=True)
class MetricsReport:
    """WB/PB/Body/Face/Hands under P-Best and P-Agg, plus run settings.

    config, when present, is the resolved training/eval configuration
    echoed into the report document for reproducibility.
    """

    frames: int
    hypotheses: int
    iterations: int
    windows: int
    p_best: MetricsBlock
    p_agg: MetricsBlock
    config: dict | None = None

    def to_json_dict(self) -> dict:
        doc = {
            "settings": {
                "N": self.frames,
                "H": self.hypotheses,
                "K": self.iterations,
                "windows": self.windows,
            }
        }
        if self.config is not None:
            doc["config"] = self.config
        doc["p_best"] = self.p_best.to_json_dict()
        doc["p_agg"] = self.p_agg.to_json_dict()
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict) -> "MetricsReport":
        try:
            settings = doc["settings"]
            # Serialized values are rounded to 3 decimals, so the PB
            # invariant is checked with a correspondingly loose tolerance.
            blocks = {
                key: MetricsBlock(**doc[key]).check_pb(tol=2e-3)
                for key in ("p_best", "p_agg")
            }
            return cls(
                frames=int(settings["N"]),
                hypotheses=int(settings["H"]),
                iterations=int(settings["K"]),
                windows=int(settings["windows"]),
                p_best=blocks["p_best"],
                p_agg=blocks["p_agg"],
                config=doc.get("config"),
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed metrics report: {exc}") from exc


def write_report(report: MetricsReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, indent=2)
        fh.write("\n")


def read_report(path) -> MetricsReport:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read report {path}: {exc}") from exc
    return MetricsReport.from_json_dict(doc)
