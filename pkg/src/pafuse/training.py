"""AdamW training of the part denoisers and end-to-end evaluation.

One training step draws a diffusion time per window (shared across that
window's parts), noises the scaled part-local targets, asks each network
for its one-shot clean estimate, scores the part or whole-body loss, and
applies one decoupled-weight-decay Adam update to every parameter. The
hand network receives the summed gradients of both hands automatically
because both hand groups evaluate through the same parameter tensors.

Evaluation samples H hypotheses per window with per-window derived seeds,
then reports P-Best (per-metric minima over hypotheses) and P-Agg
(metrics of the averaged hypothesis), averaged over windows. Window-level
work is independent, so thread-parallel evaluation reproduces the
sequential result exactly.
"""

from __future__ import annotations

import configparser
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DatasetFile, Window, dataset_windows, normalize_2d
from .denoiser import (
    DenoiserBank,
    DenoiserConfig,
    allocate_channels,
    build_monolithic_bank,
    build_part_bank,
    parameter_count,
)
from .diffusion import (
    NoiseSchedule,
    cosine_schedule,
    derive_seed,
    forward_noise,
    rng_from,
    sample_hypotheses,
)
from .errors import DataError, NumericError, UsageError
from .objective import (
    PART_METRICS,
    MetricsBlock,
    MetricsReport,
    metric_part,
    metric_wb,
)
from .skeleton import PartSpec, SkeletonLayout, shift_coords

VARIANTS = ("monolithic", "shift_only", "parts_only", "full")

# RNG stream tags mixed with the base seed.
_STREAM_INIT = 1
_STREAM_TRAIN = 2


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters; defaults are desk scale, paper_scale() for full.

    Paper-scale values: 400 epochs, N=27 with batch 36 (N=81 with batch
    12), widths 384/256/224, lr 6e-5.
    """

    learning_rate: float = 6e-5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.1
    epochs: int = 20
    batch_size: int = 8
    frames: int = 9
    timesteps: int = 1000
    schedule_offset: float = 0.008
    loss: str = "mpjpe"  # mpjpe | mse
    loss_frame: str = "part"  # part | wb
    scale: float = 0.001  # applied to 3D targets before noising
    lr_decay: float = 0.99
    seed: int = 0
    stride: int = 2
    eval_stride: int = 0  # 0 -> non-overlapping (= frames)
    variant: str = "full"
    depth: int = 2
    width_body: int = 48
    width_hands: int = 32
    width_face: int = 28
    hypotheses: int = 1
    iterations: int = 1
    threads: int = 1
    checkpoint_interval: int = 0

    def __post_init__(self):
        positive = ("learning_rate", "scale", "lr_decay", "schedule_offset")
        for name in positive:
            if getattr(self, name) <= 0:
                raise UsageError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("beta1", "beta2"):
            if not 0 < getattr(self, name) < 1:
                raise UsageError(f"{name} must be in (0, 1), got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise UsageError(f"weight_decay must be >= 0, got {self.weight_decay}")
        at_least_one = ("batch_size", "frames", "timesteps", "stride", "hypotheses",
                        "iterations", "threads")
        for name in at_least_one:
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0 or self.eval_stride < 0 or self.checkpoint_interval < 0:
            raise UsageError("epochs, eval_stride, checkpoint_interval must be >= 0")
        if self.loss not in ("mpjpe", "mse"):
            raise UsageError(f"loss must be mpjpe|mse, got {self.loss!r}")
        if self.loss_frame not in ("part", "wb"):
            raise UsageError(f"loss_frame must be part|wb, got {self.loss_frame!r}")
        if self.variant not in VARIANTS:
            raise UsageError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        base = dict(
            epochs=400, frames=27, batch_size=36, stride=1,
            width_body=384, width_hands=256, width_face=224, depth=4,
        )
        base.update(overrides)
        return cls(**base)

    def resolved(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def with_overrides(self, **kw) -> "TrainConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)


_CONFIG_SECTIONS = {
    "model": ("variant", "depth", "width_body", "width_hands", "width_face"),
    "diffusion": ("timesteps", "schedule_offset"),
    "training": (
        "learning_rate", "beta1", "beta2", "weight_decay", "epochs", "batch_size",
        "frames", "loss", "loss_frame", "scale", "lr_decay", "seed", "stride",
        "checkpoint_interval", "threads",
    ),
    "sampling": ("hypotheses", "iterations", "eval_stride"),
}


def load_train_config(path) -> tuple[TrainConfig, dict]:
    """Parse an INI-style config file; returns (config, data paths).

    The [data] section may set `dataset` and `layout` paths; every other
    recognized key maps to a TrainConfig field. Unknown keys are errors.
    """
    parser = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from exc

    field_types = {f.name: f.type for f in fields(TrainConfig)}
    values: dict = {}
    paths: dict = {}
    for section in parser.sections():
        if section == "data":
            for key, val in parser.items(section):
                if key not in ("dataset", "layout"):
                    raise UsageError(f"unknown key {key!r} in [data] of {path}")
                paths[key] = val
            continue
        if section not in _CONFIG_SECTIONS:
            raise UsageError(f"unknown section [{section}] in {path}")
        for key, val in parser.items(section):
            if key not in _CONFIG_SECTIONS[section]:
                raise UsageError(f"unknown key {key!r} in [{section}] of {path}")
            kind = field_types[key]
            try:
                if kind == "int":
                    values[key] = int(val)
                elif kind == "float":
                    values[key] = float(val)
                else:
                    values[key] = val
            except ValueError as exc:
                raise UsageError(f"bad value for {key!r} in {path}: {val!r}") from exc
    return TrainConfig(**values), paths


def adamw_update(
    param: np.ndarray,
    grad: np.ndarray,
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    weight_decay: float = 0.0,
    eps: float = 1e-8,
) -> tuple[np.ndarray, dict]:
    """One decoupled-weight-decay Adam step.

    state holds first/second moment arrays and the step counter; it is
    updated in place and also returned.
    """
    if param.shape != grad.shape:
        raise ValueError(f"param/grad shape mismatch: {param.shape} vs {grad.shape}")
    step = state["step"] + 1
    m = beta1 * state["m"] + (1.0 - beta1) * grad
    v = beta2 * state["v"] + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    new_param = param - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * param)
    state["m"], state["v"], state["step"] = m, v, step
    return new_param, state


class AdamW:
    """Optimizer over a named parameter dict; updates arrays in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, weight_decay: float = 0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.state = {
            name: {"m": np.zeros_like(p), "v": np.zeros_like(p), "step": 0}
            for name, p in params.items()
        }

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, param in params.items():
            new_param, _ = adamw_update(
                param, grads[name], self.state[name],
                lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                weight_decay=self.weight_decay,
            )
            param[...] = new_param  # in place: banks hold the same arrays


def mpjpe_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = pred - Tensor(target)
    sq = ad.reduce_sum(ad.mul(diff, diff), axis=-1)
    return ad.reduce_mean(ad.sqrt(sq))


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = pred - Tensor(target)
    return ad.reduce_mean(ad.mul(diff, diff))


def variant_layout(layout: SkeletonLayout, variant: str) -> SkeletonLayout:
    """The layout a model variant trains against.

    Shifted variants keep the per-part roots; unshifted ones anchor every
    part at the body root, which makes part-local frames coincide with the
    body-root-centered global frame.
    """
    if variant not in VARIANTS:
        raise UsageError(f"unknown variant {variant!r}")
    if variant in ("full", "shift_only"):
        return layout
    root = layout.body.root_index
    return SkeletonLayout(
        layout.total_joints,
        tuple(PartSpec(p.name, p.joint_indices, root) for p in layout.parts),
    )


def part_budget(layout: SkeletonLayout, config: TrainConfig) -> int:
    """Parameter total of the part-based bank for this config."""
    widths = {"body": config.width_body, "face": config.width_face, "hands": config.width_hands}
    total = 0
    for key in ("body", "face", "hands"):
        joints = layout.part("left_hand").size if key == "hands" else layout.part(key).size
        total += parameter_count(
            DenoiserConfig(part=key, joints=joints, frames=config.frames,
                           channels=widths[key], depth=config.depth)
        )
    return total


def build_bank(config: TrainConfig, layout: SkeletonLayout, seed: int) -> DenoiserBank:
    """Denoiser bank for the configured variant.

    Single-network variants get their width from the channel allocator so
    all variants match the part-based parameter budget.
    """
    mlayout = variant_layout(layout, config.variant)
    if config.variant in ("full", "parts_only"):
        widths = {"body": config.width_body, "face": config.width_face,
                  "hands": config.width_hands}
        return build_part_bank(mlayout, config.frames, widths, config.depth, seed)
    target = part_budget(layout, config)
    [channels] = allocate_channels(
        target, [(layout.total_joints, config.frames)], config.depth, ratios=(1.0,)
    )
    return build_monolithic_bank(mlayout, config.frames, channels, config.depth, seed)


def bank_params(bank: DenoiserBank) -> dict[str, np.ndarray]:
    return {
        f"{key}/{name}": arr
        for key, net in bank.nets.items()
        for name, arr in net.params.items()
    }


def _stack_batch(batch: list[Window]) -> tuple[np.ndarray, np.ndarray]:
    kp3d = np.stack([w.kp3d for w in batch])
    kp2d = np.stack([w.kp2d for w in batch])
    return kp2d, kp3d


def _group_inputs(bank: DenoiserBank, parts: dict[str, np.ndarray]) -> list[np.ndarray]:
    return [
        np.concatenate([parts[name] for name in names], axis=-2)
        for _, names in bank.groups
    ]


def batch_loss(
    bank: DenoiserBank,
    batch: list[Window],
    schedule: NoiseSchedule,
    config: TrainConfig,
    rng: np.random.Generator,
    image_size: tuple[int, int],
) -> tuple[Tensor, dict[str, Tensor]]:
    """Tape loss for one batch plus the parameter leaves for gradients."""
    if not batch:
        raise DataError("empty batch")
    if any(w.kp3d is None for w in batch):
        raise DataError("training requires 3D ground truth in every window")
    layout = bank.layout
    kp2d, kp3d = _stack_batch(batch)
    x2d = normalize_2d(kp2d, image_size)
    locals_, offsets = shift_coords(kp3d, layout)
    targets = {name: config.scale * arr for name, arr in locals_.items()}

    t = rng.integers(1, config.timesteps + 1, size=len(batch))
    noisy = {}
    for p in layout.parts:  # fixed draw order, independent of grouping
        noisy[p.name] = forward_noise(targets[p.name], t, schedule, rng)

    x2d_parts = {p.name: x2d[..., list(p.joint_indices), :] for p in layout.parts}
    leaves = {key: net.leaves() for key, net in bank.nets.items()}
    group_preds = []
    for (key, names), x_g, y_g in zip(
        bank.groups, _group_inputs(bank, x2d_parts), _group_inputs(bank, noisy)
    ):
        group_preds.append(bank.nets[key].apply(leaves[key], t, x_g, y_g))

    loss_fn = mpjpe_loss if config.loss == "mpjpe" else mse_loss
    if config.loss_frame == "part":
        pred_cat = ad.concat(group_preds, axis=2)
        target_cat = np.concatenate(
            [targets[p.name] for p in layout.parts], axis=2
        )
        loss = loss_fn(pred_cat, target_cat)
    else:
        # Whole-body loss: predicted offsets come from the predicted body
        # part, so gradient flows through the gathered root coordinates.
        part_preds: dict[str, Tensor] = {}
        for (key, names), pred in zip(bank.groups, group_preds):
            start = 0
            for name in names:
                size = layout.part(name).size
                part_preds[name] = ad.take(pred, list(range(start, start + size)), axis=2)
                start += size
        body_pred = part_preds["body"]
        shifted = []
        for p in layout.parts:
            if p.name == "body":
                shifted.append(part_preds[p.name])
            else:
                r_hat = ad.take(body_pred, [layout.root_position_in_body(p)], axis=2)
                shifted.append(part_preds[p.name] + r_hat)
        pred_wb = ad.concat(shifted, axis=2)
        root = layout.body.root_index
        gt_wb = config.scale * (kp3d - kp3d[:, :, root : root + 1, :])
        loss = loss_fn(pred_wb, gt_wb)

    flat_leaves = {
        f"{key}/{name}": leaf
        for key, net_leaves in leaves.items()
        for name, leaf in net_leaves.items()
    }
    return loss, flat_leaves


def train_step(
    bank: DenoiserBank,
    batch: list[Window],
    schedule: NoiseSchedule,
    config: TrainConfig,
    rng: np.random.Generator,
    optimizer: AdamW,
    image_size: tuple[int, int],
) -> float:
    """One optimization step over a batch of windows; returns the loss."""
    loss, leaves = batch_loss(bank, batch, schedule, config, rng, image_size)
    loss.backward()
    params = bank_params(bank)
    grads = {
        name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
        for name, leaf in leaves.items()
    }
    optimizer.update(params, grads)
    return float(loss.data)


def train(
    dataset: DatasetFile,
    config: TrainConfig,
    on_epoch=None,
) -> tuple[DenoiserBank, list[dict]]:
    """Full training run; returns the bank and the per-epoch log.

    The log records epoch (1-based), the learning rate used, and the mean
    loss over that epoch's windows. epochs=0 returns the freshly built
    bank untouched.
    """
    windows = dataset_windows(dataset, config.frames, config.stride)
    if not windows:
        raise DataError(f"no windows of length {config.frames} in the dataset")
    if any(w.kp3d is None for w in windows):
        raise DataError("training dataset is missing 3D ground truth")
    schedule = cosine_schedule(config.timesteps, config.schedule_offset)
    bank = build_bank(config, dataset.layout, derive_seed(config.seed, _STREAM_INIT))
    optimizer = AdamW(
        bank_params(bank),
        lr=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        weight_decay=config.weight_decay,
    )
    rng = rng_from(config.seed, _STREAM_TRAIN)
    log: list[dict] = []
    for epoch in range(1, config.epochs + 1):
        optimizer.lr = config.learning_rate * config.lr_decay ** (epoch - 1)
        order = rng.permutation(len(windows))
        total, count = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            batch = [windows[i] for i in order[lo : lo + config.batch_size]]
            loss = train_step(bank, batch, schedule, config, rng, optimizer,
                              dataset.image_size)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            total += loss * len(batch)
            count += len(batch)
        entry = {"epoch": epoch, "lr": optimizer.lr, "loss": total / count}
        log.append(entry)
        if on_epoch is not None:
            on_epoch(bank, epoch, entry)
    return bank, log


def _x2d_parts(layout: SkeletonLayout, x2d: np.ndarray) -> dict[str, np.ndarray]:
    return {p.name: x2d[..., list(p.joint_indices), :] for p in layout.parts}


def predict_window(
    bank: DenoiserBank,
    window: Window,
    schedule: NoiseSchedule,
    config: TrainConfig,
    hypotheses: int,
    iterations: int,
    seed: int,
    image_size: tuple[int, int],
):
    """HypothesisSet of whole-body predictions for one window."""
    x2d = normalize_2d(window.kp2d, image_size)
    return sample_hypotheses(
        bank,
        _x2d_parts(bank.layout, x2d),
        schedule,
        iterations=iterations,
        hypotheses=hypotheses,
        seed=seed,
        layout=bank.layout,
        frame_ids=window.frame_ids,
        scale=config.scale,
    )


def _window_metrics(hyps, gt: np.ndarray, layout: SkeletonLayout) -> tuple[dict, dict]:
    per_hyp = {m: [] for m in ("wb",) + PART_METRICS}
    for i in range(len(hyps)):
        coords = hyps.coords[i]
        per_hyp["wb"].append(metric_wb(coords, gt, layout))
        for pm in PART_METRICS:
            per_hyp[pm].append(metric_part(coords, gt, layout, pm))
    best = {m: min(vals) for m, vals in per_hyp.items()}
    best["pb"] = (best["body"] + best["face"] + best["hands"]) / 3.0
    agg_coords = hyps.coords.mean(axis=0)
    agg = {"wb": metric_wb(agg_coords, gt, layout)}
    for pm in PART_METRICS:
        agg[pm] = metric_part(agg_coords, gt, layout, pm)
    agg["pb"] = (agg["body"] + agg["face"] + agg["hands"]) / 3.0
    return best, agg


def evaluate(
    bank: DenoiserBank,
    dataset: DatasetFile,
    hypotheses: int,
    iterations: int,
    config: TrainConfig,
    seed: int = 0,
    threads: int = 1,
    echo_config: dict | None = None,
) -> MetricsReport:
    """P-Best / P-Agg metrics over the dataset's evaluation windows.

    Metrics are computed against the dataset's canonical layout; per-
    window sampling seeds derive from (seed, window index) so thread count
    has no effect on the result.
    """
    stride = config.eval_stride or config.frames
    windows = dataset_windows(dataset, config.frames, stride)
    if not windows:
        raise DataError(f"no evaluation windows of length {config.frames}")
    if any(w.kp3d is None for w in windows):
        raise DataError("evaluation requires 3D ground truth")
    schedule = cosine_schedule(config.timesteps, config.schedule_offset)

    def score(idx: int) -> tuple[dict, dict]:
        w = windows[idx]
        hyps = predict_window(
            bank, w, schedule, config, hypotheses, iterations,
            derive_seed(seed, idx), dataset.image_size,
        )
        return _window_metrics(hyps, w.kp3d, dataset.layout)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(score, range(len(windows))))
    else:
        results = [score(i) for i in range(len(windows))]

    def block(which: int) -> MetricsBlock:
        keys = ("wb", "pb", "body", "face", "hands")
        means = {k: float(np.mean([r[which][k] for r in results])) for k in keys}
        return MetricsBlock(**means).check_pb()

    return MetricsReport(
        frames=config.frames,
        hypotheses=hypotheses,
        iterations=iterations,
        windows=len(windows),
        p_best=block(0),
        p_agg=block(1),
        config=echo_config,
    )


def mean_pose(dataset: DatasetFile) -> np.ndarray:
    """Per-joint mean of body-root-centered poses over all frames."""
    layout = dataset.layout
    root = layout.body.root_index
    acc = np.zeros((layout.total_joints, 3))
    count = 0
    for seq in dataset.sequences:
        if seq.kp3d is None:
            raise DataError("mean pose requires 3D ground truth")
        centered = seq.kp3d - seq.kp3d[:, root : root + 1, :]
        acc += centered.sum(axis=0)
        count += seq.n_frames
    return acc / count


def constant_pose_wb(pose: np.ndarray, dataset: DatasetFile, config: TrainConfig) -> float:
    """Mean WB metric of predicting one fixed pose for every frame."""
    stride = config.eval_stride or config.frames
    windows = dataset_windows(dataset, config.frames, stride)
    if not windows:
        raise DataError(f"no evaluation windows of length {config.frames}")
    pred = np.broadcast_to(pose, (config.frames,) + pose.shape)
    return float(np.mean([metric_wb(pred, w.kp3d, dataset.layout) for w in windows]))
