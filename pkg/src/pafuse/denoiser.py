"""Part-specific denoising networks and channel-budget allocation.

Each network maps (diffusion time t, 2D conditioning, noisy 3D part) to a
one-shot clean-signal estimate. Tokens are the N*J per-joint slots of a
window; the input per token is 5 channels (3 noisy 3D + 2 conditioning
2D). After a linear embedding, the timestep encoding is added to every
token, and learned per-frame and per-joint vectors give tokens temporal
and spatial identity. Each residual block mixes spatially (attention
across the joints of a frame), then temporally (attention across the
frames of a joint), then applies a two-layer feed-forward with GELU; all
sublayers are pre-normalized. The output head is zero-initialized behind
a final layer norm, so a fresh network predicts the origin of the scaled
local frame.

Left and right hands are evaluated through one shared parameter set; a
DenoiserBank records which parts run through which network and in what
grouping (part-wise for the part-based model, one concatenated group for
monolithic baselines).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import derive_seed, timestep_embedding
from .errors import DataError, UsageError
from .skeleton import SkeletonLayout

IN_CHANNELS = 5
OUT_CHANNELS = 3

# Desk-scale widths keep the paper-scale 384:256:224 body:hands:face
# proportions at roughly 1/8 size.
PAPER_WIDTHS = {"body": 384, "hands": 256, "face": 224}
DESK_WIDTHS = {"body": 48, "hands": 32, "face": 28}


@dataclass(frozen=True)
class DenoiserConfig:
    part: str
    joints: int
    frames: int
    channels: int
    depth: int

    def __post_init__(self):
        if self.joints < 1 or self.frames < 1:
            raise UsageError(f"joints and frames must be >= 1: {self}")
        if self.channels < 4:
            raise UsageError(f"channels must be >= 4, got {self.channels}")
        if self.depth < 0:
            raise UsageError(f"depth must be >= 0, got {self.depth}")


def _parameter_shapes(config: DenoiserConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init kind) for every parameter array.

    Init kinds: "xavier" (uniform +-sqrt(6/(fan_in+fan_out))) or "zeros".
    The order here fixes the RNG consumption order of build_denoiser.
    """
    c = config.channels
    shapes: list[tuple[str, tuple[int, ...], str]] = [
        ("embed.w", (IN_CHANNELS, c), "xavier"),
        ("embed.b", (c,), "zeros"),
        ("tpe", (config.frames, c), "posenc"),
        ("spe", (config.joints, c), "posenc"),
    ]
    for layer in range(config.depth):
        for kind in ("spatial", "temporal"):
            shapes.append((f"block{layer}.{kind}.ln_g", (c,), "ones"))
            shapes.append((f"block{layer}.{kind}.ln_b", (c,), "zeros"))
            for nm in ("wq", "wk", "wv", "wo"):
                shapes.append((f"block{layer}.{kind}.{nm}", (c, c), "xavier"))
            # No key bias: softmax is invariant to the per-query constant
            # shift a key bias produces, so it would be a dead parameter.
            for nm in ("bq", "bv", "bo"):
                shapes.append((f"block{layer}.{kind}.{nm}", (c,), "zeros"))
        shapes.append((f"block{layer}.ffn.ln_g", (c,), "ones"))
        shapes.append((f"block{layer}.ffn.ln_b", (c,), "zeros"))
        shapes.append((f"block{layer}.ffn.w1", (c, 2 * c), "xavier"))
        shapes.append((f"block{layer}.ffn.b1", (2 * c,), "zeros"))
        shapes.append((f"block{layer}.ffn.w2", (2 * c, c), "xavier"))
        shapes.append((f"block{layer}.ffn.b2", (c,), "zeros"))
    shapes.append(("head.ln_g", (c,), "ones"))
    shapes.append(("head.ln_b", (c,), "zeros"))
    shapes.append(("head.w", (c, OUT_CHANNELS), "zeros"))
    shapes.append(("head.b", (OUT_CHANNELS,), "zeros"))
    return shapes


def parameter_count(config: DenoiserConfig) -> int:
    """Parameter total for a config, without building the network."""
    return sum(int(np.prod(shape)) for _, shape, _ in _parameter_shapes(config))


class Denoiser:
    """A differentiable x0-prediction network for one part (or group)."""

    def __init__(self, config: DenoiserConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    def apply(self, leaves: dict[str, Tensor], t, x2d: np.ndarray, y_t: np.ndarray) -> Tensor:
        """Forward pass on the tape; leaves are this network's parameters.

        t is a scalar timestep or a (B,) array of per-sample timesteps;
        x2d is (B, N, J, 2) and y_t is (B, N, J, 3). Returns (B, N, J, 3).
        """
        cfg = self.config
        x2d = np.asarray(x2d, dtype=np.float64)
        y_t = np.asarray(y_t, dtype=np.float64)
        expected = (cfg.frames, cfg.joints)
        if x2d.ndim != 4 or x2d.shape[1:] != expected + (2,):
            raise ValueError(f"x2d must be (B, {cfg.frames}, {cfg.joints}, 2), got {x2d.shape}")
        if y_t.shape != x2d.shape[:3] + (3,):
            raise ValueError(f"y_t must be (B, {cfg.frames}, {cfg.joints}, 3), got {y_t.shape}")
        batch = x2d.shape[0]
        ts = np.broadcast_to(np.asarray(t, dtype=np.int64), (batch,))

        tokens = Tensor(np.concatenate([y_t, x2d], axis=-1))
        h = ad.linear(tokens, leaves["embed.w"], leaves["embed.b"])
        # Sinusoidal encoding needs an even width; odd widths leave the
        # last channel without a time signal.
        temb_dim = cfg.channels - (cfg.channels % 2)
        temb = timestep_embedding(ts, temb_dim)
        if temb_dim < cfg.channels:
            temb = np.pad(temb, ((0, 0), (0, 1)))
        h = h + Tensor(temb[:, None, None, :])
        h = h + leaves["tpe"].reshape(cfg.frames, 1, cfg.channels)
        h = h + leaves["spe"]
        for layer in range(cfg.depth):
            h = h + self._attention(leaves, f"block{layer}.spatial", h)
            ht = ad.swapaxes(h, 1, 2)
            ht = ht + self._attention(leaves, f"block{layer}.temporal", ht)
            h = ad.swapaxes(ht, 1, 2)
            h = h + self._ffn(leaves, f"block{layer}.ffn", h)
        h = ad.layer_norm(h, leaves["head.ln_g"], leaves["head.ln_b"])
        return ad.linear(h, leaves["head.w"], leaves["head.b"])

    def _attention(self, leaves, prefix: str, h: Tensor) -> Tensor:
        # Pre-norm sublayer: the caller adds the residual.
        x = ad.layer_norm(h, leaves[f"{prefix}.ln_g"], leaves[f"{prefix}.ln_b"])
        q = ad.linear(x, leaves[f"{prefix}.wq"], leaves[f"{prefix}.bq"])
        k = ad.linear(x, leaves[f"{prefix}.wk"])
        v = ad.linear(x, leaves[f"{prefix}.wv"], leaves[f"{prefix}.bv"])
        scores = ad.mul(q @ ad.swapaxes(k, -1, -2), 1.0 / np.sqrt(self.config.channels))
        out = ad.softmax(scores, axis=-1) @ v
        return ad.linear(out, leaves[f"{prefix}.wo"], leaves[f"{prefix}.bo"])

    def _ffn(self, leaves, prefix: str, h: Tensor) -> Tensor:
        x = ad.layer_norm(h, leaves[f"{prefix}.ln_g"], leaves[f"{prefix}.ln_b"])
        inner = ad.gelu(ad.linear(x, leaves[f"{prefix}.w1"], leaves[f"{prefix}.b1"]))
        return ad.linear(inner, leaves[f"{prefix}.w2"], leaves[f"{prefix}.b2"])

    def leaves(self) -> dict[str, Tensor]:
        return {name: Tensor(arr) for name, arr in self.params.items()}

    def predict(self, t, x2d: np.ndarray, y_t: np.ndarray) -> np.ndarray:
        """Clean-signal estimate without recording a tape.

        Accepts a single window (N, J, ...) or a batch (B, N, J, ...).
        """
        single = np.asarray(y_t).ndim == 3
        if single:
            x2d = np.asarray(x2d)[None]
            y_t = np.asarray(y_t)[None]
        with ad.no_grad():
            out = self.apply(self.leaves(), t, x2d, y_t).data
        return out[0] if single else out


def build_denoiser(config: DenoiserConfig, seed: int) -> Denoiser:
    rng = np.random.Generator(np.random.PCG64(seed & ((1 << 64) - 1)))
    params: dict[str, np.ndarray] = {}
    for name, shape, init in _parameter_shapes(config):
        if init == "xavier":
            fan_in, fan_out = shape[0], shape[1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif init == "ones":
            params[name] = np.ones(shape)
        elif init == "posenc":
            # Learned positional vectors start small but nonzero so tokens
            # carry joint/frame identity from the first step.
            params[name] = rng.normal(scale=0.2, size=shape)
        else:
            params[name] = np.zeros(shape)
    return Denoiser(config, params)


def denoise_predict(denoiser: Denoiser, t: int, x2d: np.ndarray, y_t: np.ndarray) -> np.ndarray:
    """Single-window clean-signal prediction (scaled local part frame)."""
    x2d = np.asarray(x2d, dtype=np.float64)
    y_t = np.asarray(y_t, dtype=np.float64)
    if x2d.ndim != 3 or y_t.ndim != 3:
        raise ValueError("denoise_predict expects single-window (N, J, *) inputs")
    return denoiser.predict(int(t), x2d, y_t)


def count_parameters(obj) -> int:
    """Total number of scalar parameters in a Denoiser or DenoiserBank."""
    if isinstance(obj, DenoiserBank):
        return sum(count_parameters(net) for net in obj.nets.values())
    return sum(arr.size for arr in obj.params.values())


def allocate_channels(
    target_total: int,
    parts: list[tuple[int, int]],
    depth: int,
    ratios: tuple[float, ...] = (384.0, 256.0, 224.0),
    tolerance: float = 0.03,
) -> list[int]:
    """Channel widths per network hitting a shared parameter budget.

    parts lists one (joints, frames) entry per *network* (hands appear
    once: both hands share weights). Widths follow the requested ratios,
    then a local search nudges individual widths until the summed
    parameter count lands within `tolerance` of target_total.
    """
    if len(parts) != len(ratios):
        raise UsageError(f"{len(parts)} parts but {len(ratios)} ratios")
    if any(r <= 0 for r in ratios):
        raise UsageError(f"ratios must be positive: {ratios}")
    if target_total < 1:
        raise UsageError(f"target_total must be positive, got {target_total}")

    def snap(c: float) -> int:
        return max(4, int(round(c)))

    def widths_for(scale: float) -> list[int]:
        return [snap(scale * r) for r in ratios]

    def total_for(widths: list[int]) -> int:
        return sum(
            parameter_count(
                DenoiserConfig(part=f"net{i}", joints=j, frames=n, channels=w, depth=depth)
            )
            for i, ((j, n), w) in enumerate(zip(parts, widths))
        )

    lo, hi = 1e-6, 4.0 / min(ratios)
    while total_for(widths_for(hi)) < target_total and hi < 1e9:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if total_for(widths_for(mid)) < target_total:
            lo = mid
        else:
            hi = mid
    base = widths_for(hi)

    # Nudge widths a few steps to close the rounding gap. Identical
    # (part, ratio) entries move together so symmetric inputs stay
    # symmetric.
    keys = [(parts[i], ratios[i]) for i in range(len(parts))]
    groups: dict = {}
    for i, key in enumerate(keys):
        groups.setdefault(key, []).append(i)
    group_list = list(groups.values())

    def respects_ratios(cand: list[int]) -> bool:
        for i in range(len(cand)):
            for j in range(len(cand)):
                if ratios[i] > ratios[j] and cand[i] <= cand[j]:
                    return False
        return True

    best, best_err = base, abs(total_for(base) - target_total)
    deltas = (-2, -1, 0, 1, 2)
    grids: list[list[int]] = [[]]
    for _ in group_list:
        grids = [g + [d] for g in grids for d in deltas]
    for g in grids:
        cand = list(base)
        for members, delta in zip(group_list, g):
            for i in members:
                cand[i] = max(4, base[i] + delta)
        if not respects_ratios(cand):
            continue
        err = abs(total_for(cand) - target_total)
        if err < best_err:
            best, best_err = cand, err
    if best_err > tolerance * target_total:
        raise UsageError(
            f"cannot reach parameter budget {target_total} within "
            f"{tolerance:.0%} (best total {total_for(best)}); "
            "budget too small for the requested ratios"
        )
    return best


_HAND_PARTS = ("left_hand", "right_hand")


class DenoiserBank:
    """Networks plus the mapping from layout parts to evaluation groups.

    groups is an ordered tuple of (net_key, part_names): each group's
    parts are concatenated along the joint axis and run through one
    network. Group order follows layout part order so concatenating group
    outputs reproduces the layout's joint order.
    """

    def __init__(
        self,
        layout: SkeletonLayout,
        nets: dict[str, Denoiser],
        groups: tuple[tuple[str, tuple[str, ...]], ...],
    ):
        for key, names in groups:
            if key not in nets:
                raise DataError(f"group references unknown network {key!r}")
            joints = sum(layout.part(n).size for n in names)
            if joints != nets[key].config.joints:
                raise DataError(
                    f"network {key!r} has {nets[key].config.joints} joints "
                    f"but group {names} needs {joints}"
                )
        covered = [n for _, names in groups for n in names]
        if sorted(covered) != sorted(layout.part_names):
            raise DataError(f"groups {covered} do not cover layout parts exactly once")
        self.layout = layout
        self.nets = nets
        self.groups = groups

    def evaluation_groups(self):
        return [(self.nets[key], names) for key, names in self.groups]

    def net_for_part(self, part: str) -> Denoiser:
        for key, names in self.groups:
            if part in names:
                return self.nets[key]
        raise DataError(f"no network registered for part {part!r}")

    def parameter_counts(self) -> dict[str, int]:
        return {key: count_parameters(net) for key, net in self.nets.items()}


def build_part_bank(
    layout: SkeletonLayout,
    frames: int,
    widths: dict[str, int] | None = None,
    depth: int = 2,
    seed: int = 0,
) -> DenoiserBank:
    """Body/face/shared-hands networks, one evaluation group per part."""
    widths = dict(DESK_WIDTHS if widths is None else widths)
    hand_sizes = {layout.part(p).size for p in _HAND_PARTS if p in layout.part_names}
    if len(hand_sizes) > 1:
        raise DataError(f"hands must have equal joint counts to share weights: {hand_sizes}")
    nets: dict[str, Denoiser] = {}
    order = ["body", "face", "hands"]
    for i, key in enumerate(order):
        joints = layout.part("left_hand").size if key == "hands" else layout.part(key).size
        cfg = DenoiserConfig(part=key, joints=joints, frames=frames,
                             channels=widths[key], depth=depth)
        nets[key] = build_denoiser(cfg, derive_seed(seed, i))
    groups = []
    for p in layout.parts:
        key = "hands" if p.name in _HAND_PARTS else p.name
        groups.append((key, (p.name,)))
    return DenoiserBank(layout, nets, tuple(groups))


def build_monolithic_bank(
    layout: SkeletonLayout,
    frames: int,
    channels: int,
    depth: int = 2,
    seed: int = 0,
) -> DenoiserBank:
    """One network over all joints, evaluated as a single group."""
    cfg = DenoiserConfig(part="wb", joints=layout.total_joints, frames=frames,
                         channels=channels, depth=depth)
    nets = {"wb": build_denoiser(cfg, derive_seed(seed, 0))}
    return DenoiserBank(layout, nets, (("wb", layout.part_names),))
