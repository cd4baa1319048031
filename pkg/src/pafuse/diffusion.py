"""Forward noising, cosine schedule, DDIM sampling, and hypothesis sets.

The forward process is the variance-preserving form
    y_t = sqrt(abar_t) * y + sqrt(1 - abar_t) * eps
with abar following the cosine schedule. Inference runs deterministic
DDIM over K uniformly spaced timesteps from T down to 0, predicting the
clean signal at every step and re-noising to the next grid point. Multi-
hypothesis sampling derives one seed per hypothesis through a fixed
64-bit mix so parallel, sequential, and differently sized hypothesis sets
agree sample-for-sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, UsageError
from .skeleton import (
    PoseSequence,
    SkeletonLayout,
    offsets_from_body_coords,
    reconstruct_coords,
)

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(seed: int, *indices: int) -> int:
    """Mix a base seed with one or more stream indices.

    Used for per-hypothesis and per-window random streams: the derived
    seed depends only on (seed, indices), never on how many other streams
    exist, so hypothesis h of an H=20 run equals hypothesis h of an H=1
    run and parallel evaluation equals sequential evaluation.
    """
    state = seed & _MASK64
    for idx in indices:
        state = _splitmix64(state ^ ((idx * 0xD2B74407B1CE6E93) & _MASK64))
    return state


def rng_from(seed: int, *indices: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *indices)))


@dataclass(frozen=True)
class NoiseSchedule:
    """Diffusion step count T and cumulative signal retention abar[0..T]."""

    timesteps: int
    offset: float
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "alpha_bar", ab)
        if ab.shape != (self.timesteps + 1,):
            raise DataError(f"alpha_bar must have length T+1, got {ab.shape}")
        if abs(ab[0] - 1.0) > 1e-12:
            raise DataError(f"alpha_bar[0] must be 1, got {ab[0]!r}")
        if not np.all(np.diff(ab) < 0):
            raise DataError("alpha_bar must be strictly decreasing")
        if not (np.all(ab > 0) and np.all(ab <= 1)):
            raise DataError("alpha_bar values must lie in (0, 1]")


def cosine_schedule(timesteps: int, offset: float = 0.008) -> NoiseSchedule:
    """Cosine cumulative schedule abar[t] = f(t)/f(0).

    f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2). abar[0] is exactly 1 and
    abar[T] is tiny but positive.
    """
    if timesteps < 1:
        raise UsageError(f"timesteps must be >= 1, got {timesteps}")
    if offset <= 0:
        raise UsageError(f"schedule offset must be > 0, got {offset}")
    t = np.arange(timesteps + 1, dtype=np.float64)
    f = np.cos(((t / timesteps + offset) / (1.0 + offset)) * (np.pi / 2.0)) ** 2
    return NoiseSchedule(timesteps, offset, f / f[0])


def _check_t(t, timesteps: int) -> np.ndarray:
    t = np.asarray(t)
    if not np.issubdtype(t.dtype, np.integer):
        raise UsageError(f"timestep must be integral, got dtype {t.dtype}")
    if np.any(t < 0) or np.any(t > timesteps):
        raise UsageError(f"timestep out of range [0, {timesteps}]: {t}")
    return t


def forward_noise(
    y: np.ndarray,
    t,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """Noise a clean (already scaled) signal to diffusion time t.

    t may be a scalar or an array matching y's leading dimension, in which
    case each slice gets its own noise level. Exactly one standard-normal
    draw of y's shape is consumed from rng either way.
    """
    y = np.asarray(y, dtype=np.float64)
    t = _check_t(t, schedule.timesteps)
    eps = rng.standard_normal(y.shape)
    ab = schedule.alpha_bar[t]
    if t.ndim > 0:
        ab = ab.reshape(ab.shape + (1,) * (y.ndim - ab.ndim))
    return np.sqrt(ab) * y + np.sqrt(1.0 - ab) * eps


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal encoding of diffusion time: [sin(t*w_k) ; cos(t*w_k)].

    Frequencies w_k run geometrically from 1 down to 1/10000 over dim/2
    bands. t may be a scalar (returns (dim,)) or an array (returns
    t.shape + (dim,)).
    """
    if dim < 2 or dim % 2 != 0:
        raise UsageError(f"embedding dim must be even and >= 2, got {dim}")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = 10000.0 ** (-np.arange(half, dtype=np.float64) / (half - 1))
    arg = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def ddim_step(
    y_t: np.ndarray,
    y0_hat: np.ndarray,
    t: int,
    t_next: int,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """One deterministic DDIM update from time t to t_next.

    Recovers the implied noise from the clean-signal estimate and re-noises
    it to the target level; no stochasticity is injected. t_next == t is
    the identity, t_next == 0 returns y0_hat exactly.
    """
    _check_t(t, schedule.timesteps)
    _check_t(t_next, schedule.timesteps)
    if t_next == t:
        return np.array(y_t, dtype=np.float64, copy=True)
    if t_next > t:
        raise UsageError(f"t_next must not exceed t ({t_next} > {t})")
    if t == 0:
        raise UsageError("cannot step below t=0: noise magnitude is zero there")
    y_t = np.asarray(y_t, dtype=np.float64)
    y0_hat = np.asarray(y0_hat, dtype=np.float64)
    ab_t = schedule.alpha_bar[t]
    ab_next = schedule.alpha_bar[t_next]
    eps_hat = (y_t - np.sqrt(ab_t) * y0_hat) / np.sqrt(1.0 - ab_t)
    return np.sqrt(ab_next) * y0_hat + np.sqrt(1.0 - ab_next) * eps_hat


def ddim_timesteps(timesteps: int, iterations: int) -> list[int]:
    """K+1 uniformly spaced grid points from T down to 0 (both included)."""
    if iterations < 1:
        raise UsageError(f"iterations must be >= 1, got {iterations}")
    return [int(round(timesteps * (iterations - i) / iterations)) for i in range(iterations + 1)]


@dataclass
class HypothesisSet:
    """H whole-body 3D predictions for one window, with their seeds."""

    frame_ids: np.ndarray
    coords: np.ndarray  # (H, N, J, 3)
    seeds: tuple[int, ...]

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 4:
            raise DataError(f"hypothesis coords must be (H, N, J, 3), got {self.coords.shape}")
        if len(self.seeds) != self.coords.shape[0]:
            raise DataError("one seed per hypothesis required")

    def __len__(self) -> int:
        return self.coords.shape[0]

    def hypothesis(self, i: int) -> PoseSequence:
        return PoseSequence(self.frame_ids, self.coords[i])


def _predict(denoiser, t, x2d, y_t):
    if hasattr(denoiser, "predict"):
        return denoiser.predict(t, x2d, y_t)
    return denoiser(t, x2d, y_t)


def _as_groups(denoisers, layout: SkeletonLayout):
    # A DenoiserBank exposes evaluation groups; a plain part->denoiser
    # mapping evaluates each part on its own.
    if hasattr(denoisers, "evaluation_groups"):
        return denoisers.evaluation_groups()
    groups = []
    for p in layout.parts:
        if p.name not in denoisers:
            raise DataError(f"missing denoiser for part {p.name!r}")
        groups.append((denoisers[p.name], (p.name,)))
    return groups


def sample_hypotheses(
    denoisers,
    x2d_parts: dict[str, np.ndarray],
    schedule: NoiseSchedule,
    iterations: int,
    hypotheses: int,
    seed: int,
    layout: SkeletonLayout,
    frame_ids: np.ndarray,
    scale: float = 1.0,
) -> HypothesisSet:
    """Draw H whole-body hypotheses by part-wise conditional DDIM.

    Each hypothesis starts from standard Gaussian noise seeded by
    derive_seed(seed, h), runs K denoise/re-noise iterations per part
    group, is unscaled by 1/scale, and is reassembled hierarchically using
    root offsets read from its own predicted body part. Fully
    deterministic given (denoiser parameters, inputs, schedule, K, H,
    seed).
    """
    if hypotheses < 1:
        raise UsageError(f"hypotheses must be >= 1, got {hypotheses}")
    groups = _as_groups(denoisers, layout)
    n_frames = len(frame_ids)
    for p in layout.parts:
        if p.name not in x2d_parts:
            raise DataError(f"missing 2D conditioning for part {p.name!r}")

    group_x2d = []
    for _, names in groups:
        x = np.concatenate([np.asarray(x2d_parts[n], dtype=np.float64) for n in names], axis=-2)
        group_x2d.append(np.broadcast_to(x, (hypotheses,) + x.shape))

    seeds = tuple(derive_seed(seed, h) for h in range(hypotheses))
    group_y = [np.empty((hypotheses, n_frames, x.shape[-2], 3)) for x in group_x2d]
    for h, s in enumerate(seeds):
        rng = np.random.Generator(np.random.PCG64(s))
        for g, y in enumerate(group_y):
            y[h] = rng.standard_normal(y.shape[1:])

    ts = ddim_timesteps(schedule.timesteps, iterations)
    for i in range(iterations):
        t, t_next = ts[i], ts[i + 1]
        for g, (net, _) in enumerate(groups):
            y0_hat = _predict(net, t, group_x2d[g], group_y[g])
            group_y[g] = ddim_step(group_y[g], y0_hat, t, t_next, schedule)

    # Split concatenated groups back into named parts, in local frames.
    part_local: dict[str, np.ndarray] = {}
    for (_, names), y in zip(groups, group_y):
        start = 0
        for name in names:
            size = layout.part(name).size
            part_local[name] = y[..., start : start + size, :] / scale
            start += size

    offsets = offsets_from_body_coords(part_local["body"], layout)
    coords = reconstruct_coords(part_local, offsets, layout)
    return HypothesisSet(np.asarray(frame_ids), coords, seeds)
