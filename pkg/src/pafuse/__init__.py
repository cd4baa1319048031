"""Part-based conditional diffusion for 2D-to-3D whole-body pose lifting."""

from .skeleton import (
    PartSpec,
    PoseSequence,
    RootOffsets,
    SkeletonLayout,
    compute_root_offsets,
    default_layout,
    derive_root_offsets_from_body,
    reconstruct_whole_body,
    shift_to_part_frames,
    split_parts,
)
from .diffusion import (
    HypothesisSet,
    NoiseSchedule,
    cosine_schedule,
    ddim_step,
    derive_seed,
    forward_noise,
    sample_hypotheses,
    timestep_embedding,
)
from .denoiser import (
    DenoiserBank,
    DenoiserConfig,
    allocate_channels,
    build_denoiser,
    count_parameters,
    denoise_predict,
)
from .objective import (
    MetricsBlock,
    MetricsReport,
    aggregate_hypotheses,
    metric_part,
    metric_pb,
    metric_wb,
    mpjpe,
    mse,
    part_loss,
    select_best,
    wb_loss,
)
from .data import (
    DatasetFile,
    SynthConfig,
    Window,
    gap_histogram,
    load_dataset,
    make_windows,
    normalize_2d,
    denormalize_2d,
    save_dataset,
    synth_generate,
)
from .training import TrainConfig, adamw_update, evaluate, train, train_step

__version__ = "0.1.0"
