"""Diffusion-based semantic image transmission.

The transmitter pushes an image part-way through forward diffusion so
the injected noise matches the channel SNR, normalizes power, and
pre-compensates fading; channel noise then lands inside the diffusion
state. The receiver re-tags the signal with its effective timestep and
runs attention-guided reverse diffusion, spending more steps on
important patches.
"""

from .channel import (
    ChannelConfig,
    ChannelRealization,
    apply_channel,
    noise_std_for_snr,
    precompensate,
    sample_channel,
)
from .codec import (
    LatentSignal,
    MaskSchedule,
    StepAllocation,
    TransmissionReport,
    align_received,
    allocate_steps,
    build_mask_schedule,
    decode,
    encode,
    importance_weights,
    reverse_diffuse,
    transmit,
)
from .config import ExperimentConfig, config_hash, load_experiment_config
from .denoiser import (
    AttentionMap,
    DenoiserConfig,
    DenoiserNetwork,
    build_denoiser,
    count_parameters,
    estimate_macs,
    extract_attention,
    predict_noise,
    preset,
)
from .errors import (
    ChannelTooNoisyError,
    CheckpointMismatchError,
    ConfigurationError,
    IngestionError,
)
from .harness import (
    DatasetHandle,
    ProfileReport,
    SweepResult,
    SweepRow,
    emit_report,
    ingest_dataset,
    profile,
    run_sweep,
    synthetic_image,
)
from .metrics import MetricReport, ms_ssim, psnr, to_uint8
from .schedule import (
    NoiseSchedule,
    ReverseStepCoeffs,
    build_schedule,
    jump_coeffs,
    reverse_coeffs,
    snr_of_timestep,
    timestep_for_snr,
)
from .training import (
    LossBreakdown,
    TrainingConfig,
    denoise_loss,
    load_checkpoint,
    make_optimizer,
    reconstruction_loss,
    run_training,
    save_checkpoint,
    total_loss,
    train_step,
)

__version__ = "0.1.0"
