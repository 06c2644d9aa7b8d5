"""Semantic video transmission over fading channels with diffusion compensation.

GoP-structured semantic coding (I frame + motion-compensated residuals), a
Rayleigh channel with MMSE equalization, and receiver-side decoupled
diffusion compensation of the P frames, built on a small numpy autodiff
kernel so every component is trainable end to end.
"""

from .channel import (
    ChannelRealization,
    make_realization,
    pack_complex,
    sample_rayleigh,
    snr_to_sigma2,
    transmit_equalized,
    unpack_complex,
)
from .data import (
    ClipFormatError,
    MotionSpec,
    VideoClip,
    generate_clip,
    parse_motion,
    read_clip,
    write_clip,
)
from .ddmfc import (
    CompensationParams,
    DdmfcTrace,
    combine_noise,
    compose_p_frame,
    ddmfc_sample,
    final_step,
    remove_base_noise,
    reverse_step_p,
    run_base_chain,
    start_point,
)
from .diffusion import (
    NoisePredictor,
    NoiseSchedule,
    SteeringConfig,
    build_schedule,
    find_start_step,
    forward_sample,
    reverse_step_reference,
    steering_term,
)
from .metrics import MetricReport, ms_ssim, psnr
from .models import (
    MfaModule,
    MotionCoder,
    NetNoisePredictor,
    ResidualPredictor,
    SemanticCodec,
    UNetLite,
    zigzag_order,
)
from .pipeline import (
    ExperimentConfig,
    GopBundle,
    OracleNoisePredictor,
    SystemModels,
    cbr_of,
    evaluate,
    loss_diffusion,
    loss_reconstruction,
    mean_psnr_by,
    train_stage,
    transmit_gop,
)

__version__ = "0.1.0"
