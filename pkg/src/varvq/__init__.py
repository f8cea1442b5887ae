"""Variational vector quantization at desk scale.

A numpy implementation of a VQ tokenizer trained through a variational
latent: reparameterized sampling ahead of nearest-codeword quantization with
dual-path decoding, a variance-weighted soft alignment between codewords and
posterior means, and a closed-form Wasserstein regularizer pulling the
codebook's empirical moments toward the standard normal prior.  Includes an
ablation harness over the five standard configurations and a CLI.
"""

from .codebook import (
    AssignmentBatch,
    Codebook,
    assign,
    codebook_moments,
    ema_update,
    init_codebook,
    nearest_codeword,
    record_usage,
    reset_usage,
    utilization,
)
from .data import (
    ImageBatch,
    PgmFormatError,
    generate_mixture,
    generate_synthetic,
    load_dataset,
    read_pgm,
    save_dataset,
    split_dataset,
    write_pgm,
)
from .losses import (
    LossBreakdown,
    LossConfig,
    dcr_gradient,
    dcr_loss,
    hard_alignment_loss,
    kl_loss,
    rcs_loss,
    reconstruction_loss,
    total_loss,
)
from .metrics import EvalReport, perplexity, psnr, ssim
from .model import (
    AdamState,
    Model,
    TrainingDiverged,
    adam_step,
    compute_gradients,
    cosine_lr,
    decode,
    encode,
    forward_loss,
    init_adam_state,
    init_model,
)
from .numerics import (
    finite_difference_gradient,
    gaussian_w2_squared,
    mean_vector,
    sample_covariance,
    sym_sqrt,
)
from .quantizer import (
    LatentGaussian,
    QuantizationResult,
    dual_path_forward,
    quantize_batch,
    reparameterize,
)
from .trainer import (
    Checkpoint,
    CheckpointFormatError,
    ConfigError,
    TrainConfig,
    evaluate,
    load_checkpoint,
    make_config,
    report_ablation,
    save_checkpoint,
    train_run,
)

__version__ = "0.1.0"
