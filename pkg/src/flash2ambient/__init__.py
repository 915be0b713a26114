"""Attention-guided conditional adversarial translation of flash photographs to ambient lighting."""

from .imagecore import apply_attention, attention_map, paired_augment, resize_canonical
from .losses import (
    LossBreakdown,
    discriminator_loss,
    generator_adversarial_loss,
    guided_reconstruction_loss,
    reconstruction_loss,
    total_generator_loss,
)
from .metrics import EvalReport, evaluate, psnr, ssim
from .networks import DiscriminatorSpec, GeneratorSpec, ModelBundle, load_checkpoint, save_checkpoint
from .trainer import Ablation, RunConfig, run_ablation_matrix, train, train_step

__version__ = "0.1.0"
