"""Attention-guided reconstruction loss, adversarial objectives and the weighted total."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .imagecore import InvalidPairError, apply_attention


class NumericError(ArithmeticError):
    """Scores or losses are NaN/inf."""


def _tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"{what} contains non-finite values")


def reconstruction_loss(ambient_masked, output_masked) -> torch.Tensor:
    """Mean absolute difference of two (already attention-masked) images."""
    a, o = _tensor(ambient_masked), _tensor(output_masked)
    if a.shape != o.shape:
        raise InvalidPairError(f"shape mismatch: {tuple(a.shape)} vs {tuple(o.shape)}")
    return (a - o).abs().mean()


def guided_reconstruction_loss(ambient, output, attention) -> torch.Tensor:
    """Mask both images with ``attention`` and take their mean L1 distance.

    The gradient w.r.t. ``output`` vanishes wherever the attention is zero.
    """
    ambient, output, attention = _tensor(ambient), _tensor(output), _tensor(attention)
    return reconstruction_loss(apply_attention(ambient, attention), apply_attention(output, attention))


def discriminator_loss(d_real, d_fake) -> torch.Tensor:
    """``-mean(log d_real) - mean(log(1 - d_fake))`` for probability scores."""
    d_real, d_fake = _tensor(d_real), _tensor(d_fake)
    _check_finite(d_real, "d_real")
    _check_finite(d_fake, "d_fake")
    return -torch.log(d_real).mean() - torch.log1p(-d_fake).mean()


def generator_adversarial_loss(d_fake) -> torch.Tensor:
    """Non-saturating generator loss ``-mean(log d_fake)``."""
    d_fake = _tensor(d_fake)
    _check_finite(d_fake, "d_fake")
    return -torch.log(d_fake).mean()


def discriminator_loss_logits(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Same value as :func:`discriminator_loss` on ``sigmoid`` of the logits, without log(0)."""
    _check_finite(real_logits, "real logits")
    _check_finite(fake_logits, "fake logits")
    return -F.logsigmoid(real_logits).mean() - F.logsigmoid(-fake_logits).mean()


def generator_adversarial_loss_logits(fake_logits: torch.Tensor) -> torch.Tensor:
    _check_finite(fake_logits, "fake logits")
    return -F.logsigmoid(fake_logits).mean()


def total_generator_loss(rec, adv_g, lam: float):
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    return rec + lam * adv_g


@dataclass(frozen=True)
class LossBreakdown:
    reconstruction: float
    adversarial_d: float | None
    adversarial_g: float
    total_g: float
    lam: float

    def record(self, **extra) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        out.update(extra)
        return out
