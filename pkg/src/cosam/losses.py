"""Training objectives.

Segmentation loss = Dice + BCE on logits; error-map loss = weighted BCE
whose positive-class weight counters the error/correct pixel imbalance.
The combined objective keeps the mask losses and the error loss as two
separate minimizations: the trainer routes their gradients to disjoint
parameter sets.
"""

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from cosam.errors import InputError

DICE_EPS = 1.0


@dataclass
class LossValue:
    """Scalar loss with its named sub-terms (tensors keep the graph)."""

    value: torch.Tensor
    breakdown: dict = field(default_factory=dict)

    def item(self) -> float:
        return float(self.value.detach())


def _check_dims(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise InputError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def dice_loss(pred: torch.Tensor, label: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice loss on probabilities; empty-empty pairs score 0 (eps/eps)."""
    _check_dims(pred, label, "dice_loss")
    label = label.to(pred.dtype)
    inter = (pred * label).sum()
    denom = pred.sum() + label.sum()
    return 1.0 - (2.0 * inter + eps) / (denom + eps)


def bce_loss(logits: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy computed stably from logits."""
    _check_dims(logits, label, "bce_loss")
    return F.binary_cross_entropy_with_logits(logits, label.to(logits.dtype))


def seg_loss(logits: torch.Tensor, label: torch.Tensor) -> LossValue:
    """Dice + BCE on the same logits."""
    dice = dice_loss(torch.sigmoid(logits), label)
    bce = bce_loss(logits, label)
    return LossValue(dice + bce, {"dice": dice, "bce": bce})


def balance_weight(n_w: int, n_r: int) -> float:
    """Positive-class weight ln((n_w + n_r) / n_w), with n_w clamped >= 1.

    n_w counts error pixels, n_r correct pixels. The clamp keeps the
    weight finite when the mask is already perfect.
    """
    if n_w < 0 or n_r < 0:
        raise InputError(f"negative pixel counts ({n_w}, {n_r})")
    if n_w + n_r < 1:
        raise InputError("balance weight undefined for an empty error map")
    return math.log((n_w + n_r) / max(n_w, 1))


def error_loss(logits: torch.Tensor, e: torch.Tensor, omega: float) -> torch.Tensor:
    """Weighted BCE for the error map: mean of -[w*e*log s + (1-e)*log(1-s)]."""
    _check_dims(logits, e, "error_loss")
    w = torch.as_tensor(omega, dtype=logits.dtype, device=logits.device)
    return F.binary_cross_entropy_with_logits(logits, e.to(logits.dtype), pos_weight=w)


def total_objective(coarse: torch.Tensor, refined: torch.Tensor, guided: torch.Tensor,
                    label: torch.Tensor, err_logits: torch.Tensor, e: torch.Tensor,
                    lambda_r: float, lambda_g: float,
                    omega: float) -> tuple[LossValue, LossValue]:
    """Combined objective: (mask losses, error loss) as two separate terms.

    Gradient separation is structural: err_logits must come from a forward
    pass whose non-error-decoder inputs were detached, and none of the
    mask logits may depend on the error decoder.
    """
    lc = seg_loss(coarse, label)
    lr = seg_loss(refined, label)
    lg = seg_loss(guided, label)
    mask = LossValue(
        lc.value + lambda_r * lr.value + lambda_g * lg.value,
        {"coarse": lc.value, "refined": lr.value, "guided": lg.value},
    )
    err = error_loss(err_logits, e, omega)
    return mask, LossValue(err, {"error": err})
