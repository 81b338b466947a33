"""Training objectives for the learned quantizers.

Probability maps are ``(B, C, H, W)``; every per-image quantity is
averaged over the batch.  Entropies are in nats.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericalError

ROW_NORM_FLOOR = 1e-8


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 1.0  # regularizer
    lambda_: float = 3.0  # relationship-preserving imitation
    alpha: float = 1.0  # image-wise entropy regularizer
    beta: float = 1.0  # pixel-wise confidence regularizer

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {value}")

    def to_dict(self) -> dict:
        return asdict(self)


def classification_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy for index targets, mean sigmoid BCE for binary targets."""
    if target.ndim == logits.ndim:
        if target.shape != logits.shape:
            raise ValueError(f"target shape {tuple(target.shape)} != logits {tuple(logits.shape)}")
        return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype))
    if target.ndim != logits.ndim - 1 or target.shape[0] != logits.shape[0]:
        raise ValueError(f"target shape {tuple(target.shape)} incompatible with logits "
                         f"{tuple(logits.shape)}")
    return F.cross_entropy(logits, target.long())


def kd_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    """KL(teacher || student) between temperature-1 softmax distributions."""
    if student_logits.shape != teacher_logits.shape:
        raise ValueError("student and teacher logits differ in shape")
    return F.kl_div(student_logits.log_softmax(-1), teacher_logits.log_softmax(-1),
                    reduction="batchmean", log_target=True)


def _entropy(p: torch.Tensor, dim: int) -> torch.Tensor:
    # 0 * log 0 := 0, with a zero gradient at exact zeros
    safe = torch.where(p > 0, p, torch.ones_like(p))
    return -(p * safe.log()).sum(dim)


def r_color(m: torch.Tensor) -> torch.Tensor:
    """Minus the mean over colors of each color's peak probability in the image."""
    return -m.amax(dim=(2, 3)).mean(dim=1).mean()


def r_info(m: torch.Tensor) -> torch.Tensor:
    """Minus the entropy of the pixel-averaged color distribution."""
    return -_entropy(m.mean(dim=(2, 3)), dim=1).mean()


def r_conf(m: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel entropy of the color distribution."""
    return _entropy(m, dim=1).mean()


def combined_regularizer(m: torch.Tensor, weights: LossWeights, mode: str = "colorcnn_plus"
                         ) -> torch.Tensor:
    if mode == "colorcnn":
        return r_color(m)
    reg = r_color(m)
    if weights.alpha:
        reg = reg + weights.alpha * r_info(m)
    if weights.beta:
        reg = reg + weights.beta * r_conf(m)
    return reg


def sample_pixels(height: int, width: int, ratio: float = 0.3, seed: int = 0) -> torch.Tensor:
    """Uniform sample without replacement of ``round(ratio * H * W)`` flat indices."""
    total = height * width
    n = max(2, int(round(ratio * total)))
    if n > total:
        raise ValueError(f"cannot sample {n} of {total} pixels")
    idx = np.random.default_rng(seed).choice(total, size=n, replace=False)
    return torch.from_numpy(np.sort(idx))


def _row_normalized_gram(flat: torch.Tensor) -> torch.Tensor:
    gram = torch.einsum("bcn,bcm->bnm", flat, flat)
    norm = gram.norm(dim=2, keepdim=True).clamp_min(ROW_NORM_FLOOR)
    return gram / norm


def relationship_loss(m: torch.Tensor, m_star: torch.Tensor,
                      sample: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared gap between row-normalized pixel-correlation matrices.

    ``m`` and ``m_star`` are ``(B, C, H, W)`` and ``(B, C', H, W)``
    assignments; only the ``N`` sampled pixels enter the ``N x N``
    correlation matrices, so ``C`` and ``C'`` may differ.  The result is
    invariant to relabeling the colors of either argument.
    """
    if m.shape[0] != m_star.shape[0] or m.shape[2:] != m_star.shape[2:]:
        raise ValueError("assignments are not spatially aligned")
    flat = m.flatten(2)
    flat_star = m_star.to(m.dtype).flatten(2)
    if sample is not None:
        flat, flat_star = flat[..., sample], flat_star[..., sample]
    n = flat.shape[-1]
    diff = _row_normalized_gram(flat) - _row_normalized_gram(flat_star)
    return (diff ** 2).sum(dim=(1, 2)).mean() / n


def total_loss(ce: torch.Tensor, rp: torch.Tensor | float, reg: torch.Tensor | float,
               weights: LossWeights) -> torch.Tensor:
    """``ce + lambda * rp + gamma * reg``; non-finite parts raise :class:`NumericalError`."""
    for name, value in (("classification", ce), ("relationship", rp), ("regularizer", reg)):
        v = value.detach() if torch.is_tensor(value) else torch.tensor(value)
        if not torch.isfinite(v).all():
            raise NumericalError(f"non-finite {name} loss: {v.item() if v.numel() == 1 else v}")
    return ce + weights.lambda_ * rp + weights.gamma * reg

