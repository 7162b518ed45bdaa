"""Adversarial objectives and generator regularizers.

Sign conventions: the critic is trained to score modified images high and
real healthy images low, so it minimizes ``mean(D(x0)) - mean(D(x_hat0))``;
the generator minimizes ``mean(D(x_hat0))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from . import diffcore
from .diffcore import ShapeError


@dataclass(frozen=True)
class LossWeights:
    lambda_reg_g: float = 10.0
    lambda_reg_d: float = 10.0

    def __post_init__(self):
        if self.lambda_reg_g < 0 or self.lambda_reg_d < 0:
            raise ValueError("loss weights must be non-negative")


def _nonempty(name: str, t: torch.Tensor) -> None:
    if t.numel() == 0:
        raise ValueError(f"{name}: empty batch")


def critic_loss(scores_real: torch.Tensor, scores_fake: torch.Tensor) -> torch.Tensor:
    _nonempty("critic_loss", scores_real)
    _nonempty("critic_loss", scores_fake)
    return scores_real.mean() - scores_fake.mean()


def generator_adv_loss(scores_fake: torch.Tensor) -> torch.Tensor:
    _nonempty("generator_adv_loss", scores_fake)
    return scores_fake.mean()


def gradient_penalty(critic, x0: torch.Tensor, x_hat0: torch.Tensor,
                     rng: torch.Generator | None = None) -> torch.Tensor:
    """Mean of ``(||grad D(x_tilde)|| - 1)^2`` over random interpolates.

    One mixing coefficient per batch element, broadcast over its pixels.
    The result stays on the graph of the critic's parameters.
    """
    if x0.shape != x_hat0.shape:
        raise ShapeError(
            f"gradient_penalty: real {tuple(x0.shape)} vs fake {tuple(x_hat0.shape)}"
        )
    _nonempty("gradient_penalty", x0)
    n = x0.shape[0]
    alpha = torch.rand(n, generator=rng, dtype=x0.dtype)
    alpha = alpha.reshape(n, *([1] * (x0.dim() - 1)))
    x_tilde = (1 - alpha) * x0.detach() + alpha * x_hat0.detach()
    # samples are independent inside the critic, so the gradient of the
    # summed scores gives each sample's own input gradient
    grads = diffcore.input_gradient(lambda x: critic(x).sum(), x_tilde)
    norms = diffcore.norm(grads.reshape(n, -1), axis=1)
    return ((norms - 1) ** 2).mean()


def tv_penalty(field: torch.Tensor, batched: bool = True) -> torch.Tensor:
    """Total variation of a displacement field, averaged over the batch.

    For each pixel, sums the Euclidean distance to every grid neighbour
    (4 in 2-D, 6 in 3-D; fewer on the border) and divides by the pixel
    count. Each neighbouring pair is therefore counted once from each side.
    ``field`` is ``(N, D, *S)``, or ``(D, *S)`` with ``batched=False``.
    """
    field = torch.as_tensor(field)
    if not batched:
        field = field[None]
    nd = field.dim() - 2
    if field.shape[1] != nd:
        raise ShapeError(f"tv_penalty: field {tuple(field.shape)} is not (N, D, *S) with D == ndim")
    n_pixels = 1
    for s in field.shape[2:]:
        n_pixels *= s
    total = torch.zeros(field.shape[0], dtype=field.dtype)
    for axis in range(2, field.dim()):
        size = field.shape[axis]
        if size < 2:
            continue
        diff = field.narrow(axis, 1, size - 1) - field.narrow(axis, 0, size - 1)
        dist = diffcore.norm(diff, axis=1)
        total = total + 2 * dist.reshape(field.shape[0], -1).sum(dim=1)
    return (total / n_pixels).mean()


def l1_map_penalty(x1: torch.Tensor, x_hat0: torch.Tensor, batched: bool = True) -> torch.Tensor:
    """Sum of absolute changes per image, averaged over the batch."""
    if x1.shape != x_hat0.shape:
        raise ShapeError(f"l1_map_penalty: {tuple(x1.shape)} vs {tuple(x_hat0.shape)}")
    diff = (x_hat0 - x1).abs()
    if not batched or diff.dim() < 2:
        return diff.sum()
    return diff.reshape(diff.shape[0], -1).sum(dim=1).mean()


def generator_objective(adv, reg, w: LossWeights):
    return adv + w.lambda_reg_g * reg


def critic_objective(ld, penalty, w: LossWeights):
    return ld + w.lambda_reg_d * penalty
