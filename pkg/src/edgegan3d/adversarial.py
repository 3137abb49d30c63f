"""Conditional patch discriminator and the segmentation/adversarial losses."""

from dataclasses import dataclass

import torch
import torch.nn as nn

DICE_EPS = 1e-5


class _InstanceNorm(nn.InstanceNorm3d):
    # a single spatial element normalizes to zero; torch refuses it in training mode
    def forward(self, x):
        if x.shape[2:].numel() == 1:
            return x - x
        return super().forward(x)


class PatchDiscriminator(nn.Module):
    """Scores (image, mask) pairs on a coarse grid of overlapping patches.

    Four stride-2 4x4x4 conv blocks (leaky ReLU 0.2, instance norm from the
    second block on) followed by a 3x3x3 projection to one channel. Outputs
    are raw scores for the least-squares objective.
    """

    def __init__(self, in_channels=2, base=32):
        super().__init__()
        widths = [base, base * 2, base * 4, base * 8]
        layers = []
        c_in = in_channels
        for i, c in enumerate(widths):
            layers.append(nn.Conv3d(c_in, c, 4, stride=2, padding=1))
            if i > 0:
                layers.append(_InstanceNorm(c))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            c_in = c
        layers.append(nn.Conv3d(c_in, 1, 3, padding=1))
        self.model = nn.Sequential(*layers)

    def forward(self, x, m):
        if x.shape[0] != m.shape[0] or x.shape[2:] != m.shape[2:]:
            raise ValueError(f"image {tuple(x.shape)} and mask {tuple(m.shape)} are not aligned")
        return self.model(torch.cat([x, m.to(x.dtype)], dim=1))


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be non-negative, got alpha={self.alpha}, beta={self.beta}")


def dice_loss(p: torch.Tensor, t: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice loss ``1 - (2 sum(pt) + eps) / (sum(p) + sum(t) + eps)``."""
    if p.shape != t.shape:
        raise ValueError(f"dice_loss shape mismatch: {tuple(p.shape)} vs {tuple(t.shape)}")
    t = t.to(p.dtype)
    inter = (p * t).sum()
    return 1 - (2 * inter + eps) / (p.sum() + t.sum() + eps)


def lsgan_d_loss(real_scores, fake_scores):
    return ((real_scores - 1) ** 2).mean() + (fake_scores**2).mean()


def lsgan_g_loss(fake_scores):
    return ((fake_scores - 1) ** 2).mean()


def discriminator_loss(disc, x, y, g):
    """Least-squares discriminator objective; ``g`` is detached."""
    return lsgan_d_loss(disc(x, y), disc(x, g.detach()))


def generator_loss(disc, x, y, y_edge, g, g_edge, weights: LossWeights = LossWeights()):
    """Adversarial term plus weighted Dice on the mask and on the edge map.

    Returns the total and a dict of the three unweighted terms.
    """
    adv = lsgan_g_loss(disc(x, g))
    seg = dice_loss(g, y)
    total = adv + weights.alpha * seg
    edge = torch.zeros((), dtype=g.dtype)
    if weights.beta > 0:
        if g_edge is None or y_edge is None:
            raise ValueError("beta > 0 needs both predicted and ground-truth edge maps")
        edge = dice_loss(g_edge, y_edge)
        total = total + weights.beta * edge
    return total, {"adv": adv.detach(), "dice": seg.detach(), "edge_dice": edge.detach()}
