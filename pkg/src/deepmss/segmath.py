"""Segmentation losses (soft Dice + Focal) and the DSC evaluation metric.

All functions accept torch tensors or numpy arrays of matching shape.
By default a tensor is treated as a single channel; pass ``channel_axis``
to compute per-channel losses and average them (training uses axis 1 of
(B, C, D, H, W) tensors).
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import ShapeMismatchError

SMOOTH_DEFAULT = 1.0
FOCAL_ALPHA_DEFAULT = 0.25
FOCAL_GAMMA_DEFAULT = 2.0
PROB_EPS = 1e-7


def _as_pair(pred, target):
    p = torch.as_tensor(pred)
    g = torch.as_tensor(target, dtype=p.dtype, device=p.device)
    if p.shape != g.shape:
        raise ShapeMismatchError(f"prediction {tuple(p.shape)} vs target {tuple(g.shape)}")
    return p, g


def _per_channel(fn, p, g, channel_axis):
    if channel_axis is None:
        return fn(p.reshape(-1), g.reshape(-1))
    p = torch.movedim(p, channel_axis, 0)
    g = torch.movedim(g, channel_axis, 0)
    losses = [fn(p[c].reshape(-1), g[c].reshape(-1)) for c in range(p.shape[0])]
    return torch.stack(losses).mean()


def dice_loss(pred, target, smooth: float = SMOOTH_DEFAULT, channel_axis: int | None = None):
    """Soft Dice loss with squared-denominator form:

    1 - (2 sum(p*g) + smooth) / (sum(p^2) + sum(g^2) + smooth)

    computed per channel and averaged. Zero when pred equals a binary target.
    """
    if not smooth > 0:
        raise ValueError(f"smooth must be > 0, got {smooth}")
    p, g = _as_pair(pred, target)

    def one(pc, gc):
        inter = (pc * gc).sum()
        denom = pc.pow(2).sum() + gc.pow(2).sum()
        return 1.0 - (2.0 * inter + smooth) / (denom + smooth)

    return _per_channel(one, p, g, channel_axis)


def focal_loss(
    pred,
    target,
    alpha: float = FOCAL_ALPHA_DEFAULT,
    gamma: float = FOCAL_GAMMA_DEFAULT,
    channel_axis: int | None = None,
):
    """Focal loss, mean over voxels.

    Per voxel with p_t = p if g=1 else 1-p and alpha_t likewise:
    -alpha_t (1 - p_t)^gamma log(p_t). Probabilities are clamped to
    [PROB_EPS, 1 - PROB_EPS] before the log.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    p, g = _as_pair(pred, target)

    def one(pc, gc):
        pc = pc.clamp(PROB_EPS, 1.0 - PROB_EPS)
        p_t = torch.where(gc > 0.5, pc, 1.0 - pc)
        a_t = torch.where(gc > 0.5, torch.full_like(pc, alpha), torch.full_like(pc, 1.0 - alpha))
        return (-a_t * (1.0 - p_t).pow(gamma) * torch.log(p_t)).mean()

    return _per_channel(one, p, g, channel_axis)


def seg_loss(pred, target, channel_axis: int | None = None):
    """Segmentation training objective: dice_loss + focal_loss with defaults."""
    return dice_loss(pred, target, channel_axis=channel_axis) + focal_loss(
        pred, target, channel_axis=channel_axis
    )


def dsc_metric(mask_a, mask_b) -> float:
    """Dice similarity 2|A∩B| / (|A|+|B|) between binary masks.

    Both masks empty -> 1.0; exactly one empty -> 0.0.
    """
    a = np.asarray(mask_a)
    b = np.asarray(mask_b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mask shapes disagree: {a.shape} vs {b.shape}")
    a = a > 0.5
    b = b > 0.5
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def binarize(probabilities, threshold: float = 0.5) -> np.ndarray:
    """Threshold a probability map into a {0,1} mask (uint8)."""
    p = probabilities.detach().cpu().numpy() if torch.is_tensor(probabilities) else np.asarray(probabilities)
    return (p > threshold).astype(np.uint8)
