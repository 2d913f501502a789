"""Training loss: equal-weighted sum of pixel cross-entropy and soft Dice."""

from __future__ import annotations

import torch
import torch.nn.functional as F

DICE_EPS = 1e-5


def soft_dice_loss(
    probs: torch.Tensor,
    gt_onehot: torch.Tensor,
    eps: float = DICE_EPS,
    include_background: bool = False,
) -> torch.Tensor:
    """1 - mean over classes of (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps).

    ``probs`` is (B, K, H, W) post-softmax, ``gt_onehot`` the matching
    one-hot target. Sums run over batch and space per class; background
    (class 0) is excluded from the mean unless requested.
    """
    if probs.shape != gt_onehot.shape:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs gt {tuple(gt_onehot.shape)}")
    dims = (0, 2, 3)
    numer = 2.0 * (probs * gt_onehot).sum(dims) + eps
    denom = probs.sum(dims) + gt_onehot.sum(dims) + eps
    dice = numer / denom
    if not include_background and dice.shape[0] > 1:
        dice = dice[1:]
    return 1.0 - dice.mean()


def combined_loss(logits: torch.Tensor, gt_labels: torch.Tensor) -> torch.Tensor:
    """0.5 * cross-entropy + 0.5 * soft Dice over softmax probabilities."""
    if logits.ndim != 4:
        raise ValueError(f"logits must be (B, K, H, W), got shape {tuple(logits.shape)}")
    if gt_labels.shape != (logits.shape[0], logits.shape[2], logits.shape[3]):
        raise ValueError(
            f"gt_labels shape {tuple(gt_labels.shape)} inconsistent with logits {tuple(logits.shape)}"
        )
    num_classes = logits.shape[1]
    ce = F.cross_entropy(logits, gt_labels)
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(gt_labels, num_classes).permute(0, 3, 1, 2).to(logits.dtype)
    return 0.5 * ce + 0.5 * soft_dice_loss(probs, onehot)
