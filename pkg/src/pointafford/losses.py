"""Training objectives: contrastive batch-average alignment, pointwise BCE,
Dice, their weighted combination, and the label query loss.

All functions are differentiable torch expressions and accept float32 or
float64 tensors (gradient tests run in float64).
"""

from __future__ import annotations

import torch


def contrastive_batch_average(point_emb, text_emb, eps: float = 1e-8, p: float = 2.0, margin: float = 1.0):
    """Alignment loss over a batch of row-matched (point, text) embedding pairs.

    Matched term: mean over rows of ||P_i - T_i + eps * 1||_p (the eps * ones
    offset guards the norm's gradient at zero). Mismatched term: mean over all
    ordered pairs i != j of max(0, margin - ||P_i - T_j + eps * 1||_p); zero
    when the batch has a single row.
    """
    if point_emb.shape != text_emb.shape:
        raise ValueError(
            f"embedding shape mismatch: {tuple(point_emb.shape)} vs {tuple(text_emb.shape)}"
        )
    if point_emb.ndim != 2:
        raise ValueError("expected B x D embedding matrices")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if p < 1:
        raise ValueError("norm order p must be >= 1")
    b = point_emb.shape[0]
    matched = torch.linalg.vector_norm(point_emb - text_emb + eps, ord=p, dim=-1).mean()
    if b == 1:
        return matched
    cross = point_emb.unsqueeze(1) - text_emb.unsqueeze(0) + eps  # B B D
    dist = torch.linalg.vector_norm(cross, ord=p, dim=-1)
    hinge = torch.clamp(margin - dist, min=0.0)
    off_diag = ~torch.eye(b, dtype=torch.bool, device=dist.device)
    mismatched = hinge[off_diag].mean()
    return matched + mismatched


def bce_pointwise(pred, target):
    """Mean binary cross-entropy with soft targets; predictions are clamped
    to [1e-7, 1 - 1e-7] before the logs."""
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    m = torch.clamp(pred, 1e-7, 1.0 - 1e-7)
    return -(target * torch.log(m) + (1.0 - target) * torch.log(1.0 - m)).mean()


def dice_loss(pred, target, smooth: float = 1e-6):
    """1 - (2 * sum(m*g) + smooth) / (sum(m) + sum(g) + smooth)."""
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    inter = (pred * target).sum()
    total = pred.sum() + target.sum()
    return 1.0 - (2.0 * inter + smooth) / (total + smooth)


def affordance_loss(pred, target, lambda_dice: float = 1.0, smooth: float = 1e-6):
    """Combined per-point objective: BCE + lambda * Dice."""
    return bce_pointwise(pred, target) + lambda_dice * dice_loss(pred, target, smooth)


def query_loss(logits, target):
    """Softmax cross-entropy of label logits against the target class id.

    Accepts a single logit vector or a batch (mean-reduced). The target may be
    an int or a tensor of ids.
    """
    if logits.ndim == 1:
        logits = logits.unsqueeze(0)
    target = torch.as_tensor(target, dtype=torch.long, device=logits.device).reshape(-1)
    n_classes = logits.shape[-1]
    if target.numel() != logits.shape[0]:
        raise ValueError("one target id per logit row required")
    if ((target < 0) | (target >= n_classes)).any():
        raise ValueError(f"target label out of range [0, {n_classes})")
    log_norm = torch.logsumexp(logits, dim=-1)
    picked = logits.gather(1, target.unsqueeze(1)).squeeze(1)
    return (log_norm - picked).mean()
