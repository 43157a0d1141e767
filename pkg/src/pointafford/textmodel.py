"""Trainable text-side components standing in for frozen LLM features: the
hashed bag-of-words text encoder, the mask-label classifier head, and the
one-hot query projection with a straight-through gradient path.
"""

from __future__ import annotations

import re
import zlib

import torch
import torch.nn as nn
import torch.nn.functional as F

from .instructions import N_AFFORDANCE_LABELS

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def hash_tokens(text: str, vocab_size: int) -> list[int]:
    """Lowercase word split hashed into a fixed-size vocabulary.

    Ids come back sorted so that pooling is exactly invariant to token order.
    """
    if not text:
        raise ValueError("text must be non-empty")
    tokens = _TOKEN_RE.findall(text.lower())
    if not tokens:
        raise ValueError(f"no tokens found in {text!r}")
    return sorted(zlib.crc32(tok.encode("utf-8")) % vocab_size for tok in tokens)


class HashTextEncoder(nn.Module):
    """Mean-pooled learned vectors over hashed tokens, projected to out_dim."""

    def __init__(self, out_dim: int, vocab_size: int = 2048):
        super().__init__()
        self.vocab_size = vocab_size
        self.table = nn.Embedding(vocab_size, out_dim)
        self.proj = nn.Linear(out_dim, out_dim)

    def forward(self, texts: list[str]) -> torch.Tensor:
        device = self.table.weight.device
        pooled = []
        for text in texts:
            ids = torch.tensor(hash_tokens(text, self.vocab_size), dtype=torch.long, device=device)
            pooled.append(self.table(ids).mean(dim=0))
        return self.proj(torch.stack(pooled))  # B out_dim


class MaskLabelClassifier(nn.Module):
    """Two-layer head over [text embedding ; pooled point embedding] that
    predicts the affordance mask label."""

    def __init__(self, text_dim: int, point_dim: int, hidden: int = 64, n_labels: int = N_AFFORDANCE_LABELS):
        super().__init__()
        self.fc1 = nn.Linear(text_dim + point_dim, hidden)
        self.fc2 = nn.Linear(hidden, n_labels)

    def forward(self, text_emb, point_global):
        if not (torch.isfinite(text_emb).all() and torch.isfinite(point_global).all()):
            raise ValueError("classifier inputs must be finite")
        x = torch.cat([text_emb, point_global], dim=-1)
        return self.fc2(F.gelu(self.fc1(x)))  # B n_labels


def argmax_one_hot(logits: torch.Tensor) -> torch.Tensor:
    """One-hot of the argmax, ties resolved toward the smallest label id."""
    # torch.max documents that the first maximal index is returned
    idx = torch.max(logits, dim=-1).indices
    return F.one_hot(idx, num_classes=logits.shape[-1]).to(logits.dtype)


class QueryProjection(nn.Module):
    """Projects the predicted label's one-hot vector to the query embedding.

    In training mode the one-hot is routed through a straight-through
    estimator (softmax surrogate) so the loss can reach the label logits.
    """

    def __init__(self, query_dim: int, n_labels: int = N_AFFORDANCE_LABELS):
        super().__init__()
        self.proj = nn.Linear(n_labels, query_dim)

    def forward(self, logits, straight_through: bool | None = None):
        if straight_through is None:
            straight_through = self.training
        one_hot = argmax_one_hot(logits)
        if straight_through:
            soft = logits.softmax(dim=-1)
            one_hot = one_hot + soft - soft.detach()
        return self.proj(one_hot), one_hot
