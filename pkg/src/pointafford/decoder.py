"""Affordance decoder: fuses per-point embeddings, raw coordinates and the
broadcast query embedding into a per-point score map in (0, 1).
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class AffordanceDecoder(nn.Module):
    """Pointwise conv -> batch norm -> ReLU -> pointwise conv -> sigmoid.

    Train mode normalizes with batch statistics; eval mode uses the running
    statistics, making inference independent of batch composition (and every
    point's score a function of only its own inputs).
    """

    def __init__(self, point_dim: int, query_dim: int, hidden: int | None = None):
        super().__init__()
        if hidden is None:
            hidden = max(16, point_dim // 2)
        # kernel-size-1 convolutions written as shared per-point linear maps;
        # the channel-last layout keeps results position-independent bitwise
        self.conv1 = nn.Linear(point_dim + 3 + query_dim, hidden)
        self.bn = nn.BatchNorm1d(hidden, momentum=0.1, eps=1e-5)
        self.conv2 = nn.Linear(hidden, 1)

    def forward(self, p_em, xyz, q):
        """
        p_em : B N Dp   per-point embeddings
        xyz  : B N 3    raw coordinates
        q    : B Dq     query embedding, broadcast to every point
        returns B N scores in (0, 1)
        """
        b, n, _ = p_em.shape
        if xyz.shape[:2] != (b, n):
            raise ValueError("p_em and xyz row counts disagree")
        if not self.training and int(self.bn.num_batches_tracked) == 0:
            raise RuntimeError("eval-mode decode before any training step: running statistics are uninitialized")
        x = torch.cat([p_em, xyz, q.unsqueeze(1).expand(b, n, q.shape[-1])], dim=-1)
        h = self.conv1(x).transpose(1, 2)  # B H N for per-channel normalization
        h = F.relu(self.bn(h)).transpose(1, 2)
        return torch.sigmoid(self.conv2(h)).squeeze(-1)  # B N
