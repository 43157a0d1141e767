"""Geometric-guided point encoder: patch features, gated geometric
cross-attention transformer blocks, and feature propagation back to every point.

All modules operate on batched tensors; grouping indices come from
:mod:`pointafford.cloud` and are treated as constants (no gradient flows
through point selection).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F


class EncoderNumericsError(RuntimeError):
    """Non-finite activations appeared inside the encoder."""


@dataclass
class EncoderConfig:
    model_dim: int = 64
    n_layers: int = 3
    n_heads: int = 4
    n_groups: int = 8
    group_size: int = 64
    propagation_knn: int = 16
    out_dim: int = 64

    def __post_init__(self):
        if self.model_dim <= 0 or self.out_dim <= 0:
            raise ValueError("model_dim and out_dim must be positive")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.model_dim % self.n_heads != 0:
            raise ValueError("model_dim must be divisible by n_heads")

    def to_dict(self) -> dict:
        return asdict(self)


class PatchEmbed(nn.Module):
    """Shared pointwise feature map, max-pooled per patch, plus a learned
    positional map of the absolute patch center coordinates."""

    def __init__(self, dim: int):
        super().__init__()
        self.point_mlp = nn.Sequential(
            nn.Linear(3, dim),
            nn.GELU(),
            nn.Linear(dim, dim),
        )
        self.pos_mlp = nn.Sequential(
            nn.Linear(3, dim),
            nn.GELU(),
            nn.Linear(dim, dim),
        )

    def forward(self, rel_coords, centers):
        """
        rel_coords : B K G 3   member coordinates relative to their center
        centers    : B K 3     absolute center coordinates
        returns f, p : B K D
        """
        if rel_coords.shape[-1] != 3 or centers.shape[-1] != 3:
            raise ValueError("expected 3-d coordinates")
        f = self.point_mlp(rel_coords).max(dim=2).values  # B K D
        p = self.pos_mlp(centers)  # B K D
        return f, p


class GeometricExtract(nn.Module):
    """Token-wise two-layer map producing geometric tokens from f + p."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, f, p):
        if f.shape != p.shape:
            raise ValueError(f"f/p shape mismatch: {tuple(f.shape)} vs {tuple(p.shape)}")
        return self.fc2(F.gelu(self.fc1(f + p)))  # B K D


class SelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, return_attn: bool = False):
        b, k, d = x.shape
        qkv = self.qkv(x).reshape(b, k, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, kk, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ kk.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(b, k, d)
        out = self.proj(x)
        return (out, attn) if return_attn else out


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + feed-forward, followed by the geometric
    cross-attention residual gated by a learnable scalar (initialized to 0 so
    training starts on the plain transformer path)."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.gate = nn.Parameter(torch.zeros(()))
        self.scale = 1.0 / math.sqrt(dim)

    def cross_attention(self, feats, geo_tokens, return_attn: bool = False):
        """Row-wise softmax attention of layer features onto geometric tokens."""
        scores = feats @ geo_tokens.transpose(-2, -1) * self.scale  # B K K
        attn = scores.softmax(dim=-1)
        out = attn @ geo_tokens
        return (out, attn) if return_attn else out

    def forward(self, x, geo_tokens):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x + self.gate * self.cross_attention(x, geo_tokens)


def knn_indices(points, k: int):
    """k nearest neighbors of every point, self excluded, ties by index.

    points : B N 3 -> int64 B N k
    """
    n = points.shape[1]
    k = min(k, n - 1)
    d2 = torch.cdist(points, points, compute_mode="donot_use_mm_for_euclid_dist") ** 2
    order = torch.argsort(d2, dim=-1, stable=True)  # self first (distance 0)
    return order[..., 1 : k + 1]


def interpolate_to_points(feats, centers, points, n_neighbors: int = 3):
    """Inverse-distance interpolation of patch features onto every point.

    feats   : B K D   per-patch features
    centers : B K 3   patch center coordinates
    points  : B N 3   target coordinates
    Uses the min(3, K) nearest centers with weights 1/(d + 1e-8), normalized.
    """
    b, k, d = feats.shape
    m = min(n_neighbors, k)
    dist = torch.cdist(points, centers, compute_mode="donot_use_mm_for_euclid_dist")  # B N K
    order = torch.argsort(dist, dim=-1, stable=True)[..., :m]  # B N m
    near = torch.gather(dist, -1, order)
    w = 1.0 / (near + 1e-8)
    w = w / w.sum(dim=-1, keepdim=True)
    idx = order.unsqueeze(-1).expand(b, points.shape[1], m, d)
    gathered = torch.gather(feats.unsqueeze(1).expand(b, points.shape[1], k, d), 2, idx)
    return (w.unsqueeze(-1) * gathered).sum(dim=2)  # B N D


class EdgeConv(nn.Module):
    """Graph refinement: shared two-layer map of [x_i, x_j - x_i] per edge,
    max over neighbors.

    The first layer is evaluated in decomposed form,
    W [x_i ; x_j - x_i] = (W1 - W2) x_i + W2 x_j, so only hidden-width
    activations are gathered per edge instead of full edge features.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: int | None = None):
        super().__init__()
        self.in_dim = in_dim
        hidden = hidden or min(out_dim, 32)
        self.fc1 = nn.Linear(2 * in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x, neighbor_idx):
        """
        x            : B N F
        neighbor_idx : B N k
        """
        b, n, _ = x.shape
        k = neighbor_idx.shape[-1]
        w_center = self.fc1.weight[:, : self.in_dim]
        w_diff = self.fc1.weight[:, self.in_dim :]
        h_center = x @ (w_center - w_diff).t() + self.fc1.bias  # B N h
        h_neigh = x @ w_diff.t()  # B N h
        hdim = h_neigh.shape[-1]
        idx = neighbor_idx.reshape(b, n * k, 1).expand(b, n * k, hdim)
        gathered = torch.gather(h_neigh, 1, idx).reshape(b, n, k, hdim)
        edge = F.gelu(h_center.unsqueeze(2) + gathered)
        return self.fc2(edge).max(dim=2).values  # B N out


class FeaturePropagation(nn.Module):
    """Upsample selected patch-level feature maps to all points and refine
    them with an edge convolution over the point knn graph."""

    def __init__(self, dim: int, n_streams: int, out_dim: int, knn: int):
        super().__init__()
        self.knn = knn
        self.edge = EdgeConv(n_streams * dim, dim)
        self.proj = nn.Linear(n_streams * dim + dim, out_dim)

    def forward(self, feature_maps, centers, points, neighbor_idx=None):
        up = torch.cat(
            [interpolate_to_points(f, centers, points) for f in feature_maps], dim=-1
        )  # B N (S*D)
        if neighbor_idx is None:
            neighbor_idx = knn_indices(points, self.knn)
        refined = self.edge(up, neighbor_idx)
        return self.proj(torch.cat([up, refined], dim=-1))  # B N out


class GeometricEncoder(nn.Module):
    """Full point encoder producing per-point embeddings.

    The forward pass takes precomputed grouping indices (from
    ``cloud.farthest_point_sample`` / ``cloud.knn_group``) so repeated passes
    over the same cloud never redo the geometry.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.model_dim
        self.patch_embed = PatchEmbed(d)
        self.geometric = GeometricExtract(d)
        self.blocks = nn.ModuleList(
            TransformerBlock(d, config.n_heads) for _ in range(config.n_layers)
        )
        # first and second block outputs feed propagation; a third stream
        # carries the final fused output when there are >= 3 layers
        self.n_streams = min(config.n_layers, 2) + (1 if config.n_layers > 2 else 0)
        self.propagation = FeaturePropagation(d, self.n_streams, config.out_dim, config.propagation_knn)

    def forward(self, points, member_idx, center_idx, neighbor_idx=None, return_layers: bool = False):
        """
        points       : B N 3
        member_idx   : int64 B K G
        center_idx   : int64 B K
        neighbor_idx : optional precomputed B N k knn graph (static per cloud)
        returns      : B N out_dim (and per-layer B K D features when asked)
        """
        b, n, _ = points.shape
        k, g = member_idx.shape[1], member_idx.shape[2]
        centers = torch.gather(points, 1, center_idx.unsqueeze(-1).expand(b, k, 3))
        members = torch.gather(
            points, 1, member_idx.reshape(b, k * g, 1).expand(b, k * g, 3)
        ).reshape(b, k, g, 3)
        rel = members - centers.unsqueeze(2)

        f, p = self.patch_embed(rel, centers)
        geo = self.geometric(f, p)
        x = f + p  # positional embedding added at input only
        layer_outputs = []
        for j, block in enumerate(self.blocks):
            x = block(x, geo)
            if not torch.isfinite(x).all():
                raise EncoderNumericsError(f"non-finite activations at layer {j}")
            layer_outputs.append(x)

        streams = layer_outputs[: min(2, len(layer_outputs))]
        if len(layer_outputs) > 2:
            streams = streams + [layer_outputs[-1]]
        p_em = self.propagation(streams, centers, points, neighbor_idx=neighbor_idx)
        if return_layers:
            return p_em, layer_outputs
        return p_em


class BaselineEncoder(nn.Module):
    """Propagation-free control encoder: shared pointwise map, global max-pool
    broadcast back and concatenated, then projected to out_dim."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.model_dim
        self.point_mlp = nn.Sequential(nn.Linear(3, d), nn.GELU(), nn.Linear(d, d))
        self.proj = nn.Linear(2 * d, config.out_dim)

    def forward(self, points, member_idx=None, center_idx=None, neighbor_idx=None, return_layers: bool = False):
        per_point = self.point_mlp(points)  # B N D
        pooled = per_point.max(dim=1, keepdim=True).values
        fused = torch.cat([per_point, pooled.expand_as(per_point)], dim=-1)
        p_em = self.proj(fused)
        if return_layers:
            return p_em, []
        return p_em
