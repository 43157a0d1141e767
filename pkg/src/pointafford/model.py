"""End-to-end pipeline model: point encoder, text encoder, alignment heads,
mask-label classifier, query projection and affordance decoder in one module.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .cloud import PointCloud, farthest_point_sample, knn_graph, knn_group
from .decoder import AffordanceDecoder
from .encoder import BaselineEncoder, EncoderConfig, GeometricEncoder
from .instructions import N_AFFORDANCE_LABELS
from .textmodel import HashTextEncoder, MaskLabelClassifier, QueryProjection

ENCODER_KINDS = ("geometric", "baseline")


def group_cloud(pc: PointCloud, config: EncoderConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Static per-cloud geometry: FPS centers, knn member indices, and the
    propagation knn graph (all deterministic, cacheable per cloud)."""
    centers = farthest_point_sample(pc, config.n_groups)
    patches = knn_group(pc, centers, config.group_size)
    neighbors = knn_graph(pc.points, config.propagation_knn)
    return patches.member_indices, patches.center_indices, neighbors


class AffordanceModel(nn.Module):
    """Full instruction-to-affordance-map pipeline."""

    def __init__(
        self,
        encoder_config: EncoderConfig,
        d_q: int = 32,
        d_t: int = 64,
        d_a: int = 64,
        encoder_kind: str = "geometric",
        text_vocab_size: int = 2048,
        decoder_hidden: int | None = None,
        n_labels: int = N_AFFORDANCE_LABELS,
    ):
        super().__init__()
        if encoder_kind not in ENCODER_KINDS:
            raise ValueError(f"encoder_kind must be one of {ENCODER_KINDS}")
        self.encoder_kind = encoder_kind
        enc_cls = GeometricEncoder if encoder_kind == "geometric" else BaselineEncoder
        self.encoder = enc_cls(encoder_config)
        self.text_encoder = HashTextEncoder(d_t, vocab_size=text_vocab_size)
        self.point_align = nn.Linear(encoder_config.out_dim, d_a)
        self.text_align = nn.Linear(d_t, d_a)
        self.classifier = MaskLabelClassifier(d_t, encoder_config.out_dim, n_labels=n_labels)
        self.query = QueryProjection(d_q, n_labels=n_labels)
        self.decoder = AffordanceDecoder(encoder_config.out_dim, d_q, hidden=decoder_hidden)

    def encode_points(self, points, member_idx, center_idx, neighbor_idx=None):
        p_em = self.encoder(points, member_idx, center_idx, neighbor_idx=neighbor_idx)  # B N Dout
        pooled = p_em.max(dim=1).values  # symmetric pool keeps permutation invariance exact
        return p_em, pooled

    def forward(self, points, member_idx, center_idx, texts, neighbor_idx=None, straight_through: bool | None = None):
        """Run the whole pipeline on a batch.

        Returns a dict with per-point scores, label logits, the one-hot query
        and both alignment embeddings; training losses are assembled from it.
        """
        p_em, pooled = self.encode_points(points, member_idx, center_idx, neighbor_idx=neighbor_idx)
        text_emb = self.text_encoder(texts)
        logits = self.classifier(text_emb, pooled)
        q, one_hot = self.query(logits, straight_through=straight_through)
        scores = self.decoder(p_em, points, q)
        return {
            "scores": scores,
            "logits": logits,
            "one_hot": one_hot,
            "point_align": self.point_align(pooled),
            "text_align": self.text_align(text_emb),
            "p_em": p_em,
        }
