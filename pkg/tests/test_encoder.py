import numpy as np
import pytest
import torch

from conftest import finite_difference_check
from pointafford.cloud import PointCloud
from pointafford.encoder import (
    BaselineEncoder,
    EdgeConv,
    EncoderConfig,
    EncoderNumericsError,
    GeometricEncoder,
    GeometricExtract,
    PatchEmbed,
    TransformerBlock,
    interpolate_to_points,
)
from pointafford.model import group_cloud


def toy_config(**overrides):
    base = dict(model_dim=8, n_groups=4, group_size=8, out_dim=8, propagation_knn=5, n_heads=2)
    base.update(overrides)
    return EncoderConfig(**base)


def encoder_inputs(rng, cfg, n=32, dtype=torch.float64):
    pts = rng.standard_normal((n, 3))
    members, centers, neighbors = group_cloud(PointCloud(pts), cfg)
    return (
        torch.from_numpy(pts).to(dtype).unsqueeze(0),
        torch.from_numpy(members).unsqueeze(0),
        torch.from_numpy(centers).unsqueeze(0),
        torch.from_numpy(neighbors).unsqueeze(0),
    )


class TestPatchEmbed:
    def test_zero_relative_coords_give_equal_rows(self):
        embed = PatchEmbed(6).double()
        rel = torch.zeros(1, 3, 5, 3, dtype=torch.float64)
        centers = torch.randn(1, 3, 3, dtype=torch.float64)
        f, _ = embed(rel, centers)
        assert torch.equal(f[0, 0], f[0, 1]) and torch.equal(f[0, 1], f[0, 2])

    def test_member_permutation_invariance(self, rng):
        embed = PatchEmbed(6).double()
        rel = torch.from_numpy(rng.standard_normal((1, 2, 7, 3)))
        centers = torch.from_numpy(rng.standard_normal((1, 2, 3)))
        f, p = embed(rel, centers)
        perm = torch.from_numpy(rng.permutation(7))
        f2, p2 = embed(rel[:, :, perm], centers)
        assert torch.equal(f, f2)
        assert torch.equal(p, p2)

    def test_matches_hand_forward(self, rng):
        embed = PatchEmbed(4).double()
        rel = rng.standard_normal((1, 2, 3, 3))
        centers = rng.standard_normal((1, 2, 3))
        f, p = embed(torch.from_numpy(rel), torch.from_numpy(centers))

        def mlp(seq, x):
            w0, b0 = seq[0].weight.detach().numpy(), seq[0].bias.detach().numpy()
            w2, b2 = seq[2].weight.detach().numpy(), seq[2].bias.detach().numpy()
            h = x @ w0.T + b0
            h = h * 0.5 * (1.0 + torch.erf(torch.from_numpy(h) / np.sqrt(2.0)).numpy())
            return h @ w2.T + b2

        expected_f = mlp(embed.point_mlp, rel).max(axis=2)
        expected_p = mlp(embed.pos_mlp, centers)
        assert np.allclose(f.detach().numpy(), expected_f, atol=1e-12)
        assert np.allclose(p.detach().numpy(), expected_p, atol=1e-12)

    def test_dimension_mismatch(self):
        embed = PatchEmbed(4)
        with pytest.raises(ValueError):
            embed(torch.zeros(1, 2, 3, 4), torch.zeros(1, 2, 3))


class TestGeometricExtract:
    def test_zero_parameters_emit_bias(self):
        geo = GeometricExtract(5).double()
        with torch.no_grad():
            geo.fc1.weight.zero_()
            geo.fc1.bias.zero_()
            geo.fc2.weight.zero_()
            geo.fc2.bias.fill_(0.7)
        out = geo(torch.randn(1, 4, 5, dtype=torch.float64), torch.randn(1, 4, 5, dtype=torch.float64))
        assert torch.equal(out, torch.full((1, 4, 5), 0.7, dtype=torch.float64))

    def test_shape_contract(self):
        geo = GeometricExtract(6)
        out = geo(torch.randn(2, 3, 6), torch.randn(2, 3, 6))
        assert out.shape == (2, 3, 6)

    def test_matches_forward_oracle(self, rng):
        geo = GeometricExtract(4).double()
        f = rng.standard_normal((1, 3, 4))
        p = rng.standard_normal((1, 3, 4))
        out = geo(torch.from_numpy(f), torch.from_numpy(p))
        h = (f + p) @ geo.fc1.weight.detach().numpy().T + geo.fc1.bias.detach().numpy()
        h = torch.nn.functional.gelu(torch.from_numpy(h)).numpy()
        expected = h @ geo.fc2.weight.detach().numpy().T + geo.fc2.bias.detach().numpy()
        assert np.allclose(out.detach().numpy(), expected, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            GeometricExtract(4)(torch.zeros(1, 2, 4), torch.zeros(1, 3, 4))


class TestTransformerBlock:
    def test_zero_gate_passes_self_attention_output(self, rng):
        block = TransformerBlock(8, 2).double()
        x = torch.from_numpy(rng.standard_normal((1, 4, 8)))
        geo = torch.from_numpy(rng.standard_normal((1, 4, 8)))
        plain = x + block.attn(block.norm1(x))
        plain = plain + block.mlp(block.norm2(plain))
        assert torch.equal(block(x, geo), plain)

    def test_cross_attention_rows_sum_to_one(self, rng):
        block = TransformerBlock(8, 2).double()
        feats = torch.from_numpy(rng.standard_normal((2, 5, 8)))
        geo = torch.from_numpy(rng.standard_normal((2, 5, 8)))
        _, attn = block.cross_attention(feats, geo, return_attn=True)
        assert torch.allclose(attn.sum(dim=-1), torch.ones(2, 5, dtype=torch.float64), atol=1e-6)

    def test_eq1_matches_direct_matrix_evaluation(self, rng):
        dim = 4
        block = TransformerBlock(dim, 2).double()
        with torch.no_grad():
            block.gate.fill_(0.8)
        feats = rng.standard_normal((1, 2, dim))
        geo = rng.standard_normal((1, 2, dim))
        f_t = torch.from_numpy(feats)
        g_t = torch.from_numpy(geo)
        # the residual applied to the post-FFN features F_j
        f_j = f_t + block.attn(block.norm1(f_t))
        f_j = f_j + block.mlp(block.norm2(f_j))
        scores = f_j[0].detach().numpy() @ geo[0].T / np.sqrt(dim)
        attn = np.exp(scores - scores.max(axis=1, keepdims=True))
        attn /= attn.sum(axis=1, keepdims=True)
        expected = f_j[0].detach().numpy() + 0.8 * attn @ geo[0]
        out = block(f_t, g_t)
        assert np.allclose(out[0].detach().numpy(), expected, atol=1e-10)


class TestInterpolation:
    def test_point_on_center_gets_center_feature(self, rng):
        centers = torch.from_numpy(rng.standard_normal((1, 3, 3)))
        feats = torch.from_numpy(rng.standard_normal((1, 3, 5)))
        points = centers[:, 1:2, :].clone()
        out = interpolate_to_points(feats, centers, points)
        assert torch.allclose(out[0, 0], feats[0, 1], atol=1e-6)

    def test_single_center_broadcasts(self, rng):
        centers = torch.from_numpy(rng.standard_normal((1, 1, 3)))
        feats = torch.from_numpy(rng.standard_normal((1, 1, 4)))
        points = torch.from_numpy(rng.standard_normal((1, 6, 3)))
        out = interpolate_to_points(feats, centers, points)
        assert torch.allclose(out, feats.expand(1, 6, 4))

    def test_matches_inverse_distance_oracle(self, rng):
        centers_np = rng.standard_normal((3, 3))
        feats_np = rng.standard_normal((3, 5))
        points_np = rng.standard_normal((10, 3))
        out = interpolate_to_points(
            torch.from_numpy(feats_np).unsqueeze(0),
            torch.from_numpy(centers_np).unsqueeze(0),
            torch.from_numpy(points_np).unsqueeze(0),
        )[0].numpy()
        expected = np.zeros((10, 5))
        for i, point in enumerate(points_np):
            d = np.linalg.norm(centers_np - point, axis=1)
            w = 1.0 / (d + 1e-8)
            w /= w.sum()
            expected[i] = (w[:, None] * feats_np).sum(axis=0)
        assert np.allclose(out, expected, atol=1e-10)


class TestEdgeConv:
    def test_matches_naive_concatenated_edges(self, rng):
        conv = EdgeConv(6, 4).double()
        x = torch.from_numpy(rng.standard_normal((2, 9, 6)))
        idx = torch.from_numpy(
            np.stack([rng.choice(9, size=(9, 3), replace=True) for _ in range(2)])
        )
        out = conv(x, idx)
        # naive route: materialize [x_i ; x_j - x_i] and push through the same weights
        b, n, f = x.shape
        gathered = torch.stack([x[bi][idx[bi]] for bi in range(b)])  # B N k F
        center = x.unsqueeze(2).expand_as(gathered)
        edge = torch.cat([center, gathered - center], dim=-1)
        h = torch.nn.functional.gelu(edge @ conv.fc1.weight.t() + conv.fc1.bias)
        expected = (h @ conv.fc2.weight.t() + conv.fc2.bias).max(dim=2).values
        assert torch.allclose(out, expected, atol=1e-12)


class TestGeometricEncoder:
    def test_output_shape_and_finite(self, rng):
        cfg = toy_config()
        enc = GeometricEncoder(cfg).double()
        pts, members, centers, neighbors = encoder_inputs(rng, cfg)
        out = enc(pts, members, centers, neighbor_idx=neighbors)
        assert out.shape == (1, 32, cfg.out_dim)
        assert torch.isfinite(out).all()

    def test_permutation_equivariance_exact(self, rng):
        cfg = toy_config()
        enc = GeometricEncoder(cfg).double()
        with torch.no_grad():
            for block in enc.blocks:
                block.gate.fill_(0.4)
        for trial in range(5):
            pts = rng.standard_normal((30, 3))
            m, c, nb = group_cloud(PointCloud(pts), cfg)
            out = enc(
                torch.from_numpy(pts).unsqueeze(0),
                torch.from_numpy(m).unsqueeze(0),
                torch.from_numpy(c).unsqueeze(0),
                neighbor_idx=torch.from_numpy(nb).unsqueeze(0),
            )
            perm = rng.permutation(30)
            m2, c2, nb2 = group_cloud(PointCloud(pts[perm]), cfg)
            out2 = enc(
                torch.from_numpy(pts[perm]).unsqueeze(0),
                torch.from_numpy(m2).unsqueeze(0),
                torch.from_numpy(c2).unsqueeze(0),
                neighbor_idx=torch.from_numpy(nb2).unsqueeze(0),
            )
            assert torch.equal(out[0][torch.from_numpy(perm)], out2[0])

    def test_ablation_path_without_blocks(self, rng):
        """Gates at 0 and blocks forced to identity: the encoder reduces to
        patch embedding + propagation of the input tokens."""
        cfg = toy_config()
        enc = GeometricEncoder(cfg).double()
        with torch.no_grad():
            for block in enc.blocks:
                block.gate.zero_()
                block.attn.proj.weight.zero_()
                block.attn.proj.bias.zero_()
                block.mlp[2].weight.zero_()
                block.mlp[2].bias.zero_()
        pts, members, centers, neighbors = encoder_inputs(rng, cfg)
        out = enc(pts, members, centers, neighbor_idx=neighbors)
        b, k, g = members.shape
        centers_xyz = torch.gather(pts, 1, centers.unsqueeze(-1).expand(b, k, 3))
        rel = torch.gather(
            pts, 1, members.reshape(b, k * g, 1).expand(b, k * g, 3)
        ).reshape(b, k, g, 3) - centers_xyz.unsqueeze(2)
        f, p = enc.patch_embed(rel, centers_xyz)
        tokens = f + p
        expected = enc.propagation([tokens] * enc.n_streams, centers_xyz, pts, neighbor_idx=neighbors)
        assert torch.equal(out, expected)

    def test_nonfinite_raises_with_layer_index(self, rng):
        cfg = toy_config()
        enc = GeometricEncoder(cfg).double()
        with torch.no_grad():
            enc.blocks[1].mlp[0].weight.fill_(float("inf"))
        pts, members, centers, neighbors = encoder_inputs(rng, cfg)
        with pytest.raises(EncoderNumericsError, match="layer 1"):
            enc(pts, members, centers, neighbor_idx=neighbors)

    def test_gradients_match_finite_differences(self, rng):
        cfg = toy_config()
        enc = GeometricEncoder(cfg).double()
        with torch.no_grad():
            for block in enc.blocks:
                block.gate.fill_(0.3)
        pts, members, centers, neighbors = encoder_inputs(rng, cfg)
        weights = torch.from_numpy(rng.standard_normal((32, cfg.out_dim)))
        params = [p for p in enc.parameters() if p.requires_grad]
        finite_difference_check(
            lambda: (enc(pts, members, centers, neighbor_idx=neighbors) * weights).sum(),
            params,
            max_per_tensor=6,
        )


class TestBaselineEncoder:
    def test_shape_and_permutation_equivariance(self, rng):
        cfg = toy_config()
        enc = BaselineEncoder(cfg).double()
        pts = torch.from_numpy(rng.standard_normal((1, 20, 3)))
        out = enc(pts)
        assert out.shape == (1, 20, cfg.out_dim)
        perm = torch.from_numpy(rng.permutation(20))
        out2 = enc(pts[:, perm])
        assert torch.equal(out[:, perm], out2)
