import numpy as np
import pytest
import torch

from apc.config import ModelConfig
from apc.deformation import (
    AdaptiveInstanceNorm,
    DisplacementHead,
    GraphAttentionBlock,
    SemanticInjector,
    build_model,
    permute_prior_slots,
)
from apc.geometry import chamfer_l1, knn_indices
from numgrad import rel_err


def tiny_config(**overrides):
    defaults = dict(
        n_points=32,
        channels=(8, 12, 16),
        code_dim=4,
        feature_dim=16,
        image_resolution=32,
        image_channels=(4, 8, 8, 16),
        knn_k=4,
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


def tiny_images(batch=2, res=32, seed=0):
    rng = np.random.default_rng(seed)
    return torch.from_numpy((rng.random((batch, 1, res, res)) > 0.6).astype(np.float32))


class TestGraphAttentionBlock:
    def test_identical_features_identical_output(self):
        torch.manual_seed(0)
        block = GraphAttentionBlock(8, 12)
        feats = torch.ones(1, 20, 8)
        idx = knn_indices(torch.randn(1, 20, 3), 4)
        out = block(feats, idx)
        assert torch.allclose(out, out[:, :1].expand_as(out), atol=1e-6)

    def test_attention_sums_to_one(self):
        torch.manual_seed(1)
        block = GraphAttentionBlock(8, 8)
        feats = torch.randn(2, 30, 8)
        idx = knn_indices(feats, 5)
        _, attn = block(feats, idx, return_attention=True)
        assert torch.allclose(attn.sum(-1), torch.ones(2, 30), atol=1e-6)

    def test_permutation_equivariance(self):
        torch.manual_seed(2)
        block = GraphAttentionBlock(8, 8)
        feats = torch.randn(1, 25, 8)
        out = block(feats, knn_indices(feats, 4))
        perm = torch.randperm(25)
        out_p = block(feats[:, perm], knn_indices(feats[:, perm], 4))
        assert torch.allclose(out_p, out[:, perm], atol=1e-6)

    def test_row_mismatch_rejected(self):
        block = GraphAttentionBlock(4, 4)
        with pytest.raises(ValueError, match="graph rows"):
            block(torch.randn(1, 10, 4), torch.zeros(1, 9, 3, dtype=torch.long))


class TestAdaptiveInstanceNorm:
    def test_identity_style_reproduces_input(self):
        torch.manual_seed(3)
        norm = AdaptiveInstanceNorm(6).train()
        q = 3.0 * torch.randn(1, 200, 6, dtype=torch.float64)
        mean = q.mean(dim=(0, 1))
        std = q.std(dim=(0, 1), unbiased=False)
        sigma = std.expand(1, 200, 6)
        mu = mean.expand(1, 200, 6)
        out = norm(q, sigma, mu)
        assert torch.allclose(out, q, atol=1e-5)

    def test_hand_value(self):
        norm = AdaptiveInstanceNorm(1).train()
        q = torch.tensor([[[1.0], [3.0]]])
        sigma = torch.full((1, 2, 1), 2.0)
        mu = torch.full((1, 2, 1), 5.0)
        out = norm(q, sigma, mu)
        # normalized [-1, 1] then * 2 + 5 -> [3, 7]
        assert torch.allclose(out, torch.tensor([[[3.0], [7.0]]]), atol=1e-3)

    def test_constant_channel_stabilized(self):
        norm = AdaptiveInstanceNorm(2).train()
        q = torch.full((1, 50, 2), 4.2, dtype=torch.float64)
        mu = torch.full((1, 50, 2), 1.5, dtype=torch.float64)
        out = norm(q, torch.ones_like(q), mu)
        assert torch.isfinite(out).all()
        assert torch.allclose(out, mu, atol=1e-6)

    def test_train_statistics_match_targets(self):
        torch.manual_seed(4)
        norm = AdaptiveInstanceNorm(4).train()
        q = torch.randn(2, 500, 4, dtype=torch.float64) * 2.0 + 1.0
        sig = torch.tensor([0.5, -1.5, 2.0, 3.0], dtype=torch.float64)
        mu = torch.tensor([1.0, 0.0, -2.0, 0.5], dtype=torch.float64)
        out = norm(q, sig.expand(2, 500, 4), mu.expand(2, 500, 4))
        got_mean = out.mean(dim=(0, 1))
        got_std = out.std(dim=(0, 1), unbiased=False)
        assert torch.allclose(got_mean, mu, atol=1e-4)
        assert torch.allclose(got_std, sig.abs(), atol=1e-4)

    def test_buffers_update_only_in_train(self):
        torch.manual_seed(5)
        norm = AdaptiveInstanceNorm(3, momentum=0.9)
        q = torch.randn(1, 100, 3) + 2.0
        style = torch.ones_like(q)

        norm.eval()
        norm(q, style, style)
        assert torch.equal(norm.running_mean, torch.zeros(3))

        norm.train()
        norm(q, style, style)
        expected = 0.1 * q.mean(dim=(0, 1))
        assert torch.allclose(norm.running_mean, expected, atol=1e-6)

    def test_eval_uses_running_stats(self):
        norm = AdaptiveInstanceNorm(1)
        with torch.no_grad():
            norm.running_mean.fill_(2.0)
            norm.running_var.fill_(4.0)
        norm.eval()
        q = torch.tensor([[[4.0]]])
        out = norm(q, torch.ones(1, 1, 1), torch.zeros(1, 1, 1))
        assert float(out) == pytest.approx((4.0 - 2.0) / 2.0, abs=1e-5)


class TestSemanticInjector:
    def test_zero_weights_identity(self):
        inj = SemanticInjector(8)
        with torch.no_grad():
            for p in inj.parameters():
                p.zero_()
        feats = torch.randn(1, 10, 8)
        assert torch.equal(inj(feats, torch.randn(1, 10, 8)), feats)

    def test_additive(self):
        torch.manual_seed(6)
        inj = SemanticInjector(8)
        feats = torch.randn(1, 10, 8)
        s = torch.randn(1, 10, 8)
        out = inj(feats, s)
        assert torch.allclose(out - inj.net(s), feats, atol=1e-6)
        assert out.shape == feats.shape

    def test_shape_mismatch(self):
        inj = SemanticInjector(8)
        with pytest.raises(ValueError, match="semantic feature shape"):
            inj(torch.randn(1, 10, 8), torch.randn(1, 9, 8))


class TestDisplacementHead:
    def test_zero_init_yields_zero_displacement(self):
        torch.manual_seed(7)
        head = DisplacementHead(16)
        assert torch.equal(head(torch.randn(2, 20, 16)), torch.zeros(2, 20, 3))

    def test_shape_and_equivariance(self):
        torch.manual_seed(8)
        head = DisplacementHead(16)
        with torch.no_grad():
            head.out.weight.normal_()
        feats = torch.randn(1, 20, 16)
        out = head(feats)
        assert out.shape == (1, 20, 3)
        perm = torch.randperm(20)
        assert torch.equal(head(feats[:, perm]), out[:, perm])


class TestDeformationModel:
    def test_untrained_output_equals_prior(self):
        model = build_model(tiny_config(), seed=0).eval()
        out, codes = model.reconstruct(tiny_images())
        assert torch.equal(out, model.prior.unsqueeze(0).expand_as(out))
        assert len(codes) == 3

    def test_eval_deterministic_bitwise(self):
        model = build_model(tiny_config(), seed=1).eval()
        imgs = tiny_images(seed=2)
        a, _ = model.reconstruct(imgs)
        b, _ = model.reconstruct(imgs)
        assert torch.equal(a, b)

    def test_prior_permutation_equivariance(self):
        torch.manual_seed(9)
        model = build_model(tiny_config(), seed=3).eval()
        # give the model non-trivial displacements
        with torch.no_grad():
            model.head.out.weight.normal_(std=0.1)
        imgs = tiny_images(batch=1, seed=4)
        out, _ = model.reconstruct(imgs)
        perm = torch.randperm(model.config.n_points)
        permuted = permute_prior_slots(model, perm).eval()
        out_p, _ = permuted.reconstruct(imgs)
        assert torch.allclose(out_p, out[:, perm], atol=1e-6)

    def test_completion_untrained_identity_and_invariance(self):
        model = build_model(tiny_config(task="complete"), seed=5).eval()
        partial = torch.randn(2, 40, 3)
        out, _ = model.complete(partial)
        assert torch.equal(out, model.prior.unsqueeze(0).expand_as(out))

        with torch.no_grad():
            model.head.out.weight.normal_(std=0.1)
        out_a, _ = model.complete(partial)
        perm = torch.randperm(40)
        out_b, _ = model.complete(partial[:, perm])
        assert torch.allclose(out_a, out_b, atol=1e-6)

    def test_capture_decode_replay_bitwise(self):
        torch.manual_seed(10)
        model = build_model(tiny_config(), seed=6).eval()
        with torch.no_grad():
            model.head.out.weight.normal_(std=0.1)
        out, codes = model.reconstruct(tiny_images(batch=1, seed=7))
        replay = model.decode([c.detached() for c in codes])
        assert torch.equal(replay, out)

    @pytest.mark.parametrize(
        "variant,has_banks,has_geo,has_sem",
        [
            ("full", True, False, False),
            ("no_semantic", False, False, False),
            ("no_geometric", True, False, False),
            ("semantic_mlp", False, False, True),
            ("geometric_mlp", True, True, False),
            ("only_mlp", False, True, True),
        ],
    )
    def test_variant_wiring(self, variant, has_banks, has_geo, has_sem):
        model = build_model(tiny_config(variant=variant), seed=8).eval()
        assert (len(model.banks()) == 3) == has_banks
        assert (model.geo_mlps is not None) == has_geo
        assert (model.sem_mlps is not None) == has_sem
        out, codes = model.reconstruct(tiny_images(batch=1, seed=9))
        assert out.shape == (1, 32, 3)
        assert torch.isfinite(out).all()
        if has_banks:
            assert codes[0].z is not None

    def test_end_to_end_gradients_match_finite_differences(self):
        torch.manual_seed(11)
        model = build_model(tiny_config(), seed=12).double().train()
        with torch.no_grad():
            model.head.out.weight.normal_(std=0.05)
            model.head.out.bias.normal_(std=0.05)
        imgs = tiny_images(batch=1, seed=13).double()
        target = torch.randn(1, 32, 3, dtype=torch.float64) * 0.3

        def loss_fn():
            out, _ = model.reconstruct(imgs)
            return chamfer_l1(out, target)

        loss = loss_fn()
        model.zero_grad()
        loss.backward()

        named = dict(model.named_parameters())
        rng = np.random.default_rng(14)
        checked = 0
        names = sorted(n for n, p in named.items() if p.grad is not None)
        for name in rng.choice(names, size=10, replace=False):
            p = named[name]
            flat_idx = int(rng.integers(p.numel()))
            idx = np.unravel_index(flat_idx, p.shape)
            ana = float(p.grad[idx])
            eps = 1e-6
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + eps
                hi = float(loss_fn())
                p[idx] = orig - eps
                lo = float(loss_fn())
                p[idx] = orig
            num = (hi - lo) / (2 * eps)
            if abs(ana) < 1e-10 and abs(num) < 1e-7:
                continue  # parameter with no influence on this instance
            assert rel_err(ana, num, floor=1e-7) < 1e-3, f"{name}[{idx}] {ana} vs {num}"
            checked += 1
        assert checked >= 5
