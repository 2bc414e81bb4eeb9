import numpy as np
import pytest
import torch

from apc.encoders import ImageEncoder, PointEncoder, image_to_tensor, propagate_features
from numgrad import rel_err


@pytest.fixture
def image_batch():
    rng = np.random.default_rng(0)
    img = (rng.random((2, 1, 64, 64)) > 0.7).astype(np.float32)
    return torch.from_numpy(img)


class TestImageEncoder:
    def test_eval_deterministic(self, image_batch):
        torch.manual_seed(0)
        enc = ImageEncoder(64, 128).eval()
        a = enc(image_batch)
        b = enc(image_batch)
        assert torch.equal(a, b)

    def test_output_dim(self, image_batch):
        enc = ImageEncoder(64, 96)
        assert enc(image_batch).shape == (2, 96)

    def test_resolution_mismatch(self, image_batch):
        enc = ImageEncoder(128, 64)
        with pytest.raises(ValueError, match="expected"):
            enc(image_batch)

    def test_weight_gradient_matches_finite_differences(self, image_batch):
        torch.manual_seed(1)
        enc = ImageEncoder(64, 16, channels=(8, 8, 16, 16)).double()
        img = image_batch.double()
        probe = torch.randn(16, dtype=torch.float64, generator=torch.Generator().manual_seed(2))

        def loss():
            return (enc(img) @ probe).sum()

        loss().backward()
        weight = enc.head.weight
        for index in [(0, 3), (7, 11)]:
            ana = float(weight.grad[index])
            eps = 1e-6
            with torch.no_grad():
                orig = weight[index].item()
                weight[index] = orig + eps
                hi = float(loss())
                weight[index] = orig - eps
                lo = float(loss())
                weight[index] = orig
            assert rel_err(ana, (hi - lo) / (2 * eps)) < 1e-3

    def test_image_to_tensor(self):
        img = np.zeros((32, 32), dtype=np.uint8)
        img[4, 5] = 255
        t = image_to_tensor(img)
        assert t.shape == (1, 32, 32)
        assert float(t.max()) == 1.0
        with pytest.raises(ValueError):
            image_to_tensor(np.zeros((3, 32, 32)))


class TestPointEncoder:
    def test_global_permutation_invariant(self):
        torch.manual_seed(3)
        enc = PointEncoder(64).eval()
        pts = torch.randn(2, 100, 3)
        global_a, _ = enc(pts)
        perm = torch.randperm(100)
        global_b, _ = enc(pts[:, perm])
        assert torch.equal(global_a, global_b)

    def test_empty_cloud_rejected(self):
        enc = PointEncoder(32)
        with pytest.raises(ValueError):
            enc(torch.zeros(1, 0, 3))

    def test_finite_outputs(self):
        torch.manual_seed(4)
        enc = PointEncoder(64)
        pts = torch.rand(3, 50, 3) - 0.5
        g, per = enc(pts)
        assert torch.isfinite(g).all() and torch.isfinite(per).all()


class TestPropagateFeatures:
    def test_target_row_count_matches_prior(self):
        torch.manual_seed(5)
        src = torch.randn(2, 37, 3)
        feats = torch.randn(2, 37, 16)
        target = torch.randn(2, 101, 3)
        out = propagate_features(src, feats, target)
        assert out.shape == (2, 101, 16)

    def test_coincident_point_selects_source_feature(self):
        torch.manual_seed(6)
        src = torch.randn(1, 20, 3, dtype=torch.float64)
        feats = torch.randn(1, 20, 8, dtype=torch.float64)
        target = torch.cat([src[:, 4:5], torch.randn(1, 5, 3, dtype=torch.float64)], dim=1)
        out = propagate_features(src, feats, target)
        # inverse-distance weight at distance 0 degenerates to selection
        assert torch.allclose(out[0, 0], feats[0, 4], rtol=1e-5, atol=1e-7)

    def test_hand_interpolation(self):
        # two sources at distance 1 and 3: weights 1/1 and 1/3 -> 0.75, 0.25
        src = torch.tensor([[[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]]], dtype=torch.float64)
        feats = torch.tensor([[[1.0], [5.0]]], dtype=torch.float64)
        target = torch.tensor([[[1.0, 0.0, 0.0]]], dtype=torch.float64)
        out = propagate_features(src, feats, target, k=2)
        # distances 1 and 2: weights 1 and 0.5 -> 2/3 and 1/3
        expected = (2.0 * 1.0 + 1.0 * 5.0) / 3.0
        assert float(out[0, 0, 0]) == pytest.approx(expected, rel=1e-6)
