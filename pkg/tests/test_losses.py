import math

import numpy as np
import pytest
import torch

from ichscnet import losses as L


def _two_class(s):
    return torch.cat([1 - s, s], dim=1)


class TestMta:
    def test_zero_when_matching(self):
        s = torch.rand(2, 1, 5, 5, dtype=torch.float64) * 0.9 + 0.05
        assert abs(float(L.mta_loss(_two_class(s), s))) < 1e-9

    def test_single_pixel_by_hand(self):
        P = torch.tensor([0.8, 0.2], dtype=torch.float64).view(1, 2, 1, 1)
        S = torch.full((1, 1, 1, 1), 0.5, dtype=torch.float64)
        expected = (0.8 * math.log(1.6) + 0.2 * math.log(0.4)) + (0.5 * math.log(0.625) + 0.5 * math.log(2.5))
        assert float(L.mta_loss(P, S)) == pytest.approx(0.41588, abs=1e-4)
        assert float(L.mta_loss(P, S)) == pytest.approx(expected, abs=1e-9)

    def test_symmetric_in_roles(self):
        a = torch.rand(1, 1, 4, 4, dtype=torch.float64)
        b = torch.rand(1, 1, 4, 4, dtype=torch.float64)
        assert float(L.mta_loss(_two_class(a), b)) == pytest.approx(float(L.mta_loss(_two_class(b), a)), abs=1e-12)

    def test_mixture_variant_is_bounded_by_log2(self):
        P = torch.tensor([1.0, 0.0], dtype=torch.float64).view(1, 2, 1, 1)
        S = torch.ones(1, 1, 1, 1, dtype=torch.float64)
        js = float(L.mta_loss(P, S, variant="mixture_js"))
        assert 0 < js <= math.log(2) + 1e-9

    def test_resolution_mismatch(self):
        with pytest.raises(ValueError):
            L.mta_loss(torch.full((1, 2, 4, 4), 0.5), torch.rand(1, 1, 8, 8))

    def test_non_negative(self):
        g = torch.Generator().manual_seed(1)
        for _ in range(20):
            P = torch.softmax(torch.randn(2, 2, 3, 3, generator=g) * 4, 1)
            assert float(L.mta_loss(P, torch.rand(2, 1, 3, 3, generator=g))) >= 0


class TestSeg:
    def test_perfect_prediction(self):
        gt = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
        gt[..., 2:6, 2:6] = 1
        masks = [gt] + [L.downsample_mask(gt, (8 >> s, 8 >> s)) for s in (1, 2, 3)]
        total, per_scale = L.seg_loss(masks, gt, L.LossWeights())
        assert float(total) <= 1e-4
        assert len(per_scale) == 4

    def test_gamma_scaling(self):
        gt = (torch.rand(2, 1, 8, 8) > 0.5).double()
        pred = [torch.rand(2, 1, 8, 8, dtype=torch.float64) for _ in range(4)]
        base, _ = L.seg_loss(pred, gt, L.LossWeights())
        scaled, _ = L.seg_loss(pred, gt, L.LossWeights(gamma=tuple(3.5 * g for g in (1.0, 0.75, 0.5, 0.25))))
        assert float(scaled) == pytest.approx(3.5 * float(base), rel=1e-12)

    def test_monotone_toward_target(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            s = torch.as_tensor(rng.random((1, 1, 8, 8)) > 0.5, dtype=torch.float64)
            disjoint = 1 - s
            vals = []
            for t in np.linspace(0, 1, 10):
                p = (1 - t) * disjoint + t * s
                vals.append(float(L.seg_loss([p] * 4, s, L.LossWeights())[0]))
            assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_downsample_mask(self):
        m = torch.zeros(1, 1, 4, 4)
        m[..., :2, :2] = 1
        assert L.downsample_mask(m, (2, 2))[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


class TestCla:
    def test_confident_correct(self):
        probs = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        assert float(L.cla_loss(probs, [0, 1], eps=1e-12)) < 1e-9

    def test_half_probability(self):
        assert float(L.cla_loss(torch.tensor([[0.5, 0.5]]), [1])) == pytest.approx(0.6931, abs=1e-4)

    def test_class_weights(self):
        assert L.class_weights([0, 1, 0, 1]) == (1.0, 1.0)
        assert L.class_weights([0, 0, 0, 1]) == (4 / 6, 2.0)
        with pytest.raises(ValueError):
            L.class_weights([1, 1])

    def test_bad_label(self):
        with pytest.raises(ValueError):
            L.cla_loss(torch.tensor([[0.5, 0.5]]), [2])


class TestTotal:
    def test_composition(self):
        w = L.LossWeights(alpha=0.2, beta=0.8)
        one = torch.tensor(1.0, dtype=torch.float64)
        b = L.total_loss(one, [], one, one, w)
        assert float(b.total) == pytest.approx(2.0, abs=1e-15)

    def test_alpha_beta_zero(self):
        w = L.LossWeights(alpha=0.0, beta=0.0)
        b = L.total_loss(torch.tensor(3.0), [], torch.tensor(5.0), torch.tensor(0.25), w)
        assert float(b.total) == 0.25

    def test_non_finite_rejected(self):
        with pytest.raises(FloatingPointError):
            L.total_loss(torch.tensor(float("nan")), [], None, None, L.LossWeights())

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            L.LossWeights(alpha=-1)
        with pytest.raises(ValueError):
            L.LossWeights(gamma=(1, 1, 1))
        with pytest.raises(ValueError):
            L.LossWeights(mta_variant="js")

    def test_record_is_plain_floats(self):
        x = torch.tensor(0.5, requires_grad=True)
        rec = L.total_loss(x * 2, [(x, x)] * 4, x, x, L.LossWeights()).as_record()
        assert isinstance(rec["total"], float) and rec["seg_per_scale"][0] == [0.5, 0.5]
