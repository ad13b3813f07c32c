import numpy as np
import pytest
import torch

from ichscnet import encoders as E


class TestPyramid:
    def test_shapes(self):
        stem = E.PyramidStem(16, resolution=64)
        pyr = E.build_pyramid(stem, np.zeros((128, 128), np.uint8))
        assert [tuple(x.shape[1:]) for x in pyr.levels] == [(16, 128, 128), (32, 64, 64), (64, 32, 32), (128, 16, 16)]
        assert all(tuple(x.shape[-2:]) == (64, 64) for x in pyr.resized)

    def test_zero_image_gives_uniform_stem(self):
        stem = E.PyramidStem(8, resolution=16)
        pre = stem.stem(torch.zeros(1, 1, 32, 32))
        bias = stem.stem.bias.view(1, -1, 1, 1).expand_as(pre)
        assert torch.equal(pre, bias)

    @pytest.mark.parametrize("h,w", [(130, 128), (128, 36)])
    def test_indivisible(self, h, w):
        with pytest.raises(ValueError):
            E.PyramidStem(8, 16)(torch.zeros(1, 1, h, w))


class TestText:
    enc = E.TextEncoder(64, seed=3)

    def test_deterministic(self):
        s = "Age 65, M. GCS 7. Treatment: surgical."
        assert torch.equal(E.encode_text(self.enc, s), E.encode_text(self.enc, s))
        assert torch.equal(E.encode_text(E.TextEncoder(64, seed=3), s), E.encode_text(self.enc, s))

    def test_gcs_token_locality(self):
        a = "Age 65, M. Hospital stay 12 d. GCS 7. Treatment: surgical."
        b = a.replace("GCS 7", "GCS 14")
        ea, eb = E.encode_text(self.enc, a), E.encode_text(self.enc, b)
        assert ea.shape == eb.shape
        differ = [i for i in range(len(ea)) if not torch.equal(ea[i], eb[i])]
        ta, tb = E.tokenize(a), E.tokenize(b)
        assert differ == [i for i, (x, y) in enumerate(zip(ta, tb)) if x != y]
        assert len(differ) == 1

    def test_unknown_tokens(self):
        ids = self.enc.token_ids("zebra quokka")
        assert ids == [self.enc.vocab[E.UNK]] * 2

    def test_empty(self):
        with pytest.raises(ValueError):
            E.encode_text(self.enc, "   ")

    def test_numeric_bins(self):
        assert E.tokenize("Age 67") == E.tokenize("Age 65")
        assert E.tokenize("GCS 7") != E.tokenize("GCS 8")

    def test_vocabulary_round_trip(self, tmp_path):
        self.enc.save_vocabulary(tmp_path / "vocab.json")
        assert E.TextEncoder.load_vocabulary(tmp_path / "vocab.json") == self.enc.vocab


class TestPrompts:
    enc = E.PromptEncoder(64, seed=1)

    def test_count(self):
        p = E.PromptSet((0.1, 0.1, 0.5, 0.5), ((0.2, 0.2, True),))
        assert E.encode_prompts(self.enc, p).shape == (3, 64)

    def test_box_corners_differ(self):
        a = E.PromptSet((0.1, 0.1, 0.5, 0.5), ((0.2, 0.2, True),))
        b = E.PromptSet((0.2, 0.3, 0.6, 0.9), ((0.2, 0.2, True),))
        ea, eb = E.encode_prompts(self.enc, a), E.encode_prompts(self.enc, b)
        assert not torch.equal(ea[0], eb[0]) and not torch.equal(ea[1], eb[1])
        assert torch.equal(ea[2], eb[2])
        expected = self.enc.positional(torch.tensor([0.2, 0.3])) + self.enc.type_embedding.weight[E.BOX_MIN]
        assert torch.allclose(eb[0], expected)

    def test_validation(self):
        with pytest.raises(ValueError):
            E.PromptSet((0.5, 0.1, 0.4, 0.5), ((0.2, 0.2, True),))
        with pytest.raises(ValueError):
            E.PromptSet((0.1, 0.1, 0.4, 0.5), ())
        with pytest.raises(ValueError):
            E.PromptSet((0.1, 0.1, 0.4, 1.5), ((0.2, 0.2, True),))


class TestDecoder:
    def _inputs(self, k=4, seed=0):
        g = torch.Generator().manual_seed(seed)
        pts = tuple((float(x), float(y), bool(i % 2)) for i, (x, y) in enumerate(torch.rand(k, 2, generator=g).tolist()))
        return E.PromptSet((0.1, 0.2, 0.7, 0.8), pts)

    def test_shape_determinism_permutation(self):
        dec = E.MaskDecoder([8, 16], dim=32)
        pe = E.PromptEncoder(32)
        prompts = self._inputs()
        img = torch.randn(1, 16, 12, 12)
        emb, mask = pe([prompts])
        out = E.decode_mask(dec, img, emb, mask, pe.grid_encoding(12), scale=1)
        assert out.shape == (1, 1, 12, 12)
        assert torch.equal(out, E.decode_mask(dec, img, emb, mask, pe.grid_encoding(12), scale=1))
        perm = E.PromptSet(prompts.box, tuple(reversed(prompts.points)))
        emb2, mask2 = pe([perm])
        out2 = E.decode_mask(dec, img, emb2, mask2, pe.grid_encoding(12), scale=1)
        assert torch.allclose(out, out2, atol=1e-5)

    def test_spatial_mismatch(self):
        dec = E.MaskDecoder([8], dim=32)
        pe = E.PromptEncoder(32)
        emb, mask = pe([self._inputs()])
        with pytest.raises(ValueError):
            dec(torch.randn(1, 8, 10, 10), 0, emb, mask, pe.grid_encoding(12))
