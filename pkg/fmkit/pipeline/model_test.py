import unittest

import torch

from fmkit.definitions import DTYPE
from fmkit.encoders.config import BlockConfig, Variant
from fmkit.pipeline.model import ModelConfig, DetectorModel, AttentionPooling
from fmkit.tensor.ops import ShapeError


def tiny_model(c_in: int = 8, d_model: int = 8, **block_changes) -> DetectorModel:
    block = dict(variant=Variant.PN_BIMAMBA, d_model=d_model, n_blocks=1, expand=2, d_state=4, mhsa_heads=2,
                 dropout=0.)
    block.update(block_changes)
    return DetectorModel(ModelConfig(c_in, BlockConfig(**block), head_hidden=8, seed=3)).eval()


class ModelTestCase(unittest.TestCase):
    def setUp(self):
        torch.manual_seed(8)

    def test_project(self):
        model = tiny_model()
        s_f = torch.randn(5, 8, dtype=DTYPE)
        with torch.no_grad():
            model.projection.weight.copy_(torch.eye(8, dtype=DTYPE))
            model.projection.bias.zero_()
        self.assertTrue(torch.equal(model.project(s_f), s_f), 'identity projection passes features through')
        model.projection.zero_()
        self.assertTrue(torch.equal(model.project(s_f), torch.zeros(5, 8, dtype=DTYPE)), 'zero projection')

    def test_project_oracle(self):
        model = tiny_model(c_in=5)
        s_f = torch.randn(4, 5, dtype=DTYPE)
        expected = s_f @ model.projection.weight + model.projection.bias
        self.assertTrue(torch.allclose(model.project(s_f), expected, atol=1e-14), 'projection is x W + b')
        with self.assertRaises(ShapeError, msg='channel count must match'):
            model.project(torch.randn(4, 6, dtype=DTYPE))

    def test_pool_zero_weight(self):
        pool = AttentionPooling(6)
        with torch.no_grad():
            pool.weight.zero_()
        h = torch.randn(7, 6, dtype=DTYPE)
        self.assertTrue(torch.allclose(pool(h), h.mean(dim=0), atol=1e-14), 'uniform weights give the mean')

    def test_pool_single_frame(self):
        pool = AttentionPooling(6)
        h = torch.randn(1, 6, dtype=DTYPE)
        self.assertTrue(torch.allclose(pool(h), h[0], atol=1e-15), 'one frame pools to itself')

    def test_pool_saturation(self):
        pool = AttentionPooling(4)
        h = torch.randn(6, 4, dtype=DTYPE)
        h[:, 0] = 0.
        h[2, 0] = 1.
        with torch.no_grad():
            pool.weight.zero_()
            pool.weight[0, 0] = 50.
        self.assertTrue(torch.allclose(pool(h), h[2], atol=1e-15), 'a dominant score selects its frame')

    def test_pool_convexity(self):
        pool = AttentionPooling(6)
        for _ in range(20):
            h = torch.randn(9, 6, dtype=DTYPE) * 3
            s_u = pool(h)
            self.assertTrue(bool((s_u >= h.min(dim=0).values - 1e-12).all()), 'pooled value above the minimum')
            self.assertTrue(bool((s_u <= h.max(dim=0).values + 1e-12).all()), 'pooled value below the maximum')

    def test_classify(self):
        model = tiny_model()
        model.head_hidden.zero_()
        with torch.no_grad():
            model.head_out.weight.zero_()
            model.head_out.bias.copy_(torch.tensor([0.3, -1.2], dtype=DTYPE))
        pred = model.classify(torch.randn(8, dtype=DTYPE))
        self.assertEqual(pred.logits.tolist(), [0.3, -1.2], 'zero weights leave the biases')
        self.assertAlmostEqual(pred.score.item(), -1.5, delta=1e-15, msg='score is fake minus real')

    def test_score_monotone_in_fake_bias(self):
        model = tiny_model()
        s_u = torch.randn(8, dtype=DTYPE)
        scores = []
        for b in torch.linspace(-2, 2, 9, dtype=DTYPE):
            with torch.no_grad():
                model.head_out.bias[1] = b
            scores.append(model.classify(s_u).score.item())
        self.assertTrue(all(a < b for a, b in zip(scores, scores[1:])), 'score increases with the fake bias')

    def test_seeded_construction(self):
        a, b = tiny_model(), tiny_model()
        s_f = torch.randn(6, 8, dtype=DTYPE)
        self.assertTrue(torch.equal(a(s_f).logits, b(s_f).logits), 'same seed gives the same model')

    def test_shapes(self):
        for variant in Variant:
            model = tiny_model(c_in=5, variant=variant)
            for t in (1, 9, 208):
                pred = model(torch.randn(t, 5, dtype=DTYPE))
                self.assertEqual(tuple(pred.logits.shape), (2,), f'{variant.value} gives two logits for T={t}')
                self.assertTrue(bool(torch.isfinite(pred.score)), 'score is finite')

    def test_disable_pooling(self):
        pooled = tiny_model()
        mean = tiny_model(disable_pooling=True)
        own = dict(mean.named_parameters())
        with torch.no_grad():
            pooled.pooling.weight.zero_()
            for name, param in pooled.named_parameters():
                if name in own:
                    own[name].copy_(param)
        s_f = torch.randn(11, 8, dtype=DTYPE)
        self.assertTrue(torch.allclose(pooled(s_f).logits, mean(s_f).logits, atol=1e-12),
                        'mean pooling equals attention pooling with zero weight')

    def test_batch_invariance(self):
        for variant in Variant:
            model = tiny_model(c_in=5, variant=variant, n_blocks=2)
            items = [torch.randn(t, 5, dtype=DTYPE) for t in (3, 10, 7)]
            batch = torch.zeros(3, 10, 5, dtype=DTYPE)
            for i, item in enumerate(items):
                batch[i, :item.shape[0]] = item
            scores = model(batch, torch.tensor([3, 10, 7])).score
            for i, item in enumerate(items):
                self.assertAlmostEqual(scores[i].item(), model(item).score.item(), delta=1e-10,
                                       msg=f'{variant.value} item {i} scores the same alone')
