import math

import numpy as np
import pytest
import torch

from oracles import sigmoid_xent, softmax_xent
from salsearch.embedding import (ClassifierHeads, Encoder, attribute_loss, category_loss, embedding_loss,
                                 encode_attribute, encode_visual)
from salsearch.nets import zero_output_layer


def t(x):
    return torch.tensor(x, dtype=torch.float64)


class TestEncoders:
    def test_shape_finite(self):
        torch.manual_seed(0)
        enc = Encoder().double().eval()
        out = encode_visual(torch.rand(6, 512, dtype=torch.float64) * 2 - 1, enc)
        assert out.shape == (6, 128) and torch.isfinite(out).all()
        widths = [m.out_features for m in enc.modules() if isinstance(m, torch.nn.Linear)]
        assert widths == [512, 256, 128]

    def test_zero_final_layer(self):
        enc = Encoder().double()
        zero_output_layer(enc)
        assert torch.equal(encode_attribute(torch.randn(3, 512, dtype=torch.float64), enc),
                           torch.zeros(3, 128, dtype=torch.float64))

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            Encoder()(torch.zeros(2, 500))

    def test_heads_dims(self):
        h = ClassifierHeads(128, 7, 12)
        c, a = h(torch.zeros(2, 128))
        assert c.shape == (2, 7) and a.shape == (2, 12)


class TestCategoryLoss:
    def test_uniform_is_log_m(self):
        assert category_loss(torch.zeros(3, 4), torch.tensor([0, 1, 3])).item() == pytest.approx(math.log(4), abs=1e-6)

    def test_saturated_limit(self):
        logits = t([[60.0, 0.0, 0.0]])
        assert category_loss(logits, torch.tensor([0])).item() < 1e-20

    def test_closed_form(self):
        oracle = softmax_xent([2.0, 0.0, 0.0], 0)
        assert oracle == pytest.approx(0.2395, abs=1e-4)
        assert category_loss(t([[2.0, 0.0, 0.0]]), torch.tensor([0])).item() == pytest.approx(oracle, abs=1e-12)

    def test_non_finite(self):
        with pytest.raises(FloatingPointError):
            category_loss(t([[float("nan"), 0.0]]), torch.tensor([0]))

    def test_softmax_sums_to_one(self):
        p = torch.softmax(torch.randn(5, 9, dtype=torch.float64), dim=1)
        assert torch.allclose(p.sum(1), torch.ones(5, dtype=torch.float64), atol=1e-9)


class TestAttributeLoss:
    def test_zero_logits(self):
        assert attribute_loss(torch.zeros(4, 2), torch.tensor([[1, 0], [0, 1], [1, 1], [0, 0]])).item() == \
            pytest.approx(2 * math.log(2), abs=1e-6)

    def test_saturated(self):
        assert attribute_loss(t([[50.0, -50.0]]), torch.tensor([[1, 0]])).item() < 1e-20

    def test_closed_form(self):
        oracle = sigmoid_xent([1.0, -1.0], [1, 0])
        assert oracle == pytest.approx(0.6265, abs=1e-4)
        assert attribute_loss(t([[1.0, -1.0]]), torch.tensor([[1, 0]])).item() == pytest.approx(oracle, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            attribute_loss(torch.zeros(2, 3), torch.zeros(2, 2))

    def test_non_finite(self):
        with pytest.raises(FloatingPointError):
            attribute_loss(t([[float("inf"), 0.0]]), torch.tensor([[1, 0]]))


class TestEmbeddingLoss:
    def zero_heads(self, m_cat, m_att):
        h = ClassifierHeads(4, m_cat, m_att).double()
        zero_output_layer(h.category)
        zero_output_layer(h.attribute)
        return h

    def test_untrained_composition(self):
        h = self.zero_heads(4, 2)
        out = embedding_loss(torch.randn(5, 4, dtype=torch.float64), torch.tensor([0, 1, 2, 3, 0]),
                             torch.tensor([[1, 0]] * 5), h)
        assert out["total"].item() == pytest.approx(math.log(4) + 2 * math.log(2), abs=1e-9)

    def test_additivity(self):
        torch.manual_seed(1)
        h = ClassifierHeads(4, 3, 5).double()
        e = torch.randn(6, 4, dtype=torch.float64)
        y = torch.tensor([0, 1, 2, 0, 1, 2])
        a = torch.randint(0, 2, (6, 5))
        out = embedding_loss(e, y, a, h)
        c, at = h(e)
        assert abs(out["total"].item() - (category_loss(c, y) + attribute_loss(at, a)).item()) < 1e-9

    def test_zero_when_components_zero(self):
        h = ClassifierHeads(2, 2, 1).double()
        with torch.no_grad():
            h.category.weight.copy_(t([[100.0, 0], [-100.0, 0]]))
            h.category.bias.zero_()
            h.attribute.weight.copy_(t([[100.0, 0]]))
            h.attribute.bias.zero_()
        out = embedding_loss(t([[1.0, 0.0]]), torch.tensor([0]), torch.tensor([[1]]), h)
        assert out["total"].item() < 1e-30
        assert out["total"].item() >= 0

    def test_category_mask(self):
        h = self.zero_heads(3, 2)
        out = embedding_loss(torch.zeros(2, 4, dtype=torch.float64), torch.tensor([-1, -1]),
                             torch.tensor([[1, 0], [0, 1]]), h, has_category=torch.tensor([False, False]))
        assert out["cat"].item() == 0.0
        assert out["att"].item() == pytest.approx(2 * math.log(2))

    def test_non_negative_random(self):
        rng = np.random.default_rng(0)
        h = ClassifierHeads(4, 3, 5).double()
        for _ in range(20):
            e = torch.from_numpy(rng.standard_normal((4, 4)) * 5)
            out = embedding_loss(e, torch.from_numpy(rng.integers(0, 3, 4)), torch.from_numpy(rng.integers(0, 2, (4, 5))), h)
            assert min(out["cat"].item(), out["att"].item(), out["total"].item()) >= 0
