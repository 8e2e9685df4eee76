import math

import pytest
import torch

from charanim.losses import (
    LossWeights,
    RandomFeatureExtractor,
    adversarial_losses,
    feature_matching_loss,
    make_perceptual_extractor,
    perceptual_loss,
    total_generator_loss,
)
from charanim.networks import DiscriminatorOutput


def d_out(logit_values, shape=(1, 1, 1, 1)):
    """DiscriminatorOutput with one logit tensor per scale, no features."""
    logits = [torch.full(shape, v, dtype=torch.float64) for v in logit_values]
    return DiscriminatorOutput(logits=logits, features=[[] for _ in logit_values])


class TestAdversarial:
    def test_zero_logits_give_two_log_two(self):
        # hand value: -(log 0.5 + log 0.5) = 2 log 2
        _, adv_d = adversarial_losses(d_out([0.0]), d_out([0.0]))
        assert adv_d.item() == pytest.approx(2 * math.log(2), abs=1e-6)

    def test_single_patch_hand_example(self):
        # real logit log 3 -> p = 0.75; fake logit -log 3 -> p = 0.25
        # adv_d = -(log 0.75 + log 0.75) ~= 0.5754
        _, adv_d = adversarial_losses(d_out([math.log(3)]), d_out([-math.log(3)]))
        assert adv_d.item() == pytest.approx(-2 * math.log(0.75), abs=1e-6)
        assert adv_d.item() == pytest.approx(0.5754, abs=1e-4)

    def test_perfect_discriminator_loss_near_zero(self):
        _, adv_d = adversarial_losses(d_out([30.0]), d_out([-30.0]))
        assert 0.0 <= adv_d.item() < 1e-6

    def test_generator_loss_nonsaturating(self):
        # fake logit 0 -> adv_g = -log 0.5 = log 2
        adv_g, _ = adversarial_losses(d_out([10.0]), d_out([0.0]))
        assert adv_g.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_two_scales_averaged(self):
        _, adv_d_one = adversarial_losses(d_out([0.0]), d_out([0.0]))
        _, adv_d_two = adversarial_losses(d_out([0.0, 0.0]), d_out([0.0, 0.0]))
        assert adv_d_one.item() == pytest.approx(adv_d_two.item(), abs=1e-9)

    def test_nonfinite_logits_error(self):
        bad = d_out([float("nan")])
        with pytest.raises(RuntimeError, match="non-finite"):
            adversarial_losses(bad, d_out([0.0]))


class TestFeatureMatching:
    def test_identical_features_zero(self):
        feats = [[torch.rand(1, 4, 8, 8)], [torch.rand(1, 4, 4, 4)]]
        assert feature_matching_loss(feats, feats).item() == 0.0

    def test_hand_example_constant_difference(self):
        # T=1, N=4 elements, difference 0.5 everywhere -> (1/4) * 4 * 0.5 = 0.5
        real = [[torch.zeros(1, 1, 2, 2, dtype=torch.float64)]]
        fake = [[torch.full((1, 1, 2, 2), 0.5, dtype=torch.float64)]]
        assert feature_matching_loss(real, fake).item() == pytest.approx(0.5, abs=1e-9)

    def test_homogeneity(self):
        torch.manual_seed(0)
        real = [[torch.rand(1, 3, 8, 8)], [torch.rand(1, 3, 4, 4)]]
        fake = [[torch.rand(1, 3, 8, 8)], [torch.rand(1, 3, 4, 4)]]
        base = feature_matching_loss(real, fake).item()
        doubled = feature_matching_loss(
            [[2 * f for f in s] for s in real], [[2 * f for f in s] for s in fake]
        ).item()
        assert doubled == pytest.approx(2 * base, rel=1e-6)

    def test_real_features_detached(self):
        real_leaf = torch.rand(1, 2, 4, 4, requires_grad=True)
        fake_leaf = torch.rand(1, 2, 4, 4, requires_grad=True)
        loss = feature_matching_loss([[real_leaf]], [[fake_leaf]])
        loss.backward()
        assert real_leaf.grad is None
        assert fake_leaf.grad is not None

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            feature_matching_loss([[torch.rand(1, 2, 4, 4)]], [[torch.rand(1, 2, 8, 8)]])

    def test_finite_difference_gradient(self):
        torch.manual_seed(0)
        real = [[torch.rand(1, 2, 4, 4, dtype=torch.float64)]]
        fake_base = torch.rand(1, 2, 4, 4, dtype=torch.float64)
        fake = fake_base.clone().requires_grad_(True)
        feature_matching_loss(real, [[fake]]).backward()
        flat = fake_base.reshape(-1)
        grad = fake.grad.reshape(-1)
        eps = 1e-6
        for idx in (0, 7, 31):
            probe = flat.clone()
            probe[idx] += eps
            up = feature_matching_loss(real, [[probe.reshape(fake_base.shape)]]).item()
            probe[idx] -= 2 * eps
            down = feature_matching_loss(real, [[probe.reshape(fake_base.shape)]]).item()
            fd = (up - down) / (2 * eps)
            denom = max(abs(fd), abs(grad[idx].item()), 1e-8)
            assert abs(fd - grad[idx].item()) / denom < 1e-3


class TestPerceptual:
    def test_identity_zero(self):
        torch.manual_seed(0)
        extractor = RandomFeatureExtractor(seed=0)
        x = torch.rand(1, 3, 32, 32) * 2 - 1
        assert perceptual_loss(x, x, extractor).item() == 0.0

    def test_symmetry(self):
        torch.manual_seed(0)
        extractor = RandomFeatureExtractor(seed=0)
        x = torch.rand(1, 3, 32, 32) * 2 - 1
        y = torch.rand(1, 3, 32, 32) * 2 - 1
        assert perceptual_loss(x, y, extractor).item() == pytest.approx(
            perceptual_loss(y, x, extractor).item(), rel=1e-6
        )

    def test_noise_monotonicity(self):
        extractor = RandomFeatureExtractor(seed=1)
        wins = 0
        for seed in range(20):
            gen = torch.Generator().manual_seed(seed)
            x = torch.rand(1, 3, 32, 32, generator=gen) * 2 - 1
            noise = torch.randn(1, 3, 32, 32, generator=gen)
            small = perceptual_loss(x, x + 0.01 * noise, extractor).item()
            large = perceptual_loss(x, x + 0.1 * noise, extractor).item()
            wins += large > small
        assert wins == 20

    def test_extractor_deterministic_given_seed(self):
        a = RandomFeatureExtractor(seed=3)
        b = RandomFeatureExtractor(seed=3)
        x = torch.rand(1, 3, 16, 16)
        for fa, fb in zip(a(x), b(x)):
            assert torch.equal(fa, fb)

    def test_make_extractor_kinds(self):
        assert make_perceptual_extractor("random").name == "random-conv"
        # auto falls back to the random extractor when VGG weights are absent
        assert make_perceptual_extractor("auto").name in ("vgg16", "random-conv")
        with pytest.raises(ValueError):
            make_perceptual_extractor("bogus")


class TestTotal:
    def test_all_zero(self):
        zero = torch.tensor(0.0)
        assert total_generator_loss(zero, zero, zero).item() == 0.0

    def test_unit_weights_sum(self):
        total = total_generator_loss(
            torch.tensor(1.0),
            torch.tensor(2.0),
            torch.tensor(3.0),
            weights=LossWeights(adv=1.0, fm=1.0, perceptual=1.0),
        )
        assert total.item() == pytest.approx(6.0, abs=1e-9)

    def test_default_weights_hand_example(self):
        # weights (1, 10, 10) . components (0.5, 0.1, 0.2) = 3.5
        total = total_generator_loss(
            torch.tensor(0.5), torch.tensor(0.1), torch.tensor(0.2)
        )
        assert total.item() == pytest.approx(3.5, abs=1e-6)

    def test_mask_term_added(self):
        total = total_generator_loss(
            torch.tensor(0.5),
            torch.tensor(0.1),
            torch.tensor(0.2),
            mask_bce=torch.tensor(0.25),
        )
        assert total.item() == pytest.approx(3.75, abs=1e-6)

    def test_linearity_in_components(self):
        w = LossWeights(adv=2.0, fm=3.0, perceptual=5.0)
        a = total_generator_loss(torch.tensor(1.0), torch.tensor(1.0), torch.tensor(1.0), w)
        b = total_generator_loss(torch.tensor(2.0), torch.tensor(2.0), torch.tensor(2.0), w)
        assert b.item() == pytest.approx(2 * a.item(), rel=1e-9)
