import math

import numpy as np
import pytest
import torch

from bottlemask.archspec import build_network, infer_shapes, parse_architecture
from bottlemask.maskmodel import (
    DEFAULT_EPSILON,
    MaskProbabilityModel,
    RandomizationPolicy,
    clamp_probabilities,
    logistic_noise,
    mask_entropy_continuous,
    mask_negative_log_likelihood,
    randomize_mask,
    sample_mask_hard,
    sample_mask_relaxed,
)

MASK_28 = (
    "[C(1,1,4) -> C(3,2,4) -> C(1,1,8) -> C(3,2,8)] -> "
    "[Resize(12) -> C(1,1,16) -> Pad(1) -> Resize(28) -> C(1,1,16) -> C(1,1,1)]"
)


def make_mask_model(seed=0):
    spec = infer_shapes(parse_architecture(MASK_28, ("relu6", "leaky_relu")), (28, 28, 1))
    return MaskProbabilityModel(build_network(spec, seed))


class TestMaskProbabilities:
    def test_zeroed_final_layer_gives_half(self):
        model = make_mask_model()
        with torch.no_grad():
            model.network.ops[-1].weight.zero_()
            model.network.ops[-1].bias.zero_()
        rho = model(torch.rand(2, 1, 28, 28))
        assert rho.shape == (2, 28, 28)
        assert torch.allclose(rho, torch.full((2, 28, 28), 0.5))

    def test_extreme_logits_clamped(self):
        model = make_mask_model()
        with torch.no_grad():
            model.network.ops[-1].weight.zero_()
            model.network.ops[-1].bias.fill_(1000.0)
        rho = model(torch.rand(1, 1, 28, 28))
        assert float(rho.max()) == pytest.approx(1 - DEFAULT_EPSILON)
        with torch.no_grad():
            model.network.ops[-1].bias.fill_(-1000.0)
        rho = model(torch.rand(1, 1, 28, 28))
        assert float(rho.min()) == pytest.approx(DEFAULT_EPSILON)

    def test_receptive_field_is_local(self):
        # a perturbation 15+ pixels away must not move the probability map
        torch.manual_seed(0)
        model = make_mask_model(0)
        base = torch.rand(1, 1, 28, 28)
        perturbed = base.clone()
        perturbed[0, 0, 25, 25] = 1.0
        with torch.no_grad():
            rho_a = model(base)
            rho_b = model(perturbed)
        assert float((rho_a[0, :12, :12] - rho_b[0, :12, :12]).abs().max()) == 0.0
        # and the map does respond somewhere near the perturbation
        near = base.clone()
        near[0, 0, 14, 14] = 1.0
        with torch.no_grad():
            rho_c = model(near)
        assert float((rho_c[0, 8:21, 8:21] - rho_a[0, 8:21, 8:21]).abs().max()) > 0


class TestRelaxedSampling:
    def test_extreme_rho_saturates(self):
        g = torch.Generator().manual_seed(0)
        rho = torch.full((64, 8, 8), 1 - 1e-6)
        sample = sample_mask_relaxed(rho, 0.5, g)
        assert float(sample.min()) > 0.99

    def test_thresholded_keep_rate_matches_rho(self):
        g = torch.Generator().manual_seed(1)
        n = 10_000
        rho = torch.full((n,), 0.5).reshape(100, 10, 10)
        sample = sample_mask_relaxed(rho, 0.5, g)
        rate = float((sample > 0.5).float().mean())
        sigma = math.sqrt(0.5 * 0.5 / n)
        assert abs(rate - 0.5) <= 3 * sigma

    def test_gradient_matches_finite_differences_at_fixed_noise(self):
        rho = torch.tensor([[0.3, 0.6], [0.8, 0.45]], dtype=torch.float64).requires_grad_(True)
        noise = logistic_noise((2, 2), torch.Generator().manual_seed(5), dtype=torch.float64)
        out = sample_mask_relaxed(rho, 0.7, noise=noise).sum()
        grad = torch.autograd.grad(out, rho)[0]
        eps = 1e-6
        for idx in [(0, 0), (0, 1), (1, 0), (1, 1)]:
            bumped = rho.detach().clone()
            bumped[idx] += eps
            up = sample_mask_relaxed(bumped, 0.7, noise=noise).sum().item()
            bumped[idx] -= 2 * eps
            down = sample_mask_relaxed(bumped, 0.7, noise=noise).sum().item()
            fd = (up - down) / (2 * eps)
            assert abs(fd - float(grad[idx])) <= 1e-3 * max(abs(fd), 1e-9)

    def test_requires_positive_temperature(self):
        with pytest.raises(ValueError):
            sample_mask_relaxed(torch.full((2, 2), 0.5), 0.0)


class TestHardSampling:
    def test_extremes(self):
        g = torch.Generator().manual_seed(0)
        assert sample_mask_hard(torch.full((5, 5), 1 - 1e-6), g).min() == 1.0
        assert sample_mask_hard(torch.full((5, 5), 1e-6), g).max() == 0.0

    def test_empirical_rate_within_three_sigma(self):
        g = torch.Generator().manual_seed(2)
        rho_val = 0.3
        n = 10_000
        rho = torch.full((n,), rho_val).reshape(100, 10, 10)
        rate = float(sample_mask_hard(rho, g).mean())
        sigma = math.sqrt(rho_val * (1 - rho_val) / n)
        assert abs(rate - rho_val) <= 3 * sigma


class TestEntropies:
    def test_uniform_rho_28x28_is_784_ln2(self):
        rho = torch.full((28, 28), 0.5)
        assert float(mask_entropy_continuous(rho)) == pytest.approx(784 * math.log(2), rel=1e-5)

    def test_near_deterministic_rho_is_tiny(self):
        rho = clamp_probabilities(torch.zeros(28, 28))
        assert float(mask_entropy_continuous(rho)) < 0.05

    def test_matches_monte_carlo_entropy(self):
        # sampled-mask log-likelihood averages to the closed form
        g = torch.Generator().manual_seed(3)
        rho = torch.tensor([[0.2, 0.7], [0.5, 0.9]], dtype=torch.float64)
        n = 20_000
        batch = rho.expand(n, 2, 2)
        nll = mask_negative_log_likelihood(sample_mask_hard(batch, g), batch)
        closed = float(mask_entropy_continuous(rho))
        mc_sigma = float(nll.std() / math.sqrt(n))
        assert abs(float(nll.mean()) - closed) <= 3 * mc_sigma

    def test_nll_of_perfectly_predicted_mask_is_small(self):
        mask = (torch.rand(16, 16) > 0.5).double()
        rho = clamp_probabilities(mask)
        assert float(mask_negative_log_likelihood(mask, rho)) == pytest.approx(0.0, abs=1e-3)

    def test_nll_at_half_is_784_ln2(self):
        mask = (torch.rand(28, 28) > 0.3).float()
        rho = torch.full((28, 28), 0.5)
        assert float(mask_negative_log_likelihood(mask, rho)) == pytest.approx(784 * math.log(2), rel=1e-5)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            mask_negative_log_likelihood(torch.ones(3, 3), torch.full((4, 4), 0.5))

    def test_entropy_concave_per_pixel(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a, b = rng.uniform(0.01, 0.99, size=2)
            mid = torch.tensor([[(a + b) / 2]])
            ends = 0.5 * (
                mask_entropy_continuous(torch.tensor([[a]]))
                + mask_entropy_continuous(torch.tensor([[b]]))
            )
            assert float(mask_entropy_continuous(mid)) >= float(ends) - 1e-9


class TestRandomization:
    def test_all_ones_cannot_grow(self):
        g = torch.Generator().manual_seed(0)
        mask = torch.ones(12, 12)
        grown = randomize_mask(mask, RandomizationPolicy(rect_size_range=(3, 5)), g)
        assert torch.equal(grown, mask)

    def test_seeded_rectangle_matches_direct_construction(self):
        policy = RandomizationPolicy(rect_size_range=(3, 5))
        seed = 123
        grown = randomize_mask(torch.zeros(12, 12), policy, torch.Generator().manual_seed(seed))
        # replay the draw sequence to learn where the rectangle landed
        g = torch.Generator().manual_seed(seed)
        rh = int(torch.randint(3, 6, (1,), generator=g))
        rw = int(torch.randint(3, 6, (1,), generator=g))
        y0 = int(torch.randint(0, 12 - rh + 1, (1,), generator=g))
        x0 = int(torch.randint(0, 12 - rw + 1, (1,), generator=g))
        expected = torch.zeros(12, 12)
        expected[y0:y0 + rh, x0:x0 + rw] = 1.0
        assert torch.equal(grown, expected)

    def test_never_decreases_any_value(self):
        g = torch.Generator().manual_seed(7)
        policy = RandomizationPolicy(rect_count=2)
        for _ in range(1000):
            mask = torch.rand(10, 10)
            grown = randomize_mask(mask, policy, g)
            assert float((grown - mask).min()) >= 0.0

    def test_disabled_policy_is_identity(self):
        mask = torch.rand(6, 6)
        assert randomize_mask(mask, RandomizationPolicy(enabled=False)) is mask

    def test_oversized_rectangle_rejected(self):
        with pytest.raises(ValueError, match="rejected policy"):
            randomize_mask(torch.zeros(8, 8), RandomizationPolicy(rect_size_range=(4, 9)),
                           torch.Generator().manual_seed(0))

    def test_default_range_resolves_to_half_side(self):
        policy = RandomizationPolicy()
        assert policy.resolve_size_range(28, 28) == (4, 14)

    def test_batched_masks_get_independent_rectangles(self):
        g = torch.Generator().manual_seed(1)
        grown = randomize_mask(torch.zeros(4, 16, 16), RandomizationPolicy(rect_size_range=(4, 4)), g)
        assert grown.shape == (4, 16, 16)
        assert not torch.equal(grown[0], grown[1])
        assert float(grown.sum(dim=(-2, -1)).min()) == 16.0
