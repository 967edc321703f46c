import pytest
import torch

from bottlemask.masking import MaskedImage, apply_mask, threshold_mask, validate_image_range


class TestApplyMask:
    def test_all_ones_is_identity_on_pixels(self):
        image = torch.rand(3, 28, 28)
        masked = apply_mask(image, torch.ones(28, 28))
        assert torch.equal(masked.pixels, image)
        assert torch.equal(masked.indicator, torch.ones(28, 28))

    def test_all_zeros_blanks_everything(self):
        image = torch.rand(1, 8, 8)
        masked = apply_mask(image, torch.zeros(8, 8))
        assert torch.equal(masked.pixels, torch.zeros(1, 8, 8))
        assert torch.equal(masked.indicator, torch.zeros(8, 8))

    def test_single_pixel_cases(self):
        image = torch.full((1, 1, 1), 0.7)
        kept = apply_mask(image, torch.ones(1, 1))
        assert kept.pixels.item() == pytest.approx(0.7)
        assert kept.indicator.item() == 1.0
        hidden = apply_mask(image, torch.zeros(1, 1))
        assert hidden.pixels.item() == 0.0
        assert hidden.indicator.item() == 0.0

    def test_batched_broadcast_over_channels(self):
        image = torch.rand(5, 3, 8, 8)
        mask = (torch.rand(5, 8, 8) > 0.5).float()
        masked = apply_mask(image, mask)
        assert masked.pixels.shape == (5, 3, 8, 8)
        for c in range(3):
            assert torch.equal(masked.pixels[:, c], image[:, c] * mask)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            apply_mask(torch.rand(1, 8, 8), torch.ones(7, 8))
        with pytest.raises(ValueError):
            apply_mask(torch.rand(2, 1, 8, 8), torch.ones(3, 8, 8))
        with pytest.raises(ValueError):
            apply_mask(torch.rand(8, 8), torch.ones(8, 8))

    def test_boolean_remask_is_idempotent(self):
        image = torch.rand(2, 2, 10, 10)
        mask = (torch.rand(2, 10, 10) > 0.4).float()
        once = apply_mask(image, mask)
        twice = apply_mask(once.pixels, mask)
        assert torch.equal(once.pixels, twice.pixels)

    def test_zero_exactly_where_indicator_zero(self):
        image = torch.rand(1, 6, 6) + 0.01
        mask = (torch.rand(6, 6) > 0.5).float()
        masked = apply_mask(image, mask)
        hidden = masked.indicator == 0
        assert (masked.pixels[0][hidden] == 0).all()
        assert (masked.pixels[0][~hidden] > 0).all()


class TestRelaxedMasks:
    def test_elementwise_differentiable(self):
        # central finite differences on a relaxed mask within 1e-4 relative
        torch.manual_seed(0)
        image = torch.rand(1, 4, 4, dtype=torch.float64)
        mask = torch.rand(4, 4, dtype=torch.float64).clamp(0.1, 0.9).requires_grad_(True)
        weights = torch.rand(1, 4, 4, dtype=torch.float64)
        out = (apply_mask(image, mask).pixels * weights).sum()
        grad = torch.autograd.grad(out, mask)[0]
        eps = 1e-5
        for idx in [(0, 0), (1, 2), (3, 3)]:
            bumped = mask.detach().clone()
            bumped[idx] += eps
            up = (apply_mask(image, bumped).pixels * weights).sum()
            bumped[idx] -= 2 * eps
            down = (apply_mask(image, bumped).pixels * weights).sum()
            fd = (up - down) / (2 * eps)
            assert float(abs(fd - grad[idx])) <= 1e-4 * max(abs(float(fd)), 1e-12)

    def test_threshold_recovers_boolean(self):
        relaxed = torch.tensor([[0.2, 0.8], [0.5, 0.51]])
        hard = threshold_mask(relaxed)
        assert torch.equal(hard, torch.tensor([[0.0, 1.0], [0.0, 1.0]]))


class TestNetworkInput:
    def test_indicator_is_last_channel(self):
        image = torch.rand(2, 3, 8, 8)
        mask = torch.ones(2, 8, 8)
        stacked = apply_mask(image, mask).network_input()
        assert stacked.shape == (2, 4, 8, 8)
        assert torch.equal(stacked[:, 3], mask)
        assert torch.equal(stacked[:, :3], image)

    def test_spatial_shape(self):
        masked = MaskedImage(torch.rand(1, 5, 7), torch.ones(5, 7))
        assert masked.spatial_shape == (5, 7)


def test_validate_image_range():
    validate_image_range(torch.tensor([0.0, 0.5, 1.0]))
    with pytest.raises(ValueError):
        validate_image_range(torch.tensor([0.0, 1.2]))
    with pytest.raises(ValueError):
        validate_image_range(torch.tensor([-0.1, 0.5]))
