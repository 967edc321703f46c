"""Mask-probability network, mask sampling, entropies and mask growth.

The mask model maps an image to a per-pixel keep-probability map ``rho``.
Training samples a relaxed mask from ``rho`` with the binary concrete
(Gumbel-softmax) trick so gradients flow back into the model; evaluation
draws hard Bernoulli masks.  Two entropy estimators are provided: the exact
closed form over ``rho`` and the sampled negative log-likelihood, whose
expectation over hard draws equals the closed form.

Mask growth never hides a visible pixel: the grown mask is the elementwise
maximum of the input mask and one or more transparent rectangles.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

DEFAULT_EPSILON = 1e-6


def clamp_probabilities(rho: Tensor, epsilon: float = DEFAULT_EPSILON) -> Tensor:
    return rho.clamp(epsilon, 1.0 - epsilon)


class MaskProbabilityModel(nn.Module):
    """Wraps a trunk network emitting one logit per pixel.

    Output is squashed through a sigmoid and clamped to ``(eps, 1-eps)``; a
    zero final layer therefore yields rho = 0.5 everywhere.
    """

    def __init__(self, network: nn.Module, epsilon: float = DEFAULT_EPSILON):
        super().__init__()
        self.network = network
        self.epsilon = epsilon

    def forward(self, images: Tensor) -> Tensor:
        """images (N, C, H, W) -> rho (N, H, W)."""
        logits = self.network(images)
        if logits.dim() != 4 or logits.shape[1] != 1:
            raise ValueError(f"mask trunk must emit (N, 1, H, W), got {tuple(logits.shape)}")
        if logits.shape[-2:] != images.shape[-2:]:
            raise ValueError(
                f"mask trunk output {tuple(logits.shape[-2:])} does not match "
                f"image spatial shape {tuple(images.shape[-2:])}"
            )
        return clamp_probabilities(torch.sigmoid(logits.squeeze(1)), self.epsilon)


def logistic_noise(shape: tuple[int, ...], generator: torch.Generator | None,
                   dtype: torch.dtype = torch.float32) -> Tensor:
    """Difference of two Gumbel(0,1) draws, i.e. standard logistic noise."""
    u = torch.rand(shape, generator=generator, dtype=dtype)
    u = u.clamp(1e-12, 1.0 - 1e-12)
    return torch.log(u) - torch.log1p(-u)


def sample_mask_relaxed(
    rho: Tensor,
    temperature: float,
    generator: torch.Generator | None = None,
    noise: Tensor | None = None,
) -> Tensor:
    """Binary concrete relaxation of a Bernoulli(rho) mask.

    Returns values in (0, 1), differentiable with respect to ``rho``.
    Thresholding the sample at 0.5 yields an exact Bernoulli(rho) draw for
    any temperature; the temperature controls only how soft intermediate
    values are.  ``noise`` may be supplied to pin the stochasticity (used by
    the finite-difference tests).
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if noise is None:
        noise = logistic_noise(rho.shape, generator, dtype=rho.dtype)
    logit = torch.log(rho) - torch.log1p(-rho)
    return torch.sigmoid((logit + noise) / temperature)


def sample_mask_hard(rho: Tensor, generator: torch.Generator | None = None) -> Tensor:
    """Draw a boolean mask, each pixel independently 1 with probability rho."""
    u = torch.rand(rho.shape, generator=generator, dtype=rho.dtype)
    return (u < rho).to(rho.dtype)


def mask_entropy_continuous(rho: Tensor) -> Tensor:
    """Exact mask entropy in nats, summed over pixels.

    For rho of shape (..., H, W) returns shape (...,); a 28x28 map of 0.5
    gives 784*ln 2.
    """
    h = -(rho * torch.log(rho) + (1.0 - rho) * torch.log1p(-rho))
    return h.sum(dim=(-2, -1))


def mask_negative_log_likelihood(mask: Tensor, rho: Tensor) -> Tensor:
    """Per-pixel Bernoulli NLL of a (possibly relaxed) mask under rho, summed.

    The expectation of this quantity over hard draws from rho equals
    mask_entropy_continuous(rho).
    """
    if mask.shape != rho.shape:
        raise ValueError(f"mask shape {tuple(mask.shape)} != rho shape {tuple(rho.shape)}")
    ll = mask * torch.log(rho) + (1.0 - mask) * torch.log1p(-rho)
    return -ll.sum(dim=(-2, -1))


@dataclass(frozen=True)
class RandomizationPolicy:
    """Transparent-rectangle mask growth.

    ``rect_size_range`` bounds each rectangle side (inclusive); ``None``
    resolves to (4, max(4, side // 2)) at application time.
    """

    enabled: bool = True
    rect_count: int = 1
    rect_size_range: tuple[int, int] | None = None

    def resolve_size_range(self, height: int, width: int) -> tuple[int, int]:
        side = min(height, width)
        if self.rect_size_range is None:
            lo, hi = 4, max(4, side // 2)
        else:
            lo, hi = self.rect_size_range
        if lo < 1 or lo > hi:
            raise ValueError(f"invalid rectangle size range ({lo}, {hi})")
        if hi > side:
            raise ValueError(
                f"rectangle size {hi} exceeds image side {side}; rejected policy"
            )
        return lo, hi


def _randint(lo: int, hi: int, generator: torch.Generator | None) -> int:
    # inclusive bounds
    return int(torch.randint(lo, hi + 1, (1,), generator=generator).item())


def randomize_mask(
    mask: Tensor,
    policy: RandomizationPolicy,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Grow a mask by overlaying randomly placed transparent rectangles.

    Never decreases any mask value: the result is max(mask, rectangles).
    A disabled policy returns the mask unchanged.  Batched masks get
    independent rectangles per sample.
    """
    if not policy.enabled:
        return mask
    height, width = mask.shape[-2], mask.shape[-1]
    lo, hi = policy.resolve_size_range(height, width)
    rects = torch.zeros(mask.shape, dtype=mask.dtype).reshape(-1, height, width)
    for sample in rects:
        for _ in range(policy.rect_count):
            rh = _randint(lo, hi, generator)
            rw = _randint(lo, hi, generator)
            y0 = _randint(0, height - rh, generator)
            x0 = _randint(0, width - rw, generator)
            sample[y0:y0 + rh, x0:x0 + rw] = 1.0
    return torch.maximum(mask, rects.reshape(mask.shape))
