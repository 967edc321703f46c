"""Masked-image construction shared by every other module.

Conventions used throughout the package:

* images are float tensors with channels first: ``(C, H, W)`` for a single
  sample or ``(N, C, H, W)`` for a batch, pixel values in ``[0, 1]``;
* masks are float tensors of shape ``(H, W)`` / ``(N, H, W)``; a value of 1
  means the pixel is VISIBLE to downstream consumers;
* a masked image carries two parts: the pixel channels with hidden pixels
  zeroed out, and an indicator channel equal to the mask itself.  Both the
  zeroed pixels and the fact of masking are information the downstream
  models are allowed to see.

Boolean masks have values in ``{0, 1}``; relaxed masks (produced by the
differentiable sampler during training) have values in ``(0, 1)`` and
multiply the pixels softly.  Thresholding a relaxed mask at 0.5 recovers a
boolean one.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor


@dataclass(frozen=True)
class MaskedImage:
    """Pixel channels with hidden pixels zeroed, plus the visibility mask."""

    pixels: Tensor     # (..., C, H, W)
    indicator: Tensor  # (..., H, W)

    def network_input(self) -> Tensor:
        """Concatenate pixels and indicator into one (..., C+1, H, W) tensor.

        The indicator is appended as the last channel; every model that
        consumes masked images (classifier, autoencoder) takes this layout.
        """
        return torch.cat([self.pixels, self.indicator.unsqueeze(-3)], dim=-3)

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return tuple(self.indicator.shape[-2:])


def apply_mask(image: Tensor, mask: Tensor) -> MaskedImage:
    """Zero out hidden pixels and attach the mask as an indicator channel.

    Args:
        image: (..., C, H, W) pixels in [0, 1].
        mask: (..., H, W) visibility mask, boolean {0,1} or relaxed (0,1).
              Leading batch dimensions must match the image's.

    Returns:
        MaskedImage with ``pixels = image * mask`` (broadcast over channels)
        and ``indicator = mask``.

    Raises:
        ValueError: if spatial or batch dimensions disagree.
    """
    if image.dim() < 3:
        raise ValueError(f"image must be (..., C, H, W), got shape {tuple(image.shape)}")
    if image.shape[-2:] != mask.shape[-2:]:
        raise ValueError(
            f"image spatial shape {tuple(image.shape[-2:])} does not match "
            f"mask shape {tuple(mask.shape[-2:])}"
        )
    if image.shape[:-3] != mask.shape[:-2]:
        raise ValueError(
            f"batch dimensions differ: image {tuple(image.shape[:-3])} vs "
            f"mask {tuple(mask.shape[:-2])}"
        )
    return MaskedImage(pixels=image * mask.unsqueeze(-3), indicator=mask)


def threshold_mask(mask: Tensor, cutoff: float = 0.5) -> Tensor:
    """Harden a relaxed mask to boolean values (1 where value > cutoff)."""
    return (mask > cutoff).to(mask.dtype)


def validate_image_range(image: Tensor) -> None:
    """Reject pixel values outside [0, 1]."""
    lo, hi = float(image.min()), float(image.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"pixel values must lie in [0, 1], found range [{lo}, {hi}]")
