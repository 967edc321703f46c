"""Variational autoencoder bounding the masked-image entropy.

The encoder consumes the full masked-image input (zeroed pixels plus the
visibility indicator) and emits a diagonal Gaussian over the latent space.
The decoder maps a latent sample back to a keep-probability map ``rho_hat``
and a pixel reconstruction ``i_hat``; its likelihood is Bernoulli over the
indicator times Gaussian (fixed scale ``sigma``) over visible pixels, with
the additive normalization constant dropped.

The class-conditional variant concatenates a one-hot label to the latent
vector before the decoder; everything else is identical.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .archspec import (
    LayeredNetwork,
    build_network,
    infer_shapes,
    init_linear_,
    parse_architecture,
)
from .masking import MaskedImage
from .maskmodel import DEFAULT_EPSILON, clamp_probabilities

DEFAULT_SIGMA = math.sqrt(1.0 / 8.0)


class MaskedImageVae(nn.Module):
    def __init__(
        self,
        encoder_trunk: LayeredNetwork,
        decoder_trunk: LayeredNetwork,
        latent_dim: int,
        image_channels: int,
        sigma: float = DEFAULT_SIGMA,
        n_classes: int | None = None,
        epsilon: float = DEFAULT_EPSILON,
    ):
        """``n_classes`` switches on class conditioning of the decoder."""
        super().__init__()
        if sigma <= 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        self.encoder_trunk = encoder_trunk
        self.decoder_trunk = decoder_trunk
        self.latent_dim = latent_dim
        self.image_channels = image_channels
        self.sigma = sigma
        self.n_classes = n_classes
        self.epsilon = epsilon
        feat_shape = encoder_trunk.output_shape
        flat = 1
        for v in feat_shape:
            flat *= v
        self.head = nn.Linear(flat, 2 * latent_dim)
        # the trunk suppresses its own final nonlinearity; reapply it before the head
        self._trunk_activation = encoder_trunk.spec.layers[-1].nonlinearity if encoder_trunk.spec.layers else "none"

    @property
    def class_conditional(self) -> bool:
        return self.n_classes is not None

    def encode(self, masked: MaskedImage) -> tuple[Tensor, Tensor]:
        x = masked.network_input()
        h = self.encoder_trunk(x)
        if self._trunk_activation == "relu6":
            h = F.relu6(h)
        elif self._trunk_activation == "leaky_relu":
            h = F.leaky_relu(h)
        h = h.reshape(h.shape[0], -1)
        if h.shape[1] != self.head.in_features:
            raise ValueError(
                f"encoder features {h.shape[1]} do not match head input "
                f"{self.head.in_features}; wrong input shape?"
            )
        out = self.head(h)
        return out[:, :self.latent_dim], out[:, self.latent_dim:]

    def reparameterize(self, mu: Tensor, logvar: Tensor,
                       generator: torch.Generator | None = None) -> Tensor:
        eta = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        return mu + torch.exp(0.5 * logvar) * eta

    def decode(self, z: Tensor, labels: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """z (N, d) [+ labels (N,) when conditional] -> (rho_hat, i_hat)."""
        if self.class_conditional:
            if labels is None:
                raise ValueError("class-conditional decoder requires labels")
            onehot = F.one_hot(labels.long(), self.n_classes).to(z.dtype)
            z = torch.cat([z, onehot], dim=1)
        elif labels is not None:
            raise ValueError("decoder is not class-conditional; got unexpected labels")
        out = self.decoder_trunk(z)
        c = self.image_channels
        if out.shape[1] != c + 1:
            raise ValueError(
                f"decoder must emit {c + 1} channels (pixels + keep-probability), "
                f"got {out.shape[1]}"
            )
        i_hat = torch.sigmoid(out[:, :c])
        rho_hat = clamp_probabilities(torch.sigmoid(out[:, c]), self.epsilon)
        return rho_hat, i_hat


def reconstruction_nll(masked: MaskedImage, rho_hat: Tensor, i_hat: Tensor,
                       sigma: float) -> Tensor:
    """Bernoulli-times-Gaussian negative log-likelihood, constant dropped.

    Per pixel: -(1-m) log(1-rho_hat) - m[log rho_hat - (i - i_hat)^2/(2 sigma^2)],
    the squared-error term applying only where the pixel is visible.  Returns
    a per-sample (N,) tensor in nats.
    """
    m = masked.indicator
    if rho_hat.shape != m.shape:
        raise ValueError(f"rho_hat shape {tuple(rho_hat.shape)} != mask shape {tuple(m.shape)}")
    if i_hat.shape != masked.pixels.shape:
        raise ValueError(f"i_hat shape {tuple(i_hat.shape)} != pixel shape {tuple(masked.pixels.shape)}")
    bce = -(m * torch.log(rho_hat) + (1.0 - m) * torch.log1p(-rho_hat))
    sq = ((masked.pixels - i_hat) ** 2).sum(dim=-3) / (2.0 * sigma * sigma)
    return (bce + m * sq).sum(dim=(-2, -1))


def kl_to_prior(mu: Tensor, logvar: Tensor) -> Tensor:
    """Closed-form KL(N(mu, diag var) || N(0, I)) per sample, in nats."""
    return 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).sum(dim=-1)


def vae_loss(
    model: MaskedImageVae,
    masked: MaskedImage,
    generator: torch.Generator | None = None,
    labels: Tensor | None = None,
) -> Tensor:
    """Single-sample variational bound per item: recon NLL + KL.

    Not guaranteed nonnegative (the likelihood constant is dropped and the
    pixel term is a density); record the raw value.
    """
    mu, logvar = model.encode(masked)
    z = model.reparameterize(mu, logvar, generator)
    rho_hat, i_hat = model.decode(z, labels)
    return reconstruction_nll(masked, rho_hat, i_hat, model.sigma) + kl_to_prior(mu, logvar)


def build_vae(
    encoder_arch: str,
    decoder_arch: str,
    image_shape: tuple[int, int, int],
    latent_dim: int,
    generator: torch.Generator,
    sigma: float = DEFAULT_SIGMA,
    n_classes: int | None = None,
    dtype: torch.dtype = torch.float32,
    epsilon: float = DEFAULT_EPSILON,
) -> MaskedImageVae:
    """Construct encoder/decoder trunks from architecture strings.

    ``image_shape`` is (H, W, C); the encoder sees C+1 input channels, the
    decoder consumes latent_dim (+ n_classes when conditional) and must emit
    an (H, W, C+1) map.
    """
    h, w, c = image_shape
    enc_spec = infer_shapes(parse_architecture(encoder_arch, "leaky_relu"), (h, w, c + 1))
    dec_in = latent_dim + (n_classes or 0)
    dec_spec = infer_shapes(parse_architecture(decoder_arch, "leaky_relu"), (dec_in,))
    if dec_spec.output_shape != (h, w, c + 1):
        raise ValueError(
            f"decoder output {dec_spec.output_shape} does not match target {(h, w, c + 1)}"
        )
    encoder = build_network(enc_spec, generator, dtype)
    decoder = build_network(dec_spec, generator, dtype)
    model = MaskedImageVae(encoder, decoder, latent_dim, c, sigma, n_classes, epsilon)
    init_linear_(model.head, generator)
    return model.to(dtype)
