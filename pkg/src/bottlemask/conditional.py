"""Conditional-information objective: mask-aware variational models.

Instead of letting mask growth police leakage, this objective conditions
the prediction term on the mask itself, so a mask whose shape alone encodes
the label earns nothing.  Expanding the conditional mutual informations
leaves five terms; one (the mask entropy given the image) is computed in
closed form from ``rho``, the rest are bounded by dedicated variational
models:

* an autoencoder of the masked image conditioned on the mask,
* an autoencoder of the mask alone (Bernoulli likelihood only),
* an autoencoder of the full image conditioned on the mask and a label
  proxy (Gaussian likelihood only),
* the classifier on the masked image.

Conditioning wiring: the conditioning mask is appended as an extra input
channel to the encoder and injected spatially into the decoder right after
its reshape layer (resized to the decoder's working resolution).  The label
proxy is a one-hot vector concatenated to the latent sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from . import io
from .archspec import (
    LayeredNetwork,
    NetworkSpec,
    build_network,
    infer_shapes,
    init_linear_,
    parse_architecture,
)
from .masking import MaskedImage, apply_mask
from .maskmodel import (
    clamp_probabilities,
    mask_negative_log_likelihood,
    randomize_mask,
    sample_mask_hard,
    sample_mask_relaxed,
)
from .training import (
    ModelBundle,
    TrainConfig,
    TrainResult,
    TrainingDiverged,
    _as_tensors,
    build_classifier,
    build_mask_model,
    class_nll,
    evaluate_models,
    gradient_gate,
    update_beta,
)
from .vae import kl_to_prior, reconstruction_nll


def _with_final_channels(spec: NetworkSpec, channels: int) -> NetworkSpec:
    """Rewrite the channel count of the trailing conv/transpose-conv layer."""
    last = spec.layers[-1]
    if last.kind not in ("conv", "transpose_conv"):
        raise ValueError(f"decoder must end in a conv layer, got {last.kind!r}")
    layers = spec.layers[:-1] + (replace(last, out_channels=channels),)
    return replace(spec, layers=layers, shapes=None)


def _split_at_reshape(spec: NetworkSpec) -> tuple[NetworkSpec, NetworkSpec]:
    idx = [i for i, l in enumerate(spec.layers) if l.kind == "reshape"]
    if not idx:
        raise ValueError("spatial conditioning needs a decoder with a reshape layer")
    cut = idx[-1] + 1
    head = replace(spec, layers=spec.layers[:cut], segments=(cut,), shapes=None, input_shape=None)
    tail = replace(spec, layers=spec.layers[cut:], segments=(len(spec.layers) - cut,),
                   shapes=None, input_shape=None)
    return head, tail


class ConditionedVae(nn.Module):
    """Latent-variable model of a spatial target, optionally conditioned.

    ``cond_channels`` extra channels ride along the encoder input and are
    re-injected (resized) after the decoder's reshape stage;
    ``n_label_classes`` adds a one-hot block to the latent vector.  The
    likelihood over the ``out_channels`` decoder outputs is chosen by the
    caller (Bernoulli over masks, Gaussian over pixels, or both).
    """

    def __init__(
        self,
        encoder_arch: str,
        decoder_arch: str,
        image_shape: tuple[int, int, int],
        target_channels: int,
        out_channels: int,
        latent_dim: int,
        generator: torch.Generator,
        cond_channels: int = 0,
        n_label_classes: int | None = None,
        dtype: torch.dtype = torch.float32,
        epsilon: float = 1e-6,
    ):
        super().__init__()
        h, w, _ = image_shape
        self.latent_dim = latent_dim
        self.cond_channels = cond_channels
        self.n_label_classes = n_label_classes
        self.epsilon = epsilon

        enc_spec = infer_shapes(
            parse_architecture(encoder_arch, "leaky_relu"),
            (h, w, target_channels + cond_channels),
        )
        self.encoder = build_network(enc_spec, generator, dtype)
        self._enc_activation = enc_spec.layers[-1].nonlinearity if enc_spec.layers else "none"
        flat = 1
        for v in self.encoder.output_shape:
            flat *= v
        self.head = nn.Linear(flat, 2 * latent_dim)

        dec_spec = parse_architecture(decoder_arch, "leaky_relu")
        dec_spec = _with_final_channels(dec_spec, out_channels)
        dec_in = latent_dim + (n_label_classes or 0)
        if cond_channels:
            head_spec, tail_spec = _split_at_reshape(dec_spec)
            head_spec = infer_shapes(head_spec, (dec_in,))
            hh, ww, cc = head_spec.output_shape
            tail_spec = infer_shapes(tail_spec, (hh, ww, cc + cond_channels))
            self.dec_head = build_network(head_spec, generator, dtype)
            self.dec_tail = build_network(tail_spec, generator, dtype)
            self._dec_side = (hh, ww)
            out_shape = tail_spec.output_shape
        else:
            dec_spec = infer_shapes(dec_spec, (dec_in,))
            self.dec_head = build_network(dec_spec, generator, dtype)
            self.dec_tail = None
            self._dec_side = None
            out_shape = dec_spec.output_shape
        if out_shape != (h, w, out_channels):
            raise ValueError(f"decoder emits {out_shape}, expected {(h, w, out_channels)}")
        init_linear_(self.head, generator)
        self.to(dtype)

    def encode(self, target: Tensor, condition: Tensor | None = None) -> tuple[Tensor, Tensor]:
        x = target if condition is None else torch.cat([target, condition], dim=1)
        h = self.encoder(x)
        if self._enc_activation == "relu6":
            h = F.relu6(h)
        elif self._enc_activation == "leaky_relu":
            h = F.leaky_relu(h)
        out = self.head(h.reshape(h.shape[0], -1))
        return out[:, :self.latent_dim], out[:, self.latent_dim:]

    def decode(self, z: Tensor, condition: Tensor | None = None,
               labels: Tensor | None = None) -> Tensor:
        if self.n_label_classes is not None:
            if labels is None:
                raise ValueError("label-conditioned decoder requires labels")
            onehot = F.one_hot(labels.long(), self.n_label_classes).to(z.dtype)
            z = torch.cat([z, onehot], dim=1)
        h = self.dec_head(z)
        if self.dec_tail is not None:
            if condition is None:
                raise ValueError("spatially conditioned decoder requires the condition")
            cond_small = F.interpolate(condition, size=self._dec_side,
                                       mode="bilinear", align_corners=False)
            h = self.dec_tail(torch.cat([h, cond_small], dim=1))
        return h

    def sample(self, mu: Tensor, logvar: Tensor,
               generator: torch.Generator | None) -> Tensor:
        eta = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        return mu + torch.exp(0.5 * logvar) * eta


def bernoulli_nll(target: Tensor, probs: Tensor) -> Tensor:
    """-sum[t log p + (1-t) log(1-p)] over spatial dims, per sample."""
    ll = target * torch.log(probs) + (1.0 - target) * torch.log1p(-probs)
    return -ll.sum(dim=(-2, -1))


def gaussian_nll(target: Tensor, mean: Tensor, sigma: float) -> Tensor:
    """Sum of squared error over all channels/pixels, scaled by 1/(2 sigma^2)."""
    return ((target - mean) ** 2).sum(dim=(-3, -2, -1)) / (2.0 * sigma * sigma)


@dataclass
class CondModels:
    mask_model: nn.Module
    classifier: LayeredNetwork
    vae_masked_given_mask: ConditionedVae
    vae_mask: ConditionedVae
    vae_image_given_mask_label: ConditionedVae
    config: TrainConfig
    proxy_classifier: LayeredNetwork | None = None

    def modules(self) -> dict[str, nn.Module]:
        return {
            "mask": self.mask_model,
            "classifier": self.classifier,
            "vae_a": self.vae_masked_given_mask,
            "vae_b": self.vae_mask,
            "vae_c": self.vae_image_given_mask_label,
        }

    parameters = ModelBundle.parameters
    named_tensors = ModelBundle.named_tensors
    load_tensors = ModelBundle.load_tensors
    eval_mode = ModelBundle.eval_mode


def build_cond_models(config: TrainConfig, dtype: torch.dtype = torch.float32) -> CondModels:
    config.validate()
    generator = torch.Generator()
    generator.manual_seed(config.seed)
    h, w, c = config.image_shape
    mask_model = build_mask_model(config.mask_arch, config.image_shape, generator, dtype,
                                  init_keep_probability=config.init_keep_probability)
    classifier = build_classifier(config.classifier_arch, config.image_shape,
                                  config.n_classes, generator, dtype)
    vae_a = ConditionedVae(
        config.encoder_arch, config.decoder_arch, config.image_shape,
        target_channels=c + 1, out_channels=c + 1, latent_dim=config.latent_dim,
        generator=generator, cond_channels=1, dtype=dtype,
    )
    vae_b = ConditionedVae(
        config.encoder_arch, config.decoder_arch, config.image_shape,
        target_channels=1, out_channels=1, latent_dim=config.latent_dim,
        generator=generator, cond_channels=0, dtype=dtype,
    )
    vae_c = ConditionedVae(
        config.encoder_arch, config.decoder_arch, config.image_shape,
        target_channels=c, out_channels=c, latent_dim=config.latent_dim,
        generator=generator, cond_channels=1, n_label_classes=config.n_classes,
        dtype=dtype,
    )
    return CondModels(mask_model, classifier, vae_a, vae_b, vae_c, config)


def label_proxy(labels: Tensor, images: Tensor, mode: str,
                proxy_classifier: LayeredNetwork | None = None) -> Tensor:
    """Stand-in for the true label: the dataset label, or a frozen model's vote."""
    if mode == "groundtruth":
        return labels
    if mode == "pretrained":
        if proxy_classifier is None:
            raise ValueError("pretrained proxy mode needs a frozen classifier")
        with torch.no_grad():
            ones = torch.ones(images.shape[0], *images.shape[-2:], dtype=images.dtype)
            logits = proxy_classifier(apply_mask(images, ones).network_input())
        return logits.argmax(dim=-1)
    raise ValueError(f"unknown label proxy mode {mode!r}")


def cond_total_loss(
    images: Tensor,
    labels: Tensor,
    models: CondModels,
    beta: float,
    generator: torch.Generator,
    gate_vae_to_mask: bool = False,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Five-term conditional objective, batch-averaged, components reported.

    loss = beta * NLL(masked image | mask) + NLL(mask) - mask likelihood term
           + NLL(image | mask, label proxy) + classifier cross-entropy.
    The constant image-entropy term is dropped.  The gate detaches the mask
    inside the beta-weighted autoencoder only, mirroring the plain trainer.
    """
    config = models.config
    rho = models.mask_model(images)
    m = sample_mask_relaxed(rho, config.temperature, generator)
    cond = m.unsqueeze(1)

    proxy = label_proxy(labels, images, config.label_proxy, models.proxy_classifier)

    # (a) masked image given the mask, beta-weighted
    m_for_a = m.detach() if gate_vae_to_mask else m
    masked_a = apply_mask(images, m_for_a)
    cond_a = m_for_a.unsqueeze(1)
    mu, logvar = models.vae_masked_given_mask.encode(masked_a.network_input(), cond_a)
    z = models.vae_masked_given_mask.sample(mu, logvar, generator)
    out = models.vae_masked_given_mask.decode(z, cond_a)
    c = config.image_shape[2]
    rho_hat = clamp_probabilities(torch.sigmoid(out[:, c]))
    i_hat = torch.sigmoid(out[:, :c])
    nll_a = reconstruction_nll(masked_a, rho_hat, i_hat, config.sigma) + kl_to_prior(mu, logvar)

    # (b) the mask alone, Bernoulli likelihood
    mu, logvar = models.vae_mask.encode(cond)
    z = models.vae_mask.sample(mu, logvar, generator)
    q_hat = clamp_probabilities(torch.sigmoid(models.vae_mask.decode(z)[:, 0]))
    nll_b = bernoulli_nll(m, q_hat) + kl_to_prior(mu, logvar)

    # exact-in-expectation mask term, subtracted
    mask_term = mask_negative_log_likelihood(m, rho)

    # (c) full image given mask and label proxy, Gaussian likelihood
    mu, logvar = models.vae_image_given_mask_label.encode(images, cond)
    z = models.vae_image_given_mask_label.sample(mu, logvar, generator)
    i_full = torch.sigmoid(models.vae_image_given_mask_label.decode(z, cond, labels=proxy))
    nll_c = gaussian_nll(images, i_full, config.sigma) + kl_to_prior(mu, logvar)

    # (d) classifier on the masked image
    m_cls = randomize_mask(m, config.policy(), generator)
    logits = models.classifier(apply_mask(images, m_cls).network_input())
    class_term = class_nll(logits, labels)

    loss = (beta * nll_a + nll_b - mask_term + nll_c + class_term).mean()
    components = {
        "vae_loss": nll_a.mean().detach(),
        "mask_vae_nll": nll_b.mean().detach(),
        "mask_nll": mask_term.mean().detach(),
        "image_vae_nll": nll_c.mean().detach(),
        "class_nll": class_term.mean().detach(),
        "total_loss": loss.detach(),
        "logits": logits.detach(),
        "proxy_agreement": (proxy == labels).float().mean(),
    }
    return loss, components


def train_cond(config: TrainConfig, dataset, out_dir: Path | str | None = None,
               test_dataset=None) -> TrainResult:
    """Same contract as the plain trainer, driving the conditional loss.

    The pressure controller watches the beta-weighted masked-image
    autoencoder component.
    """
    config.validate()
    if config.objective != "cond_ib":
        raise ValueError("train_cond requires objective='cond_ib'")
    if len(dataset.images) == 0:
        raise ValueError("dataset is empty")

    models = build_cond_models(config)
    if config.label_proxy == "pretrained":
        if not config.proxy_checkpoint:
            raise ValueError("pretrained proxy mode needs config.proxy_checkpoint")
        from .training import load_models
        models.proxy_classifier = load_models(config.proxy_checkpoint).classifier
        models.proxy_classifier.eval()

    images, labels = _as_tensors(dataset)
    test_images, test_labels = _as_tensors(test_dataset) if test_dataset is not None else (images, labels)

    optimizer = torch.optim.Adam(models.parameters(), lr=config.learning_rate)
    generator = torch.Generator()
    generator.manual_seed(config.seed + 1)

    log = io.MetricLog()
    beta = config.beta0
    vae_ema: float | None = None
    threshold = config.target_mid()
    n = images.shape[0]

    for step in range(config.steps):
        idx = torch.randint(0, n, (min(config.batch_size, n),), generator=generator)
        batch_images = images[idx]
        batch_labels = labels[idx]

        gate_active = (
            config.beta_mode == "grad_gate"
            and vae_ema is not None
            and gradient_gate(vae_ema, threshold)
        )
        loss, parts = cond_total_loss(batch_images, batch_labels, models, beta,
                                      generator, gate_vae_to_mask=gate_active)
        if not torch.isfinite(loss):
            log.append({"kind": "abort", "step": step, "total_loss": float(loss.detach()),
                        "beta": beta, "reason": "non-finite loss"})
            if out_dir is not None:
                _persist_cond(Path(out_dir), models, log)
            raise TrainingDiverged(f"non-finite loss at step {step}")

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        vae_now = float(parts["vae_loss"])
        vae_ema = vae_now if vae_ema is None else 0.9 * vae_ema + 0.1 * vae_now
        log.append({
            "kind": "step",
            "step": step,
            "beta": beta,
            "vae_loss": vae_now,
            "mask_vae_nll": float(parts["mask_vae_nll"]),
            "mask_nll": float(parts["mask_nll"]),
            "image_vae_nll": float(parts["image_vae_nll"]),
            "class_nll": float(parts["class_nll"]),
            "total_loss": float(parts["total_loss"]),
            "train_accuracy": float((parts["logits"].argmax(dim=-1) == batch_labels).float().mean()),
            "proxy_agreement": float(parts["proxy_agreement"]),
            "gate_active": bool(gate_active),
        })

        if config.beta_mode == "adaptive" and step >= config.beta_warmup:
            beta = update_beta(beta, vae_now, config.target_range(), config.beta_eta,
                               config.beta_min, config.beta_max, config.beta_step_limit)

        if config.eval_every and (step + 1) % config.eval_every == 0 and step + 1 < config.steps:
            record = evaluate_models(models, test_images, test_labels,
                                     seed=config.seed * 1000003 + step,
                                     max_samples=config.eval_samples)
            record.update({"kind": "eval", "step": step + 1})
            log.append(record)

    record = evaluate_models(models, test_images, test_labels,
                             seed=config.seed * 1000003 + config.steps,
                             max_samples=config.eval_samples)
    record.update({"kind": "eval", "step": config.steps})
    log.append(record)

    checkpoint_path = None
    if out_dir is not None:
        checkpoint_path = _persist_cond(Path(out_dir), models, log)
    return TrainResult(models=models, log=log, checkpoint_path=checkpoint_path)


def _persist_cond(out_dir: Path, models: CondModels, log: io.MetricLog) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint = out_dir / "checkpoint"
    io.save_checkpoint(checkpoint, models.named_tensors(), models.config.to_items())
    log.save(out_dir / "metrics.jsonl")
    return checkpoint


def load_cond_models(checkpoint_path: Path | str) -> CondModels:
    tensors, items = io.load_checkpoint(checkpoint_path)
    config = TrainConfig.from_items(items)
    models = build_cond_models(config)
    models.load_tensors(tensors)
    return models
