"""Loss assembly, the compression-pressure controller and the training loop.

The per-sample objective combines three terms: the masked-image autoencoder
bound weighted by ``beta``, the classifier cross-entropy on the grown mask,
and (subtracted, also weighted by ``beta``) the sampled mask likelihood term
whose expectation is the exact mask entropy.  ``beta`` either stays fixed,
is steered multiplicatively so the autoencoder loss settles into a target
band, or stays fixed while a gradient gate cuts the autoencoder's influence
on the mask model once its loss has dropped below the target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import Tensor
from torch.nn import functional as F

from . import io
from .archspec import LayeredNetwork, _split_segments, build_network, infer_shapes, parse_architecture
from .masking import apply_mask
from .maskmodel import (
    MaskProbabilityModel,
    RandomizationPolicy,
    mask_negative_log_likelihood,
    randomize_mask,
    sample_mask_hard,
    sample_mask_relaxed,
)
from .vae import MaskedImageVae, build_vae, vae_loss

OBJECTIVES = ("ib", "ceb", "cond_ib")
BETA_MODES = ("fixed", "adaptive", "grad_gate")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the metric log carries an abort record."""


@dataclass
class TrainConfig:
    image_shape: tuple[int, int, int]       # (H, W, C)
    n_classes: int
    mask_arch: str
    classifier_arch: str
    encoder_arch: str
    decoder_arch: str
    objective: str = "ib"
    latent_dim: int = 24
    sigma: float = math.sqrt(1.0 / 8.0)
    beta0: float = 1e-3
    beta_mode: str = "adaptive"
    beta_eta: float = 0.01
    beta_min: float = 1e-6
    beta_max: float = 1e3
    beta_step_limit: float = 0.5
    beta_warmup: int = 0            # steps before the controller engages
    vae_target: float | tuple[float, float] = 12.0
    temperature: float = 0.5
    init_keep_probability: float = 0.5   # mask model's keep rate at init
    randomize: bool = False
    rect_count: int = 1
    rect_size_range: Optional[tuple[int, int]] = None
    label_proxy: str = "groundtruth"        # cond_ib only: groundtruth | pretrained
    proxy_checkpoint: str = ""              # cond_ib + pretrained proxy
    steps: int = 500
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    eval_every: int = 0                     # 0 = final eval only
    eval_samples: int = 1024

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.beta_mode not in BETA_MODES:
            raise ValueError(f"beta_mode must be one of {BETA_MODES}, got {self.beta_mode!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.beta0 <= 0:
            raise ValueError("beta0 must be positive")
        lo, hi = self.target_range()
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
            raise ValueError(f"vae_target range ({lo}, {hi}) must be finite and ordered")
        if self.label_proxy not in ("groundtruth", "pretrained"):
            raise ValueError(f"unknown label proxy {self.label_proxy!r}")

    def target_range(self) -> tuple[float, float]:
        """Scalar targets widen to a symmetric ±10% band around the value."""
        if isinstance(self.vae_target, (tuple, list)):
            lo, hi = self.vae_target
            return float(lo), float(hi)
        t = float(self.vae_target)
        band = max(0.1 * abs(t), 1e-6)
        return t - band, t + band

    def target_mid(self) -> float:
        lo, hi = self.target_range()
        return 0.5 * (lo + hi)

    def policy(self) -> RandomizationPolicy:
        return RandomizationPolicy(
            enabled=self.randomize,
            rect_count=self.rect_count,
            rect_size_range=self.rect_size_range,
        )

    def to_items(self) -> dict[str, str]:
        items = {}
        for key, value in self.__dict__.items():
            if isinstance(value, (tuple, list)):
                items[key] = ",".join(str(v) for v in value)
            elif value is None:
                items[key] = ""
            else:
                items[key] = str(value)
        return items

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        for key, raw in items.items():
            if key not in cls.__dataclass_fields__:
                raise ValueError(f"unknown config key {key!r}")
            if key == "image_shape":
                kwargs[key] = tuple(int(v) for v in raw.split(","))
            elif key == "rect_size_range":
                kwargs[key] = tuple(int(v) for v in raw.split(",")) if raw else None
            elif key == "vae_target":
                parts = raw.split(",")
                kwargs[key] = float(parts[0]) if len(parts) == 1 else (float(parts[0]), float(parts[1]))
            elif key in ("n_classes", "latent_dim", "steps", "batch_size", "seed",
                         "eval_every", "eval_samples", "rect_count", "beta_warmup"):
                kwargs[key] = int(raw)
            elif key in ("sigma", "beta0", "beta_eta", "beta_min", "beta_max", "beta_step_limit",
                         "temperature", "learning_rate", "init_keep_probability"):
                kwargs[key] = float(raw)
            elif key == "randomize":
                kwargs[key] = raw == "True"
            else:
                kwargs[key] = raw
        return cls(**kwargs)


@dataclass
class ModelBundle:
    mask_model: MaskProbabilityModel
    classifier: LayeredNetwork
    vae: MaskedImageVae
    config: TrainConfig

    def modules(self) -> dict[str, torch.nn.Module]:
        return {"mask": self.mask_model, "classifier": self.classifier, "vae": self.vae}

    def parameters(self):
        for module in self.modules().values():
            yield from module.parameters()

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, module in self.modules().items():
            for name, param in module.named_parameters():
                out[f"{prefix}.{name}"] = param.detach().cpu().numpy()
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        named = {}
        for prefix, module in self.modules().items():
            for name, param in module.named_parameters():
                named[f"{prefix}.{name}"] = param
        missing = set(named) - set(tensors)
        if missing:
            raise ValueError(f"checkpoint is missing parameters: {sorted(missing)[:4]}...")
        with torch.no_grad():
            for name, param in named.items():
                param.copy_(torch.from_numpy(np.ascontiguousarray(tensors[name])).to(param.dtype))

    def eval_mode(self) -> "ModelBundle":
        for module in self.modules().values():
            module.eval()
        return self


def _mask_nonlinearities(arch: str) -> tuple[str, ...]:
    """First segment relu6, later segments leaky_relu."""
    n = len(_split_segments(arch))
    return tuple("relu6" if i == 0 else "leaky_relu" for i in range(n))


def build_classifier(arch: str, image_shape: tuple[int, int, int], n_classes: int,
                     generator: torch.Generator, dtype: torch.dtype = torch.float32) -> LayeredNetwork:
    h, w, c = image_shape
    spec = infer_shapes(parse_architecture(arch, "relu6"), (h, w, c + 1))
    if spec.output_shape != (n_classes,):
        raise ValueError(
            f"classifier must end in a {n_classes}-way output, got {spec.output_shape}"
        )
    return build_network(spec, generator, dtype)


def build_mask_model(arch: str, image_shape: tuple[int, int, int],
                     generator: torch.Generator, dtype: torch.dtype = torch.float32,
                     epsilon: float = 1e-6,
                     init_keep_probability: float = 0.5) -> MaskProbabilityModel:
    h, w, c = image_shape
    spec = infer_shapes(parse_architecture(arch, _mask_nonlinearities(arch)), (h, w, c))
    if spec.output_shape != (h, w, 1):
        raise ValueError(
            f"mask trunk must emit a ({h}, {w}, 1) map, got {spec.output_shape}"
        )
    network = build_network(spec, generator, dtype)
    if init_keep_probability != 0.5:
        if not 0.0 < init_keep_probability < 1.0:
            raise ValueError("init_keep_probability must be strictly inside (0, 1)")
        # bias the final layer so training starts from a mostly-open mask;
        # an early all-hidden state starves the classifier and is absorbing
        final = network.ops[-1]
        with torch.no_grad():
            final.bias.fill_(math.log(init_keep_probability / (1 - init_keep_probability)))
    return MaskProbabilityModel(network, epsilon)


def build_models(config: TrainConfig, dtype: torch.dtype = torch.float32) -> ModelBundle:
    """Instantiate all submodels with seed-deterministic parameters."""
    config.validate()
    generator = torch.Generator()
    generator.manual_seed(config.seed)
    mask_model = build_mask_model(config.mask_arch, config.image_shape, generator, dtype,
                                  init_keep_probability=config.init_keep_probability)
    classifier = build_classifier(config.classifier_arch, config.image_shape,
                                  config.n_classes, generator, dtype)
    vae = build_vae(
        config.encoder_arch,
        config.decoder_arch,
        config.image_shape,
        config.latent_dim,
        generator,
        sigma=config.sigma,
        n_classes=config.n_classes if config.objective == "ceb" else None,
        dtype=dtype,
    )
    return ModelBundle(mask_model, classifier, vae, config)


def class_nll(logits: Tensor, labels: Tensor) -> Tensor:
    """-log softmax(logits)[label], per sample, in nats."""
    logp = F.log_softmax(logits, dim=-1)
    return -logp.gather(-1, labels.long().unsqueeze(-1)).squeeze(-1)


def update_beta(beta: float, vae_loss_avg: float, target_range: tuple[float, float],
                eta: float, beta_min: float = 1e-6, beta_max: float = 1e3,
                step_limit: float = 0.5) -> float:
    """Multiplicative pressure controller.

    Inside the target band beta is left alone; above it beta grows (more
    compression pressure), below it beta shrinks.  The per-step exponent is
    limited to ``step_limit`` so an untrained autoencoder's huge early loss
    cannot slam beta across its whole range in one update.  Always clamped.
    """
    lo, hi = target_range
    mid = 0.5 * (lo + hi)
    if lo <= vae_loss_avg <= hi:
        return min(max(beta, beta_min), beta_max)
    denom = max(abs(mid), 1e-12)
    exponent = eta * (vae_loss_avg - mid) / denom
    exponent = min(max(exponent, -step_limit), step_limit)
    beta = beta * math.exp(exponent)
    return min(max(beta, beta_min), beta_max)


def gradient_gate(vae_loss_avg: float, threshold: float) -> bool:
    """True when the autoencoder loss has fallen below the threshold."""
    return vae_loss_avg < threshold


def total_loss_ib(
    images: Tensor,
    labels: Tensor,
    models: ModelBundle,
    beta: float,
    generator: torch.Generator,
    policy: RandomizationPolicy | None = None,
    gate_vae_to_mask: bool = False,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Batch-averaged objective and its separately reported components.

    Per sample: rho -> relaxed mask m -> grown mask m'; the autoencoder sees
    the image under m, the classifier under m', and the sampled mask
    likelihood term is subtracted.  In "ceb" mode the label is routed into
    the class-conditional decoder; nothing else changes.  When
    ``gate_vae_to_mask`` is set the autoencoder term is computed on a
    detached mask so it cannot push the mask model this step.
    """
    config = models.config
    policy = config.policy() if policy is None else policy
    rho = models.mask_model(images)
    m = sample_mask_relaxed(rho, config.temperature, generator)
    m_grown = randomize_mask(m, policy, generator)

    vae_mask = m.detach() if gate_vae_to_mask else m
    masked_for_vae = apply_mask(images, vae_mask)
    decoder_labels = labels if config.objective == "ceb" else None
    vae_term = vae_loss(models.vae, masked_for_vae, generator, labels=decoder_labels)

    masked_for_classifier = apply_mask(images, m_grown)
    logits = models.classifier(masked_for_classifier.network_input())
    class_term = class_nll(logits, labels)

    mask_term = mask_negative_log_likelihood(m, rho)

    loss = (beta * vae_term + class_term - beta * mask_term).mean()
    components = {
        "vae_loss": vae_term.mean().detach(),
        "class_nll": class_term.mean().detach(),
        "mask_nll": mask_term.mean().detach(),
        "total_loss": loss.detach(),
        "logits": logits.detach(),
    }
    return loss, components


@dataclass
class TrainResult:
    models: ModelBundle
    log: io.MetricLog
    checkpoint_path: Path | None = None


def _as_tensors(dataset, dtype: torch.dtype = torch.float32) -> tuple[Tensor, Tensor]:
    """Dataset (channels-last numpy) -> (N, C, H, W) pixels + long labels."""
    images = torch.from_numpy(np.ascontiguousarray(dataset.images)).to(dtype)
    images = images.permute(0, 3, 1, 2).contiguous()
    labels = torch.from_numpy(np.ascontiguousarray(dataset.labels)).long()
    return images, labels


def evaluate_models(
    models: ModelBundle,
    images: Tensor,
    labels: Tensor,
    seed: int,
    max_samples: int | None = None,
    chunk: int = 256,
) -> dict:
    """Hard-mask evaluation: accuracy, per-class accuracy, mask statistics."""
    generator = torch.Generator()
    generator.manual_seed(seed)
    n = images.shape[0] if max_samples is None else min(max_samples, images.shape[0])
    n_classes = models.config.n_classes
    correct = torch.zeros(n_classes)
    totals = torch.zeros(n_classes)
    l1_sum = torch.zeros(n_classes)
    with torch.no_grad():
        for start in range(0, n, chunk):
            img = images[start:start + chunk]
            lab = labels[start:start + chunk]
            rho = models.mask_model(img)
            hard = sample_mask_hard(rho, generator)
            logits = models.classifier(apply_mask(img, hard).network_input())
            pred = logits.argmax(dim=-1)
            l1 = hard.mean(dim=(-2, -1))
            for k in range(n_classes):
                sel = lab == k
                totals[k] += sel.sum()
                correct[k] += (pred[sel] == k).sum()
                l1_sum[k] += l1[sel].sum()
    per_class = torch.where(totals > 0, correct / totals.clamp(min=1), torch.zeros(()))
    acc = float(correct.sum() / max(float(totals.sum()), 1.0))
    l1_per_class = torch.where(totals > 0, l1_sum / totals.clamp(min=1), torch.zeros(()))
    return {
        "accuracy": acc,
        "per_class_accuracy": [float(v) for v in per_class],
        "class_counts": [int(v) for v in totals],
        "mask_l1_mean": float(l1_sum.sum() / max(float(totals.sum()), 1.0)),
        "mask_l1_per_class": [float(v) for v in l1_per_class],
    }


def train(config: TrainConfig, dataset, out_dir: Path | str | None = None,
          test_dataset=None) -> TrainResult:
    """Run the optimization loop; bitwise-reproducible for a fixed seed.

    Persists ``checkpoint/`` plus ``metrics.jsonl`` under ``out_dir`` when
    given.  A non-finite loss aborts with a diagnostic record appended to
    the log.
    """
    config.validate()
    if config.objective == "cond_ib":
        from .conditional import train_cond
        return train_cond(config, dataset, out_dir=out_dir, test_dataset=test_dataset)
    if len(dataset.images) == 0:
        raise ValueError("dataset is empty")

    models = build_models(config)
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
        loss, parts = total_loss_ib(
            batch_images, batch_labels, models, beta, generator,
            gate_vae_to_mask=gate_active,
        )
        if not torch.isfinite(loss):
            record = {"kind": "abort", "step": step, "total_loss": float(loss.detach()),
                      "beta": beta, "reason": "non-finite loss"}
            log.append(record)
            if out_dir is not None:
                _persist(Path(out_dir), models, log)
            raise TrainingDiverged(f"non-finite loss at step {step}")

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        vae_now = float(parts["vae_loss"])
        vae_ema = vae_now if vae_ema is None else 0.9 * vae_ema + 0.1 * vae_now
        train_acc = float((parts["logits"].argmax(dim=-1) == batch_labels).float().mean())
        log.append({
            "kind": "step",
            "step": step,
            "beta": beta,
            "vae_loss": vae_now,
            "mask_nll": float(parts["mask_nll"]),
            "class_nll": float(parts["class_nll"]),
            "total_loss": float(parts["total_loss"]),
            "train_accuracy": train_acc,
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
        checkpoint_path = _persist(Path(out_dir), models, log)
    return TrainResult(models=models, log=log, checkpoint_path=checkpoint_path)


def _persist(out_dir: Path, models: ModelBundle, log: io.MetricLog) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint = out_dir / "checkpoint"
    io.save_checkpoint(checkpoint, models.named_tensors(), models.config.to_items())
    log.save(out_dir / "metrics.jsonl")
    return checkpoint


def train_baseline_classifier(config: TrainConfig, dataset, test_dataset=None,
                              steps: int | None = None) -> dict:
    """Train the same classifier architecture on fully visible images.

    The reference point for judging masked-classifier accuracy: identical
    architecture, optimizer and step budget, but every pixel revealed
    (equivalent to a keep-probability of one everywhere).
    """
    config.validate()
    generator = torch.Generator()
    generator.manual_seed(config.seed + 7)
    classifier = build_classifier(config.classifier_arch, config.image_shape,
                                  config.n_classes, generator)
    images, labels = _as_tensors(dataset)
    test_images, test_labels = _as_tensors(test_dataset) if test_dataset is not None else (images, labels)
    optimizer = torch.optim.Adam(classifier.parameters(), lr=config.learning_rate)
    n = images.shape[0]
    total_steps = config.steps if steps is None else steps
    for _ in range(total_steps):
        idx = torch.randint(0, n, (min(config.batch_size, n),), generator=generator)
        img = images[idx]
        ones = torch.ones(img.shape[0], *img.shape[-2:], dtype=img.dtype)
        logits = classifier(apply_mask(img, ones).network_input())
        loss = class_nll(logits, labels[idx]).mean()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    with torch.no_grad():
        correct = 0
        for start in range(0, test_images.shape[0], 256):
            img = test_images[start:start + 256]
            ones = torch.ones(img.shape[0], *img.shape[-2:], dtype=img.dtype)
            pred = classifier(apply_mask(img, ones).network_input()).argmax(dim=-1)
            correct += int((pred == test_labels[start:start + 256]).sum())
    return {
        "accuracy": correct / test_images.shape[0],
        "classifier": classifier,
    }


def load_models(checkpoint_path: Path | str) -> ModelBundle:
    """Rebuild a model bundle from a persisted checkpoint directory."""
    tensors, items = io.load_checkpoint(checkpoint_path)
    config = TrainConfig.from_items(items)
    if config.objective == "cond_ib":
        from .conditional import load_cond_models
        return load_cond_models(checkpoint_path)
    models = build_models(config)
    models.load_tensors(tensors)
    return models
