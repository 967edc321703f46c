"""Scikit-learn-style front end over the mask-learning pipeline.

``BottleneckMasker`` is a combined transformer/classifier: ``fit(X, y)``
trains the mask model, classifier and autoencoder jointly on labeled
images; ``transform(X)`` returns masked images (zeroed pixels plus the
visibility channel) ready for downstream consumers; ``predict(X)`` runs the
internal classifier on masked inputs.  All constructor arguments follow the
get_params/set_params contract, so the estimator drops into pipelines and
parameter searches.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from . import configs
from .masking import apply_mask, threshold_mask
from .maskmodel import sample_mask_hard
from .training import TrainConfig, train
from .validation import check_images, check_labels


class BottleneckMasker(BaseEstimator, TransformerMixin):
    """Learn boolean attention masks that keep just enough to classify.

    Parameters mirror the training configuration; ``recipe`` selects a
    built-in architecture set by name (or "auto" to pick by image size),
    and individual architecture strings may override it.

    Attributes (after fit):
        models_: trained model bundle.
        config_: resolved training configuration.
        history_: metric log of the run.
        n_classes_, image_shape_: data geometry seen during fit.
    """

    def __init__(
        self,
        objective: str = "ib",
        recipe: str = "auto",
        mask_arch: str | None = None,
        classifier_arch: str | None = None,
        encoder_arch: str | None = None,
        decoder_arch: str | None = None,
        latent_dim: int | None = None,
        sigma: float | None = None,
        vae_target: float | tuple[float, float] | None = None,
        beta0: float = 1e-3,
        beta_mode: str = "adaptive",
        beta_eta: float = 0.01,
        temperature: float = 0.5,
        randomize: bool = False,
        rect_count: int = 1,
        rect_size_range: tuple[int, int] | None = None,
        steps: int = 500,
        batch_size: int = 32,
        learning_rate: float = 1e-3,
        seed: int = 0,
        eval_draw_seed: int = 12345,
    ):
        self.objective = objective
        self.recipe = recipe
        self.mask_arch = mask_arch
        self.classifier_arch = classifier_arch
        self.encoder_arch = encoder_arch
        self.decoder_arch = decoder_arch
        self.latent_dim = latent_dim
        self.sigma = sigma
        self.vae_target = vae_target
        self.beta0 = beta0
        self.beta_mode = beta_mode
        self.beta_eta = beta_eta
        self.temperature = temperature
        self.randomize = randomize
        self.rect_count = rect_count
        self.rect_size_range = rect_size_range
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.eval_draw_seed = eval_draw_seed

    # ------------------------------------------------------------------
    def _pick_recipe(self, image_shape: tuple[int, int, int]) -> configs.Recipe:
        if self.recipe != "auto":
            return configs.RECIPES[self.recipe]
        by_shape = {r.image_shape: r for r in configs.RECIPES.values()}
        if image_shape in by_shape:
            return by_shape[image_shape]
        raise ValueError(
            f"no built-in recipe for image shape {image_shape}; pass recipe= or "
            "explicit architecture strings"
        )

    def _resolve_config(self, image_shape, n_classes) -> TrainConfig:
        recipe = self._pick_recipe(image_shape)
        config = TrainConfig(
            image_shape=image_shape,
            n_classes=n_classes,
            mask_arch=self.mask_arch or recipe.mask_arch,
            classifier_arch=self.classifier_arch or recipe.classifier_arch,
            encoder_arch=self.encoder_arch or recipe.encoder_arch,
            decoder_arch=self.decoder_arch or recipe.decoder_arch,
            objective=self.objective.replace("-", "_"),
            latent_dim=self.latent_dim or recipe.latent_dim,
            sigma=self.sigma if self.sigma is not None else recipe.sigma,
            beta0=self.beta0,
            beta_mode=self.beta_mode,
            beta_eta=self.beta_eta,
            vae_target=self.vae_target if self.vae_target is not None else recipe.vae_target,
            temperature=self.temperature,
            randomize=self.randomize,
            rect_count=self.rect_count,
            rect_size_range=self.rect_size_range,
            steps=self.steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.seed,
        )
        if recipe.n_classes != n_classes:
            # patch the classifier head width to the observed class count
            config.classifier_arch = _retarget_head(config.classifier_arch, n_classes)
        config.validate()
        return config

    # ------------------------------------------------------------------
    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, X.shape[0])
        n_classes = int(y.max()) + 1
        image_shape = tuple(X.shape[1:])

        from .datasets import Dataset
        dataset = Dataset(name="fit", images=X, labels=y.astype(np.int32),
                          n_classes=n_classes)
        self.config_ = self._resolve_config(image_shape, n_classes)
        result = train(self.config_, dataset)
        self.models_ = result.models.eval_mode()
        self.history_ = result.log
        self.n_classes_ = n_classes
        self.image_shape_ = image_shape
        return self

    def _require_fitted(self):
        if not hasattr(self, "models_"):
            raise RuntimeError("estimator is not fitted; call fit(X, y) first")

    def _to_torch(self, X) -> torch.Tensor:
        X = check_images(X, self.image_shape_)
        return torch.from_numpy(X).permute(0, 3, 1, 2).contiguous()

    # ------------------------------------------------------------------
    def mask_probabilities(self, X) -> np.ndarray:
        """Per-pixel keep probabilities, shape (N, H, W)."""
        self._require_fitted()
        images = self._to_torch(X)
        with torch.no_grad():
            rho = self.models_.mask_model(images)
        return rho.numpy()

    def sample_masks(self, X, hard: bool = True) -> np.ndarray:
        """Boolean masks drawn at the estimator's evaluation seed."""
        self._require_fitted()
        images = self._to_torch(X)
        generator = torch.Generator()
        generator.manual_seed(self.eval_draw_seed)
        with torch.no_grad():
            rho = self.models_.mask_model(images)
            mask = sample_mask_hard(rho, generator) if hard else threshold_mask(rho)
        return mask.numpy()

    def transform(self, X) -> np.ndarray:
        """Masked images, channels-last (N, H, W, C+1); last channel = mask."""
        self._require_fitted()
        images = self._to_torch(X)
        generator = torch.Generator()
        generator.manual_seed(self.eval_draw_seed)
        with torch.no_grad():
            rho = self.models_.mask_model(images)
            mask = sample_mask_hard(rho, generator)
            masked = apply_mask(images, mask)
            stacked = masked.network_input()
        return stacked.permute(0, 2, 3, 1).numpy()

    def predict_proba(self, X) -> np.ndarray:
        self._require_fitted()
        images = self._to_torch(X)
        generator = torch.Generator()
        generator.manual_seed(self.eval_draw_seed)
        with torch.no_grad():
            rho = self.models_.mask_model(images)
            mask = sample_mask_hard(rho, generator)
            logits = self.models_.classifier(apply_mask(images, mask).network_input())
        return torch.softmax(logits, dim=-1).numpy()

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def score(self, X, y) -> float:
        X = check_images(X, self.image_shape_)
        y = check_labels(y, X.shape[0], self.n_classes_)
        return float((self.predict(X) == y).mean())


def _retarget_head(classifier_arch: str, n_classes: int) -> str:
    """Rewrite the trailing FC width of a classifier string."""
    head, sep, tail = classifier_arch.rpartition("FC(")
    if not sep:
        raise ValueError("classifier architecture has no FC head to retarget")
    return f"{head}FC({n_classes})"


__all__ = ["BottleneckMasker"]
