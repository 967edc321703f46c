"""Built-in per-dataset recipes: architecture strings and training targets.

Each recipe carries the four architecture strings (mask trunk, classifier,
autoencoder encoder/decoder), the autoencoder loss target, the pixel-noise
scale and the latent width.  Recipes are looked up by dataset kind and can
be overridden field by field through run configs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .training import TrainConfig

SIGMA_DEFAULT = math.sqrt(1.0 / 8.0)


@dataclass(frozen=True)
class Recipe:
    image_shape: tuple[int, int, int]
    n_classes: int
    mask_arch: str
    classifier_arch: str
    encoder_arch: str
    decoder_arch: str
    vae_target: float
    latent_dim: int
    sigma: float = SIGMA_DEFAULT


RECIPES: dict[str, Recipe] = {
    # 28x28 single-channel images, binary altered/unaltered label
    "anomaly-mnist": Recipe(
        image_shape=(28, 28, 1),
        n_classes=2,
        mask_arch=(
            "[C(1,1,4) -> C(3,2,4) -> C(1,1,8) -> C(3,2,8)] -> "
            "[Resize(12) -> C(1,1,16) -> Pad(1) -> Resize(28) -> C(1,1,16) -> C(1,1,1)]"
        ),
        classifier_arch=(
            "C(1,1,4) -> C(3,2,4) -> C(1,1,8) -> C(3,2,8) -> C(1,1,16) -> "
            "C(3,2,16) -> Avg -> FC(2)"
        ),
        encoder_arch="C(3,2,16) -> C(3,2,16) -> C(3,1,16)",
        decoder_arch=(
            "FC(24) -> FC(49) -> Shape(7,7) -> T_s(3,2,16) -> T_s(3,1,16) -> "
            "T_s(3,2,16) -> C(1,1,2)"
        ),
        vae_target=12.0,
        latent_dim=24,
    ),
    # 32x32 RGB images, binary label
    "anomaly-cifar": Recipe(
        image_shape=(32, 32, 3),
        n_classes=2,
        mask_arch=(
            "[C(1,1,8) -> C(3,2,16) -> C(1,1,16) -> C(3,2,32)] -> "
            "[C_s(3,1,16) -> Resize(10) -> C_s(3,1,16) -> Resize(16) -> C_s(3,1,8) -> "
            "Resize(32) -> C_s(3,1,8) -> C(1,1,1)]"
        ),
        classifier_arch=(
            "C(1,1,8) -> C(3,2,16) -> C(1,1,16) -> C(3,2,32) -> C(1,1,32) -> "
            "C(3,2,48) -> C(1,1,48) -> Avg -> FC(2)"
        ),
        encoder_arch="C(3,2,8) -> C(3,2,8) -> C(3,2,16) -> C(3,1,16)",
        decoder_arch=(
            "FC(64) -> FC(128) -> Shape(8,8) -> T_s(3,2,16) -> T_s(3,1,16) -> "
            "T_s(3,2,16) -> T_s(3,1,4)"
        ),
        vae_target=25.0,
        latent_dim=64,
    ),
    # 56x56 composites, ten-way small-digit label
    "multidigit": Recipe(
        image_shape=(56, 56, 1),
        n_classes=10,
        mask_arch=(
            "[C(1,1,4) -> C_s(3,2,4) -> C(1,1,8) -> C(3,2,8)] -> "
            "[Resize(12) -> C_s(3,1,16) -> Pad(1) -> Resize(28) -> C_s(3,1,16) -> "
            "Resize(56) -> C(1,1,16) -> C(1,1,1)]"
        ),
        classifier_arch=(
            "C(1,1,4) -> C_s(3,2,4) -> C(1,1,8) -> C(3,2,8) -> C(1,1,16) -> "
            "C(3,2,16) -> C(1,1,16) -> C(3,2,16) -> Avg -> FC(10)"
        ),
        encoder_arch="C_s(3,2,16) -> C(3,2,16) -> C(3,2,16) -> C(3,1,8)",
        decoder_arch=(
            "FC(24) -> FC(49) -> Shape(7,7) -> T_s(3,2,16) -> T_s(3,1,16) -> "
            "T_s(3,2,8) -> T_s(3,2,4) -> C(1,1,2)"
        ),
        vae_target=50.0,
        latent_dim=64,
    ),
    # 40x40 digit-plus-anchors scenes, five-way label
    "anchors": Recipe(
        image_shape=(40, 40, 1),
        n_classes=5,
        mask_arch=(
            "[C(1,1,4) -> C(3,2,4) -> C(1,1,8) -> C(3,2,8)] -> "
            "[Resize(20) -> C_s(3,1,16) -> Resize(40) -> C(1,1,16) -> C(1,1,1)]"
        ),
        classifier_arch=(
            "C(1,1,4) -> C(3,2,4) -> C(1,1,8) -> C(3,2,8) -> C(1,1,16) -> "
            "C(3,2,16) -> Avg -> FC(5)"
        ),
        encoder_arch="C(3,2,16) -> C(3,2,16) -> C(3,1,16)",
        decoder_arch=(
            "FC(24) -> FC(100) -> Shape(10,10) -> T_s(3,2,16) -> T_s(3,1,16) -> "
            "T_s(3,2,16) -> C(1,1,2)"
        ),
        vae_target=20.0,
        latent_dim=24,
    ),
    # 128x128 RGB crops, four-way digit-count label
    "svhn": Recipe(
        image_shape=(128, 128, 3),
        n_classes=4,
        mask_arch=(
            "[C_s(3,1,4) -> C_s(3,2,4) -> C(1,1,8) -> C(3,2,8)] -> "
            "[C_s(3,1,8) -> C_s(5,1,8) -> Resize(16) -> C_s(5,1,8) -> C_s(5,1,8) -> "
            "Resize(32) -> C_s(3,1,4) -> C(1,1,1) -> Resize(128)]"
        ),
        classifier_arch=(
            "C_s(3,1,4) -> C_s(3,2,4) -> C_s(3,1,4) -> C_s(3,2,4) -> C_s(3,1,4) -> "
            "C_s(3,2,8) -> C_s(3,1,8) -> C_s(3,2,8) -> C_s(3,1,8) -> C_s(3,2,8) -> "
            "Avg -> FC(4)"
        ),
        encoder_arch=(
            "C_s(3,2,8) -> C_s(3,1,8) -> C_s(3,2,16) -> C_s(3,1,16) -> C_s(3,2,16) -> "
            "C_s(3,1,16) -> C_s(3,2,16) -> C_s(3,2,32) -> C_s(3,1,32)"
        ),
        decoder_arch=(
            "FC(64) -> FC(128) -> Shape(8,8) -> T_s(3,2,16) -> T_s(3,1,16) -> "
            "T_s(3,2,16) -> T_s(3,1,16) -> T_s(3,2,8) -> T_s(3,1,8) -> T_s(3,2,4)"
        ),
        vae_target=2000.0,
        latent_dim=64,
    ),
}

_DATASET_RECIPE = {
    "anomaly-glyph-mnist": "anomaly-mnist",
    "anomaly-mnist": "anomaly-mnist",
    "anomaly-glyph-cifar": "anomaly-cifar",
    "anomaly-cifar10": "anomaly-cifar",
    "multidigit-2": "multidigit",
    "multidigit-4": "multidigit",
    "anchors": "anchors",
    "anchors-noise": "anchors",
    "svhn": "svhn",
    "svhn-synthetic": "svhn",
    "svhn-crops": "svhn",
}


def recipe_for(dataset_name: str) -> Recipe:
    key = _DATASET_RECIPE.get(dataset_name)
    if key is None:
        raise KeyError(
            f"no built-in recipe for dataset {dataset_name!r}; "
            f"known: {sorted(_DATASET_RECIPE)}"
        )
    return RECIPES[key]


def config_from_recipe(recipe: Recipe, **overrides) -> TrainConfig:
    """Materialize a TrainConfig from a recipe, applying overrides."""
    config = TrainConfig(
        image_shape=recipe.image_shape,
        n_classes=recipe.n_classes,
        mask_arch=recipe.mask_arch,
        classifier_arch=recipe.classifier_arch,
        encoder_arch=recipe.encoder_arch,
        decoder_arch=recipe.decoder_arch,
        vae_target=recipe.vae_target,
        latent_dim=recipe.latent_dim,
        sigma=recipe.sigma,
    )
    for key, value in overrides.items():
        if not hasattr(config, key):
            raise ValueError(f"unknown config override {key!r}")
        setattr(config, key, value)
    config.validate()
    return config


def config_for_dataset(dataset_name: str, **overrides) -> TrainConfig:
    return config_from_recipe(recipe_for(dataset_name), **overrides)
