"""Flat key=value run configuration files with section prefixes.

Example::

    dataset.name=anomaly-glyph-mnist
    dataset.count=2000
    train.steps=600
    beta.mode=adaptive
    beta.vae_target=12
    randomize.enabled=off
    mask.arch=[C(1,1,4) -> C(3,2,4)] -> [Resize(28) -> C(1,1,1)]
    out.dir=runs/demo

Unknown keys are rejected.  A run's fully resolved configuration (defaults
filled in) is persisted next to its outputs so any run is reproducible from
the file plus the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from . import configs
from .training import TrainConfig


class ConfigError(Exception):
    """Bad run configuration file or option."""


_KNOWN_KEYS = {
    "dataset.name", "dataset.path", "dataset.count", "dataset.test_count",
    "dataset.seed",
    "train.objective", "train.steps", "train.batch_size", "train.learning_rate",
    "train.seed", "train.latent_dim", "train.sigma", "train.temperature",
    "train.eval_every", "train.eval_samples", "train.label_proxy",
    "train.proxy_checkpoint",
    "beta.initial", "beta.mode", "beta.eta", "beta.min", "beta.max",
    "beta.vae_target",
    "randomize.enabled", "randomize.rect_count", "randomize.rect_size",
    "mask.arch", "classifier.arch", "encoder.arch", "decoder.arch",
    "out.dir",
}


def parse_config_text(text: str) -> dict[str, str]:
    items: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        items[key] = value.strip()
    return items


def format_config(items: dict[str, str]) -> str:
    return "\n".join(f"{k}={items[k]}" for k in sorted(items)) + "\n"


@dataclass
class RunConfig:
    dataset_name: str = ""
    dataset_path: str = ""
    dataset_count: int = 2000
    dataset_test_count: int = 500
    dataset_seed: int = 0
    out_dir: str = ""
    train: TrainConfig = field(default=None)

    def resolved_items(self) -> dict[str, str]:
        items = {
            "dataset.name": self.dataset_name,
            "dataset.path": self.dataset_path,
            "dataset.count": str(self.dataset_count),
            "dataset.test_count": str(self.dataset_test_count),
            "dataset.seed": str(self.dataset_seed),
            "out.dir": self.out_dir,
        }
        t = self.train
        items.update({
            "train.objective": t.objective,
            "train.steps": str(t.steps),
            "train.batch_size": str(t.batch_size),
            "train.learning_rate": repr(t.learning_rate),
            "train.seed": str(t.seed),
            "train.latent_dim": str(t.latent_dim),
            "train.sigma": repr(t.sigma),
            "train.temperature": repr(t.temperature),
            "train.eval_every": str(t.eval_every),
            "train.eval_samples": str(t.eval_samples),
            "train.label_proxy": t.label_proxy,
            "train.proxy_checkpoint": t.proxy_checkpoint,
            "beta.initial": repr(t.beta0),
            "beta.mode": t.beta_mode,
            "beta.eta": repr(t.beta_eta),
            "beta.min": repr(t.beta_min),
            "beta.max": repr(t.beta_max),
            "beta.vae_target": _format_target(t.vae_target),
            "randomize.enabled": "on" if t.randomize else "off",
            "randomize.rect_count": str(t.rect_count),
            "randomize.rect_size": (
                f"{t.rect_size_range[0]},{t.rect_size_range[1]}"
                if t.rect_size_range else "auto"
            ),
            "mask.arch": t.mask_arch,
            "classifier.arch": t.classifier_arch,
            "encoder.arch": t.encoder_arch,
            "decoder.arch": t.decoder_arch,
        })
        return items


def _format_target(target) -> str:
    if isinstance(target, (tuple, list)):
        return f"{target[0]},{target[1]}"
    return repr(float(target))


def _parse_target(raw: str):
    parts = [p for p in raw.split(",") if p.strip()]
    if len(parts) == 1:
        return float(parts[0])
    if len(parts) == 2:
        return (float(parts[0]), float(parts[1]))
    raise ConfigError(f"beta.vae_target must be one or two numbers, got {raw!r}")


def _parse_flag(raw: str, key: str) -> bool:
    lowered = raw.lower()
    if lowered in ("on", "true", "1", "yes"):
        return True
    if lowered in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"{key} must be on/off, got {raw!r}")


def build_run_config(items: dict[str, str]) -> RunConfig:
    """Resolve a parsed key=value mapping into a full RunConfig.

    Architecture strings and targets default from the dataset's built-in
    recipe; any provided key overrides the recipe value.
    """
    name = items.get("dataset.name", "")
    path = items.get("dataset.path", "")
    if not name and not path:
        raise ConfigError("config needs dataset.name or dataset.path")

    try:
        if name:
            recipe = configs.recipe_for(name)
        else:
            from .datasets import load_dataset
            probe = load_dataset(path)
            recipe = configs.recipe_for(probe.name)
    except KeyError as exc:
        raise ConfigError(str(exc)) from None

    train = configs.config_from_recipe(recipe)
    try:
        _apply_items(train, items)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None

    run = RunConfig(
        dataset_name=name,
        dataset_path=path,
        dataset_count=int(items.get("dataset.count", "2000")),
        dataset_test_count=int(items.get("dataset.test_count", "500")),
        dataset_seed=int(items.get("dataset.seed", "0")),
        out_dir=items.get("out.dir", ""),
        train=train,
    )
    train.validate()
    return run


def _apply_items(train: TrainConfig, items: dict[str, str]) -> None:
    simple = {
        "train.objective": ("objective", lambda v: v.replace("-", "_")),
        "train.steps": ("steps", int),
        "train.batch_size": ("batch_size", int),
        "train.learning_rate": ("learning_rate", float),
        "train.seed": ("seed", int),
        "train.latent_dim": ("latent_dim", int),
        "train.sigma": ("sigma", float),
        "train.temperature": ("temperature", float),
        "train.eval_every": ("eval_every", int),
        "train.eval_samples": ("eval_samples", int),
        "train.label_proxy": ("label_proxy", str),
        "train.proxy_checkpoint": ("proxy_checkpoint", str),
        "beta.initial": ("beta0", float),
        "beta.mode": ("beta_mode", str),
        "beta.eta": ("beta_eta", float),
        "beta.min": ("beta_min", float),
        "beta.max": ("beta_max", float),
        "beta.vae_target": ("vae_target", _parse_target),
        "randomize.rect_count": ("rect_count", int),
        "mask.arch": ("mask_arch", str),
        "classifier.arch": ("classifier_arch", str),
        "encoder.arch": ("encoder_arch", str),
        "decoder.arch": ("decoder_arch", str),
    }
    for key, (attr, conv) in simple.items():
        if key in items and items[key] != "":
            setattr(train, attr, conv(items[key]))
    if "randomize.enabled" in items:
        train.randomize = _parse_flag(items["randomize.enabled"], "randomize.enabled")
    if "randomize.rect_size" in items:
        raw = items["randomize.rect_size"]
        if raw == "auto" or raw == "":
            train.rect_size_range = None
        else:
            parts = raw.split(",")
            if len(parts) != 2:
                raise ConfigError(f"randomize.rect_size must be 'lo,hi' or 'auto', got {raw!r}")
            train.rect_size_range = (int(parts[0]), int(parts[1]))
