"""bottlemask: boolean saliency masks learned by trading compression
against label prediction.

A mask model proposes per-pixel keep probabilities; a sampled boolean mask
zeroes pixels and carries a visibility channel; an autoencoder bounds the
information the masked image retains while a classifier demands enough to
predict the label.  Mask growth and a label-conditioned variant keep the
mask itself from smuggling the label.
"""

from .archspec import (
    ArchParseError,
    LayeredNetwork,
    LayerSpec,
    NetworkSpec,
    ShapeInferenceError,
    build_network,
    infer_shapes,
    parse_architecture,
    unparse,
)
from .datasets import Dataset, DataError, load_dataset, save_dataset
from .estimators import BottleneckMasker
from .masking import MaskedImage, apply_mask, threshold_mask
from .maskmodel import (
    MaskProbabilityModel,
    RandomizationPolicy,
    mask_entropy_continuous,
    mask_negative_log_likelihood,
    randomize_mask,
    sample_mask_hard,
    sample_mask_relaxed,
)
from .training import TrainConfig, TrainResult, load_models, train, update_beta
from .vae import MaskedImageVae, build_vae, kl_to_prior, reconstruction_nll, vae_loss

__version__ = "0.1.0"

__all__ = [
    "ArchParseError",
    "BottleneckMasker",
    "DataError",
    "Dataset",
    "LayerSpec",
    "LayeredNetwork",
    "MaskProbabilityModel",
    "MaskedImage",
    "MaskedImageVae",
    "NetworkSpec",
    "RandomizationPolicy",
    "ShapeInferenceError",
    "TrainConfig",
    "TrainResult",
    "apply_mask",
    "build_network",
    "build_vae",
    "infer_shapes",
    "kl_to_prior",
    "load_dataset",
    "load_models",
    "mask_entropy_continuous",
    "mask_negative_log_likelihood",
    "parse_architecture",
    "randomize_mask",
    "reconstruction_nll",
    "sample_mask_hard",
    "sample_mask_relaxed",
    "save_dataset",
    "threshold_mask",
    "train",
    "unparse",
    "update_beta",
    "vae_loss",
]
