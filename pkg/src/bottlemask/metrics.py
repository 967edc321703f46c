"""Mask statistics, leakage probes, robustness evaluation and run reports.

The central scalar is the per-sample mask l1 norm: the mean mask value,
i.e. the visible fraction of the image (1 = fully visible).  Statistics
group it by label, histogram it over fixed bins, and measure how well it
alone predicts the label (the leakage probe): if the mask shape encodes the
class, a one-dimensional classifier on this scalar beats chance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .masking import apply_mask
from .maskmodel import RandomizationPolicy, randomize_mask, sample_mask_hard

HISTOGRAM_BINS = 50


def _as_numpy(values) -> np.ndarray:
    if isinstance(values, torch.Tensor):
        return values.detach().cpu().numpy()
    return np.asarray(values)


@dataclass
class MaskStats:
    l1: np.ndarray               # (N,) visible fraction per sample
    labels: np.ndarray           # (N,)
    n_classes: int
    bin_edges: np.ndarray        # (HISTOGRAM_BINS + 1,)
    histograms: np.ndarray       # (n_classes, HISTOGRAM_BINS) counts
    per_class_mean: np.ndarray   # (n_classes,)

    def spread(self) -> float:
        """Relative spread of per-class means: (max - min) / overall mean."""
        present = np.unique(self.labels)
        means = self.per_class_mean[present]
        overall = float(self.l1.mean())
        if overall == 0.0:
            return 0.0
        return float((means.max() - means.min()) / overall)


def mask_l1_stats(masks, labels, n_classes: int) -> MaskStats:
    """Per-sample mean mask value grouped by label, plus fixed histograms."""
    masks = _as_numpy(masks)
    labels = _as_numpy(labels).astype(int)
    l1 = masks.reshape(masks.shape[0], -1).mean(axis=1)
    edges = np.linspace(0.0, 1.0, HISTOGRAM_BINS + 1)
    histograms = np.zeros((n_classes, HISTOGRAM_BINS), dtype=np.int64)
    per_class_mean = np.zeros(n_classes)
    for k in range(n_classes):
        sel = labels == k
        histograms[k] = np.histogram(l1[sel], bins=edges)[0]
        per_class_mean[k] = l1[sel].mean() if sel.any() else 0.0
    return MaskStats(l1, labels, n_classes, edges, histograms, per_class_mean)


@dataclass(frozen=True)
class BboxRegion:
    y0: int
    x0: int
    height: int
    width: int

    def membership(self, shape: tuple[int, int]) -> np.ndarray:
        h, w = shape
        if not (0 <= self.y0 and 0 <= self.x0
                and self.y0 + self.height <= h and self.x0 + self.width <= w):
            raise ValueError(f"bbox {self} exceeds frame {shape}")
        member = np.zeros(shape, dtype=bool)
        member[self.y0:self.y0 + self.height, self.x0:self.x0 + self.width] = True
        return member


@dataclass(frozen=True)
class DiskRegion:
    cy: float
    cx: float
    radius: float

    def membership(self, shape: tuple[int, int]) -> np.ndarray:
        h, w = shape
        if not (0 <= self.cy < h and 0 <= self.cx < w):
            raise ValueError(f"disk center {self} outside frame {shape}")
        yy, xx = np.mgrid[0:h, 0:w]
        return (yy - self.cy) ** 2 + (xx - self.cx) ** 2 <= self.radius ** 2


def region_average(mask, region) -> tuple[float, float]:
    """Mean mask value inside the region and over its complement."""
    mask = _as_numpy(mask)
    member = region.membership(mask.shape[-2:])
    inside = float(mask[..., member].mean())
    outside = float(mask[..., ~member].mean()) if (~member).any() else float("nan")
    return inside, outside


# ---------------------------------------------------------------------------
# area under the ROC curve, two independent routes
# ---------------------------------------------------------------------------

def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc_rank(scores, positives) -> float:
    """Mann-Whitney AUC with tie-averaged ranks."""
    scores = _as_numpy(scores).astype(np.float64)
    positives = _as_numpy(positives).astype(bool)
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative samples")
    ranks = _average_ranks(scores)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_threshold_sweep(scores, positives) -> float:
    """Trapezoidal area under the ROC traced over unique score thresholds."""
    scores = _as_numpy(scores).astype(np.float64)
    positives = _as_numpy(positives).astype(bool)
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative samples")
    thresholds = np.unique(scores)[::-1]
    tpr = [0.0]
    fpr = [0.0]
    for t in thresholds:
        sel = scores >= t
        tpr.append(float((positives & sel).sum()) / n_pos)
        fpr.append(float((~positives & sel).sum()) / n_neg)
    return float(np.trapezoid(tpr, fpr))


# ---------------------------------------------------------------------------
# leakage probe: 1-D interval classifier on the mask l1 norm
# ---------------------------------------------------------------------------

@dataclass
class IntervalClassifier:
    """Ordinal thresholds on a scalar: contiguous value intervals per class."""

    class_order: np.ndarray   # class id per interval, ascending value
    thresholds: np.ndarray    # (len(class_order) - 1,) interval boundaries

    def predict(self, values) -> np.ndarray:
        values = _as_numpy(values)
        idx = np.searchsorted(self.thresholds, values, side="right")
        return self.class_order[idx]


def fit_interval_classifier(values, labels, n_classes: int) -> IntervalClassifier:
    """Choose interval boundaries maximizing training accuracy.

    Classes are ordered by their mean scalar value; a dynamic program then
    assigns contiguous runs of the sorted samples to classes in that order.
    """
    values = _as_numpy(values).astype(np.float64)
    labels = _as_numpy(labels).astype(int)
    means = np.array([
        values[labels == k].mean() if (labels == k).any() else np.inf
        for k in range(n_classes)
    ])
    class_order = np.argsort(means, kind="mergesort")

    uniq, inverse = np.unique(values, return_inverse=True)
    counts = np.zeros((uniq.size, n_classes), dtype=np.int64)
    np.add.at(counts, (inverse, labels), 1)

    n_groups = uniq.size
    k = len(class_order)
    score = np.zeros((k + 1, n_groups + 1), dtype=np.int64)
    choice = np.zeros((k + 1, n_groups + 1), dtype=np.int8)  # 1 = extend run j
    for j in range(1, k + 1):
        cls = class_order[j - 1]
        for g in range(n_groups + 1):
            best = score[j - 1][g]
            take = score[j][g - 1] + counts[g - 1][cls] if g > 0 else -1
            if g > 0 and take >= best:
                score[j][g] = take
                choice[j][g] = 1
            else:
                score[j][g] = best

    # walk back to find the first value group of each class interval
    j, g = k, n_groups
    run_start = {}
    while j > 0:
        if g > 0 and choice[j][g] == 1:
            g -= 1
        else:
            run_start[j - 1] = g
            j -= 1
    thresholds = []
    for j in range(k - 1):
        g = run_start.get(j + 1, n_groups)
        if g <= 0:
            thresholds.append(-np.inf)
        elif g >= n_groups:
            thresholds.append(np.inf)
        else:
            thresholds.append(0.5 * (uniq[g - 1] + uniq[g]))
    return IntervalClassifier(class_order=class_order, thresholds=np.array(thresholds))


def mask_only_accuracy(train_stats: MaskStats, test_stats: MaskStats) -> float:
    """Held-out accuracy of the interval classifier on the l1 norm alone.

    Quantifies label leakage through the mask: chance level means the mask
    carries no label information in its total visible fraction.
    """
    clf = fit_interval_classifier(train_stats.l1, train_stats.labels, train_stats.n_classes)
    predictions = clf.predict(test_stats.l1)
    return float((predictions == test_stats.labels).mean())


# ---------------------------------------------------------------------------
# frozen-model evaluations
# ---------------------------------------------------------------------------

def collect_masks(models, images: torch.Tensor, seed: int, chunk: int = 256) -> torch.Tensor:
    """Hard masks drawn from the frozen mask model, one per image."""
    generator = torch.Generator()
    generator.manual_seed(seed)
    out = []
    with torch.no_grad():
        for start in range(0, images.shape[0], chunk):
            rho = models.mask_model(images[start:start + chunk])
            out.append(sample_mask_hard(rho, generator))
    return torch.cat(out)


def randomized_mask_accuracy(
    models,
    images: torch.Tensor,
    labels: torch.Tensor,
    policy: RandomizationPolicy,
    seed: int,
    chunk: int = 256,
) -> dict:
    """Frozen classifier under grown hard masks; per-category accuracy table."""
    generator = torch.Generator()
    generator.manual_seed(seed)
    n_classes = models.config.n_classes
    correct = np.zeros(n_classes)
    totals = np.zeros(n_classes)
    with torch.no_grad():
        for start in range(0, images.shape[0], chunk):
            img = images[start:start + chunk]
            lab = labels[start:start + chunk]
            rho = models.mask_model(img)
            hard = sample_mask_hard(rho, generator)
            grown = randomize_mask(hard, policy, generator)
            logits = models.classifier(apply_mask(img, grown).network_input())
            pred = logits.argmax(dim=-1)
            for k in range(n_classes):
                sel = (lab == k).numpy()
                totals[k] += sel.sum()
                correct[k] += (pred.numpy()[sel] == k).sum()
    per_class = np.divide(correct, np.maximum(totals, 1.0))
    return {
        "accuracy": float(correct.sum() / max(totals.sum(), 1.0)),
        "per_class_accuracy": [float(v) for v in per_class],
        "class_counts": [int(v) for v in totals],
    }


def prediction_stability(
    models,
    images: torch.Tensor,
    policy: RandomizationPolicy,
    seed: int,
    draws: int = 10,
    chunk: int = 256,
) -> float:
    """Fraction of images whose majority grown-mask prediction matches the
    ungrown prediction (one hard mask per image, >= `draws` growths)."""
    generator = torch.Generator()
    generator.manual_seed(seed)
    n_classes = models.config.n_classes
    agree = 0
    total = 0
    with torch.no_grad():
        for start in range(0, images.shape[0], chunk):
            img = images[start:start + chunk]
            rho = models.mask_model(img)
            hard = sample_mask_hard(rho, generator)
            base_pred = models.classifier(apply_mask(img, hard).network_input()).argmax(dim=-1)
            votes = torch.zeros(img.shape[0], n_classes)
            for _ in range(draws):
                grown = randomize_mask(hard, policy, generator)
                pred = models.classifier(apply_mask(img, grown).network_input()).argmax(dim=-1)
                votes += torch.nn.functional.one_hot(pred, n_classes).float()
            majority = votes.argmax(dim=-1)
            agree += int((majority == base_pred).sum())
            total += img.shape[0]
    return agree / max(total, 1)


def acceptance_report(
    models,
    log,
    test_images: torch.Tensor,
    test_labels: torch.Tensor,
    baseline_accuracy: float,
    seed: int = 0,
    stability_draws: int = 10,
    accuracy_gap: float = 0.05,
    stability_threshold: float = 0.9,
    tail_steps: int = 20,
) -> dict:
    """Three-part run report: accuracy vs baseline, target band, stability.

    (a) masked-classifier accuracy close to a baseline trained on raw
    images, (b) final autoencoder loss inside the configured band, (c)
    predictions stable across grown-mask realizations.
    """
    from .training import evaluate_models

    config = models.config
    result = evaluate_models(models, test_images, test_labels, seed=seed)
    masked_accuracy = result["accuracy"]

    steps = [r for r in log.records if r.get("kind") == "step"]
    tail = steps[-tail_steps:] if steps else []
    vae_final = float(np.mean([r["vae_loss"] for r in tail])) if tail else float("nan")
    lo, hi = config.target_range()

    policy = config.policy()
    stability = prediction_stability(models, test_images, policy, seed=seed + 1,
                                     draws=stability_draws)
    report = {
        "masked_accuracy": masked_accuracy,
        "baseline_accuracy": baseline_accuracy,
        "accuracy_gap": baseline_accuracy - masked_accuracy,
        "vae_loss_final": vae_final,
        "vae_target_range": [lo, hi],
        "stability": stability,
        "per_class_accuracy": result["per_class_accuracy"],
        "criteria": {
            "a_accuracy_close_to_baseline": bool(
                baseline_accuracy - masked_accuracy <= accuracy_gap
            ),
            "b_vae_loss_in_range": bool(lo <= vae_final <= hi),
            "c_predictions_stable": bool(stability >= stability_threshold),
        },
    }
    return report
