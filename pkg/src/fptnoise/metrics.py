"""Evaluation metrics: accuracy, rank-based detector AUC, bootstrap CIs."""

from __future__ import annotations

import numpy as np

from .errors import InputError
from .rng import make_generator


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise InputError(
            f"prediction shape {predictions.shape} != label shape {labels.shape}"
        )
    if predictions.size == 0:
        raise InputError("accuracy of an empty set is undefined")
    return float((predictions == labels).mean())


def detector_auc(clean_scores, adversarial_scores) -> float:
    """Area under ROC with higher score meaning adversarial.

    Computed as the Mann-Whitney pair statistic: wins plus half-ties over
    all (adversarial, clean) pairs.
    """
    clean = np.asarray(clean_scores, dtype=np.float64).reshape(-1)
    adv = np.asarray(adversarial_scores, dtype=np.float64).reshape(-1)
    if clean.size == 0 or adv.size == 0:
        raise InputError("detector_auc needs nonempty score lists")
    diff = adv[:, None] - clean[None, :]
    wins = float((diff > 0).sum())
    ties = float((diff == 0).sum())
    return (wins + 0.5 * ties) / (clean.size * adv.size)


def bootstrap_mean_gap(
    high_scores, low_scores, n_boot: int = 2000, seed: int = 0, alpha: float = 0.05
) -> tuple[float, float, float]:
    """Mean(high) - mean(low) with a percentile bootstrap CI.

    Returns (gap, ci_low, ci_high) at confidence 1 - alpha.
    """
    high = np.asarray(high_scores, dtype=np.float64).reshape(-1)
    low = np.asarray(low_scores, dtype=np.float64).reshape(-1)
    if high.size == 0 or low.size == 0:
        raise InputError("bootstrap_mean_gap needs nonempty score lists")
    rng = make_generator(seed)
    gaps = np.empty(n_boot)
    for i in range(n_boot):
        gaps[i] = (
            rng.choice(high, size=high.size, replace=True).mean()
            - rng.choice(low, size=low.size, replace=True).mean()
        )
    gap = float(high.mean() - low.mean())
    lo, hi = np.quantile(gaps, [alpha / 2, 1 - alpha / 2])
    return gap, float(lo), float(hi)
