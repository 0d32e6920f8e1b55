"""White-box L-infinity attacks on the encoder + prototype classifier stack.

Both attacks ascend the cross-entropy of the cosine logits with respect to
the input pixels. PGD keeps the best-loss iterate seen (the start iterate
included), so its final loss never falls below the starting loss even with
a random start.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import PrototypeClassifier, feature_graph, logit_graph
from .errors import ConfigurationError
from .imageops import clip01
from .rng import make_generator
from .validation import as_image, check_labels


@dataclass(frozen=True)
class AttackConfig:
    """L-infinity budget, iteration count, step size and random-start seed.

    step_size None means the common default 2 * epsilon / steps. seed None
    disables the random start (deterministic zero start).
    """

    epsilon: float
    steps: int = 10
    step_size: float | None = None
    seed: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigurationError(f"epsilon {self.epsilon} outside [0, 1]")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ConfigurationError("step_size must be positive")

    @property
    def effective_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.0 * self.epsilon / self.steps


def _loss_and_grad(image: np.ndarray, label: int, params, clf) -> tuple[float, np.ndarray]:
    x = Tensor(image[None], requires_grad=True)
    loss = ad.cross_entropy(logit_graph(clf, feature_graph(params, x)), [label])
    return loss.item(), ad.backward(loss)[x][0]


def _loss_only(image: np.ndarray, label: int, params, clf) -> float:
    x = Tensor(image[None])
    return ad.cross_entropy(logit_graph(clf, feature_graph(params, x)), [label]).item()


def fgsm(image, label, params, clf: PrototypeClassifier, epsilon: float) -> np.ndarray:
    """Single-step sign attack: clip(x + epsilon * sign(grad), [0, 1])."""
    if epsilon < 0:
        raise ConfigurationError("epsilon must be >= 0")
    image = as_image(image, params.image_shape)
    label = int(check_labels([label], clf.n_classes)[0])
    _, grad = _loss_and_grad(image, label, params, clf)
    return clip01(image + epsilon * np.sign(grad))


def pgd(image, label, params, clf: PrototypeClassifier, cfg: AttackConfig) -> np.ndarray:
    """Iterated ascent with per-step projection onto the epsilon ball and [0, 1].

    Returns the iterate with the highest loss seen, so the output loss is
    never below the start loss.
    """
    image = as_image(image, params.image_shape)
    label = int(check_labels([label], clf.n_classes)[0])
    eps = cfg.epsilon
    if eps == 0.0:
        return image.copy()
    step = cfg.effective_step_size

    if cfg.seed is None:
        delta = np.zeros_like(image)
    else:
        delta = make_generator(cfg.seed).uniform(-eps, eps, size=image.shape)
        delta = clip01(image + delta) - image

    best_delta = delta
    best_loss = -np.inf
    for _ in range(cfg.steps):
        loss, grad = _loss_and_grad(image + delta, label, params, clf)
        if loss > best_loss:
            best_loss, best_delta = loss, delta
        delta = np.clip(delta + step * np.sign(grad), -eps, eps)
        delta = clip01(image + delta) - image
    final_loss = _loss_only(image + delta, label, params, clf)
    if final_loss > best_loss:
        best_delta = delta
    return image + best_delta


def attack_batch(images, labels, params, clf, kind: str, cfg: AttackConfig) -> np.ndarray:
    """Attack each image independently; `kind` is 'fgsm' or 'pgd'."""
    if kind == "fgsm":
        return np.stack(
            [fgsm(x, y, params, clf, cfg.epsilon) for x, y in zip(images, labels)]
        )
    if kind == "pgd":
        return np.stack([pgd(x, y, params, clf, cfg) for x, y in zip(images, labels)])
    raise ConfigurationError(f"unknown attack kind {kind!r}")
