"""Differentiable feature encoders and the prototype cosine classifier.

Two encoder families share one interface (`feature_graph` building a tape,
`encode` as the plain-numpy wrapper):

* TransformerEncoderParams - patchify, linear embed plus learned positional
  embedding, two pre-norm blocks of self-attention and a 2-layer MLP with
  residuals, mean-pool over tokens, linear projection to the feature dim.
* LinearEncoderParams - a single matrix over flattened pixels; drift under
  any probe noise is input-independent, which makes it the analytic control
  for every drift-based statistic.

Classification is cosine similarity against fixed unit-norm class
prototypes, scaled by a temperature.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    ConfigurationError,
    FormatError,
    InputError,
    TrainingError,
)
from .rng import derive_seed, make_generator
from .validation import as_image, as_image_batch, check_labels
from .weights_io import read_tensors, write_tensors

LAYER_NORM_EPS = 1e-5


@dataclass
class TransformerEncoderParams:
    """Weights plus architecture constants for the patch-transformer encoder."""

    image_shape: tuple[int, int, int]
    patch_size: int
    embed_dim: int
    heads: int
    blocks: int
    feature_dim: int
    mlp_dim: int
    seed: int
    weights: dict[str, np.ndarray]

    @property
    def tokens(self) -> int:
        _, h, w = self.image_shape
        return (h // self.patch_size) * (w // self.patch_size)

    def copy(self) -> "TransformerEncoderParams":
        return dataclasses.replace(
            self, weights={k: v.copy() for k, v in self.weights.items()}
        )


@dataclass(frozen=True)
class LinearEncoderParams:
    """Analytic control encoder: features are matrix @ flattened pixels."""

    image_shape: tuple[int, int, int]
    matrix: np.ndarray  # feature_dim x (C*H*W)

    def __post_init__(self):
        c, h, w = self.image_shape
        if self.matrix.ndim != 2 or self.matrix.shape[1] != c * h * w:
            raise ConfigurationError(
                f"linear encoder matrix {self.matrix.shape} does not match "
                f"image shape {self.image_shape}"
            )
        if not np.isfinite(self.matrix).all():
            raise ConfigurationError("linear encoder matrix has non-finite entries")

    @property
    def feature_dim(self) -> int:
        return self.matrix.shape[0]


def init_transformer_encoder(
    image_shape=(3, 32, 32),
    patch_size=4,
    embed_dim=64,
    heads=4,
    blocks=2,
    feature_dim=64,
    mlp_dim=128,
    seed=0,
) -> TransformerEncoderParams:
    """Seeded weight initialization; identical seeds give identical weights."""
    c, h, w = image_shape
    if h % patch_size or w % patch_size:
        raise ConfigurationError(
            f"image {h}x{w} not divisible by patch size {patch_size}"
        )
    if embed_dim % heads:
        raise ConfigurationError(
            f"embed dim {embed_dim} not divisible by {heads} heads"
        )
    rng = make_generator(derive_seed(seed, "encoder-init"))
    patch_dim = patch_size * patch_size * c
    tokens = (h // patch_size) * (w // patch_size)

    def dense(rows, cols, scale):
        return rng.standard_normal((rows, cols)) * scale

    weights: dict[str, np.ndarray] = {
        "embed.w": dense(patch_dim, embed_dim, patch_dim**-0.5),
        "embed.b": np.zeros(embed_dim),
        "pos": rng.standard_normal((tokens, embed_dim)) * 0.02,
    }
    for i in range(blocks):
        p = f"block{i}."
        weights[p + "ln1.gain"] = np.ones(embed_dim)
        weights[p + "ln1.shift"] = np.zeros(embed_dim)
        for proj in ("wq", "wk", "wv", "wo"):
            weights[p + "attn." + proj] = dense(embed_dim, embed_dim, embed_dim**-0.5)
            weights[p + "attn.b" + proj[1]] = np.zeros(embed_dim)
        weights[p + "ln2.gain"] = np.ones(embed_dim)
        weights[p + "ln2.shift"] = np.zeros(embed_dim)
        weights[p + "mlp.w1"] = dense(embed_dim, mlp_dim, (2.0 / embed_dim) ** 0.5)
        weights[p + "mlp.b1"] = np.zeros(mlp_dim)
        weights[p + "mlp.w2"] = dense(mlp_dim, embed_dim, mlp_dim**-0.5)
        weights[p + "mlp.b2"] = np.zeros(embed_dim)
    weights["pool_ln.gain"] = np.ones(embed_dim)
    weights["pool_ln.shift"] = np.zeros(embed_dim)
    weights["head.w"] = dense(embed_dim, feature_dim, embed_dim**-0.5)
    weights["head.b"] = np.zeros(feature_dim)

    return TransformerEncoderParams(
        image_shape=tuple(image_shape),
        patch_size=patch_size,
        embed_dim=embed_dim,
        heads=heads,
        blocks=blocks,
        feature_dim=feature_dim,
        mlp_dim=mlp_dim,
        seed=seed,
        weights=weights,
    )


def init_linear_encoder(
    image_shape=(3, 32, 32), feature_dim=64, seed=0
) -> LinearEncoderParams:
    c, h, w = image_shape
    rng = make_generator(derive_seed(seed, "linear-init"))
    matrix = rng.standard_normal((feature_dim, c * h * w)) / np.sqrt(c * h * w)
    return LinearEncoderParams(image_shape=tuple(image_shape), matrix=matrix)


def identity_linear_encoder(image_shape) -> LinearEncoderParams:
    """Feature = flattened pixels; drift norms equal pixel-space norms."""
    c, h, w = image_shape
    return LinearEncoderParams(
        image_shape=tuple(image_shape), matrix=np.eye(c * h * w)
    )


def _patchify(images: Tensor, patch: int) -> Tensor:
    # (N,C,H,W) -> (N, T, patch*patch*C) over non-overlapping patches
    n, c, h, w = images.shape
    hp, wp = h // patch, w // patch
    x = ad.reshape(images, (n, c, hp, patch, wp, patch))
    x = ad.transpose(x, (0, 2, 4, 1, 3, 5))
    return ad.reshape(x, (n, hp * wp, c * patch * patch))


def _transformer_graph(
    params: TransformerEncoderParams, images: Tensor, weights: dict[str, Tensor]
) -> Tensor:
    # map pixels [0,1] -> [-1,1]; removes the DC component that would
    # otherwise dominate the pooled features of an untrained network
    images = ad.mul(ad.sub(images, 0.5), 2.0)
    x = ad.linear(_patchify(images, params.patch_size), weights["embed.w"], weights["embed.b"])
    x = ad.add(x, weights["pos"])
    for i in range(params.blocks):
        p = f"block{i}."
        normed = ad.layer_norm(
            x, weights[p + "ln1.gain"], weights[p + "ln1.shift"], LAYER_NORM_EPS
        )
        attn = ad.AttentionParams(
            weights[p + "attn.wq"], weights[p + "attn.bq"],
            weights[p + "attn.wk"], weights[p + "attn.bk"],
            weights[p + "attn.wv"], weights[p + "attn.bv"],
            weights[p + "attn.wo"], weights[p + "attn.bo"],
        )
        x = ad.add(x, ad.multi_head_attention(normed, attn, params.heads))
        normed = ad.layer_norm(
            x, weights[p + "ln2.gain"], weights[p + "ln2.shift"], LAYER_NORM_EPS
        )
        hidden = ad.relu(ad.linear(normed, weights[p + "mlp.w1"], weights[p + "mlp.b1"]))
        x = ad.add(x, ad.linear(hidden, weights[p + "mlp.w2"], weights[p + "mlp.b2"]))
    pooled = ad.layer_norm(
        ad.mean(x, axis=-2), weights["pool_ln.gain"], weights["pool_ln.shift"],
        LAYER_NORM_EPS,
    )
    return ad.linear(pooled, weights["head.w"], weights["head.b"])


def feature_graph(params, images: Tensor, weight_tensors=None) -> Tensor:
    """Build the differentiable feature map for a batch tensor (N,C,H,W).

    weight_tensors (name -> Tensor) lets training mark weights as gradient
    leaves; by default weights enter the tape as constants.
    """
    if isinstance(params, LinearEncoderParams):
        n = images.shape[0]
        flat = ad.reshape(images, (n, int(np.prod(params.image_shape))))
        return ad.matmul(flat, Tensor(params.matrix.T))
    if isinstance(params, TransformerEncoderParams):
        if weight_tensors is None:
            weight_tensors = {k: Tensor(v) for k, v in params.weights.items()}
        return _transformer_graph(params, images, weight_tensors)
    raise ConfigurationError(f"unknown encoder params type {type(params).__name__}")


def encode(params, image: np.ndarray) -> np.ndarray:
    """Deterministic feature vector for one C x H x W image."""
    arr = as_image(image, params.image_shape)
    return feature_graph(params, Tensor(arr[None])).data[0]


def encode_batch(params, images: np.ndarray) -> np.ndarray:
    arr = as_image_batch(images, params.image_shape)
    return feature_graph(params, Tensor(arr)).data


# ---------------------------------------------------------------------------
# prototype classifier


def random_prototypes(n_classes: int, feature_dim: int, seed: int = 0) -> np.ndarray:
    """Fixed random unit-norm class prototypes (never trained)."""
    rng = make_generator(derive_seed(seed, "prototypes"))
    raw = rng.standard_normal((n_classes, feature_dim))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


class PrototypeClassifier(BaseEstimator):
    """Cosine-similarity scores against fixed unit-norm prototypes.

    logits_i = temperature * cos(feature, prototype_i); argmax predicts.
    """

    def __init__(self, prototypes=None, temperature=20.0):
        self.prototypes = prototypes
        self.temperature = temperature
        if prototypes is not None:
            norms = np.linalg.norm(np.asarray(prototypes, dtype=np.float64), axis=1)
            if np.abs(norms - 1.0).max() > 1e-9:
                raise ConfigurationError("prototypes must be unit-norm within 1e-9")
        if temperature <= 0:
            raise ConfigurationError("temperature must be positive")

    @classmethod
    def random(cls, n_classes, feature_dim, seed=0, temperature=20.0):
        return cls(random_prototypes(n_classes, feature_dim, seed), temperature)

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    def fit(self, X=None, y=None):
        return self

    def decision_function(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        squeeze = features.ndim == 1
        if squeeze:
            features = features[None]
        norms = np.linalg.norm(features, axis=1, keepdims=True)
        if (norms == 0.0).any():
            raise InputError("cosine similarity of a zero feature is undefined")
        logits = self.temperature * (features @ self.prototypes.T) / norms
        return logits[0] if squeeze else logits

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.decision_function(features), axis=-1)


def classify(clf: PrototypeClassifier, feature: np.ndarray) -> np.ndarray:
    """Cosine logits for a single feature vector."""
    return clf.decision_function(feature)


def logit_graph(clf: PrototypeClassifier, features: Tensor) -> Tensor:
    """Differentiable cosine logits for a (N, F) feature tensor."""
    row_norm = ad.sqrt(ad.reduce_sum(ad.mul(features, features), axis=1, keepdims=True))
    cosine = ad.div(ad.matmul(features, Tensor(clf.prototypes.T)), row_norm)
    return ad.mul(cosine, float(clf.temperature))


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 32
    learning_rate: float = 0.002
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError("learning rate must be >= 0")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be >= 1")


@dataclass
class TrainResult:
    params: TransformerEncoderParams
    train_accuracy: float
    epoch_losses: list[float] = field(default_factory=list)


def train_encoder(
    params: TransformerEncoderParams,
    clf: PrototypeClassifier,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
) -> TrainResult:
    """SGD-with-momentum on cross-entropy over cosine logits.

    Returns a new params object; the input weights are untouched.
    """
    images = as_image_batch(images, params.image_shape)
    labels = check_labels(labels, clf.n_classes, images.shape[0])
    if images.shape[0] == 0:
        raise InputError("training dataset is empty")

    trained = params.copy()
    velocity = {k: np.zeros_like(v) for k, v in trained.weights.items()}
    rng = make_generator(derive_seed(cfg.seed, "train-shuffle"))
    step = 0
    epoch_losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(images.shape[0])
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            weight_tensors = {
                k: Tensor(v, requires_grad=True) for k, v in trained.weights.items()
            }
            feats = feature_graph(trained, Tensor(images[batch]), weight_tensors)
            loss = ad.cross_entropy(logit_graph(clf, feats), labels[batch])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"loss diverged (non-finite) at step {step}")
            grads = ad.backward(loss)
            for name, wt in weight_tensors.items():
                if wt in grads:
                    velocity[name] = (
                        cfg.momentum * velocity[name] - cfg.learning_rate * grads[wt]
                    )
                    trained.weights[name] = trained.weights[name] + velocity[name]
            losses.append(value)
            step += 1
        epoch_losses.append(float(np.mean(losses)))

    preds = clf.predict(encode_batch(trained, images))
    accuracy = float((preds == labels).mean())
    return TrainResult(params=trained, train_accuracy=accuracy, epoch_losses=epoch_losses)


def predict_batch(params, clf: PrototypeClassifier, images: np.ndarray) -> np.ndarray:
    return clf.predict(encode_batch(params, images))


# ---------------------------------------------------------------------------
# persistence

_ARCH_TRANSFORMER = 0.0
_ARCH_LINEAR = 1.0


def _params_to_tensors(params) -> dict[str, np.ndarray]:
    if isinstance(params, TransformerEncoderParams):
        tensors = {
            "__arch__": np.array([_ARCH_TRANSFORMER]),
            "__image_shape__": np.array(params.image_shape, dtype=np.float64),
            "__dims__": np.array(
                [
                    params.patch_size,
                    params.embed_dim,
                    params.heads,
                    params.blocks,
                    params.feature_dim,
                    params.mlp_dim,
                    params.seed,
                ],
                dtype=np.float64,
            ),
        }
        tensors.update(params.weights)
        return tensors
    if isinstance(params, LinearEncoderParams):
        return {
            "__arch__": np.array([_ARCH_LINEAR]),
            "__image_shape__": np.array(params.image_shape, dtype=np.float64),
            "matrix": params.matrix,
        }
    raise ConfigurationError(f"cannot save params of type {type(params).__name__}")


def _params_from_tensors(tensors: dict[str, np.ndarray]):
    try:
        arch = float(tensors.pop("__arch__")[0])
        image_shape = tuple(int(v) for v in tensors.pop("__image_shape__"))
    except KeyError as exc:
        raise FormatError(f"weight file is missing metadata tensor {exc}") from exc
    if arch == _ARCH_LINEAR:
        return LinearEncoderParams(image_shape=image_shape, matrix=tensors["matrix"])
    if arch == _ARCH_TRANSFORMER:
        dims = [int(v) for v in tensors.pop("__dims__")]
        return TransformerEncoderParams(
            image_shape=image_shape,
            patch_size=dims[0],
            embed_dim=dims[1],
            heads=dims[2],
            blocks=dims[3],
            feature_dim=dims[4],
            mlp_dim=dims[5],
            seed=dims[6],
            weights=tensors,
        )
    raise FormatError(f"unknown encoder architecture tag {arch}")


def save_weights(params, path) -> None:
    """Serialize encoder params; round-trips bit-exactly via load_weights."""
    write_tensors(path, _params_to_tensors(params))


def load_weights(path):
    """Inverse of save_weights; raises FormatError on malformed files."""
    return _params_from_tensors(read_tensors(path))


def save_model(params, clf: PrototypeClassifier, path) -> None:
    """One file holding encoder weights plus the classifier prototypes."""
    tensors = _params_to_tensors(params)
    tensors["clf.prototypes"] = clf.prototypes
    tensors["clf.temperature"] = np.array([clf.temperature])
    write_tensors(path, tensors)


def load_model(path):
    tensors = read_tensors(path)
    if "clf.prototypes" not in tensors:
        raise FormatError("model file has no classifier prototypes")
    clf = PrototypeClassifier(
        prototypes=tensors.pop("clf.prototypes"),
        temperature=float(tensors.pop("clf.temperature")[0]),
    )
    return _params_from_tensors(tensors), clf


# ---------------------------------------------------------------------------
# sklearn-style estimators


class TransformerEncoder(BaseEstimator, TransformerMixin):
    """Estimator facade: fit trains the encoder, transform emits features."""

    def __init__(
        self,
        image_shape=(3, 32, 32),
        patch_size=4,
        embed_dim=64,
        heads=4,
        blocks=2,
        feature_dim=64,
        mlp_dim=128,
        temperature=20.0,
        epochs=30,
        batch_size=32,
        learning_rate=0.05,
        momentum=0.9,
        seed=0,
    ):
        self.image_shape = image_shape
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.heads = heads
        self.blocks = blocks
        self.feature_dim = feature_dim
        self.mlp_dim = mlp_dim
        self.temperature = temperature
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.seed = seed

    def fit(self, X, y):
        X = as_image_batch(X, self.image_shape)
        y = np.asarray(y, dtype=np.int64)
        self.classes_ = np.unique(y)
        params = init_transformer_encoder(
            image_shape=self.image_shape,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            heads=self.heads,
            blocks=self.blocks,
            feature_dim=self.feature_dim,
            mlp_dim=self.mlp_dim,
            seed=self.seed,
        )
        self.classifier_ = PrototypeClassifier.random(
            len(self.classes_), self.feature_dim,
            seed=derive_seed(self.seed, "clf"), temperature=self.temperature,
        )
        result = train_encoder(
            params,
            self.classifier_,
            X,
            y,
            TrainConfig(
                epochs=self.epochs,
                batch_size=self.batch_size,
                learning_rate=self.learning_rate,
                momentum=self.momentum,
                seed=derive_seed(self.seed, "train"),
            ),
        )
        self.params_ = result.params
        self.train_accuracy_ = result.train_accuracy
        return self

    def transform(self, X) -> np.ndarray:
        return encode_batch(self.params_, X)

    def predict(self, X) -> np.ndarray:
        return self.classifier_.predict(self.transform(X))


class LinearEncoder(BaseEstimator, TransformerMixin):
    """Estimator facade over the analytic linear encoder (no training)."""

    def __init__(self, image_shape=(3, 32, 32), feature_dim=64, identity=False, seed=0):
        self.image_shape = image_shape
        self.feature_dim = feature_dim
        self.identity = identity
        self.seed = seed

    def fit(self, X=None, y=None):
        if self.identity:
            self.params_ = identity_linear_encoder(self.image_shape)
        else:
            self.params_ = init_linear_encoder(
                self.image_shape, self.feature_dim, self.seed
            )
        return self

    def transform(self, X) -> np.ndarray:
        return encode_batch(self.params_, X)
