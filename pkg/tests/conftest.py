import pytest

from fptnoise.data import SyntheticDatasetSpec, generate_synthetic
from fptnoise.encoders import (
    PrototypeClassifier,
    TrainConfig,
    init_transformer_encoder,
    train_encoder,
)
from fptnoise.rng import derive_seed


DESK_SPEC = SyntheticDatasetSpec()  # 8 classes, 25 per class, 3x32x32
DESK_SEED = 0


class TrainedModel:
    def __init__(self, params, clf, train_set, eval_set, train_accuracy):
        self.params = params
        self.clf = clf
        self.train_set = train_set
        self.eval_set = eval_set
        self.train_accuracy = train_accuracy


def _train_model(spec, seed, arch_kwargs, train_kwargs, temperature):
    train_set = generate_synthetic(spec, derive_seed(seed, "train-data"))
    eval_set = generate_synthetic(spec, derive_seed(seed, "eval-data"))
    params = init_transformer_encoder(
        image_shape=spec.image_shape, seed=derive_seed(seed, "encoder"), **arch_kwargs
    )
    clf = PrototypeClassifier.random(
        spec.classes,
        arch_kwargs.get("feature_dim", 64),
        seed=derive_seed(seed, "prototypes"),
        temperature=temperature,
    )
    result = train_encoder(
        params, clf, train_set.images, train_set.labels, TrainConfig(**train_kwargs)
    )
    return TrainedModel(result.params, clf, train_set, eval_set, result.train_accuracy)


@pytest.fixture(scope="session")
def desk_model():
    """Trained desk-scale model shared by the heavier tests."""
    return _train_model(
        DESK_SPEC,
        DESK_SEED,
        dict(patch_size=4, embed_dim=64, heads=4, blocks=2, feature_dim=64, mlp_dim=128),
        dict(seed=derive_seed(DESK_SEED, "train")),
        temperature=10.0,
    )


@pytest.fixture(scope="session")
def mini_model():
    """Small trained model for unit tests that just need a working encoder."""
    spec = SyntheticDatasetSpec(
        classes=4, per_class=12, image_shape=(3, 16, 16), jitter=0.03
    )
    return _train_model(
        spec,
        7,
        dict(patch_size=4, embed_dim=32, heads=4, blocks=2, feature_dim=32, mlp_dim=64),
        dict(epochs=20, batch_size=16, learning_rate=0.005, seed=11),
        temperature=10.0,
    )
