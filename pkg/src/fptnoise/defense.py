"""Scene-aware counterattack defense pipeline.

Per image the pipeline: encode, derive a per-image noise scale from a fixed
attention module, probe feature drift under a small and a large random
perturbation to get the feature perception threshold tau, amplify the
Gaussian seed noise by an exponential gain, optimize a counterattack
perturbation that maximizes drift from the anchor feature, then either keep
it in full (high tau, or feature-norm recovery above beta) or scale it down
by the exponential suppression weight. Predictions average cosine logits
over a small set of test-time transformations.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import (
    PrototypeClassifier,
    classify,
    encode,
    feature_graph,
)
from .errors import ConfigurationError, DegenerateFeatureError
from .imageops import center_crop_resize, clip01, hflip
from .rng import derive_seed, generator_for, make_generator
from .validation import as_image


class Branch(enum.Enum):
    """Which arm of the final-noise rule fired for an image."""

    COUNTER_FULL_TAU_HIGH = "CounterFull_TauHigh"
    COUNTER_FULL_RATIO_HIGH = "CounterFull_RatioHigh"
    SUPPRESSED = "Suppressed"


@dataclass(frozen=True)
class DefenseConfig:
    tau_init: float = 0.32
    beta: float = 1.125
    k_min: float = 1.0
    k_max: float = 6.0
    w_scale: float = 10.0
    probe_eps_small: float = 4.0 / 255.0
    probe_eps_large: float = 32.0 / 255.0
    counter_steps: int = 2
    counter_budget: float = 4.0 / 255.0
    sigma_min: float = 2.0 / 255.0
    sigma_max: float = 16.0 / 255.0
    tte_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.probe_eps_small >= self.probe_eps_large:
            raise ConfigurationError("probe_eps_small must be < probe_eps_large")
        if self.k_min > self.k_max:
            raise ConfigurationError("k_min must be <= k_max")
        if self.sigma_min > self.sigma_max:
            raise ConfigurationError("sigma_min must be <= sigma_max")
        if self.beta <= 0:
            raise ConfigurationError("beta must be positive")
        if self.counter_steps < 1:
            raise ConfigurationError("counter_steps must be >= 1")
        if self.counter_budget < 0:
            raise ConfigurationError("counter_budget must be >= 0")


@dataclass(frozen=True)
class DecisionTrace:
    """Per-image defense bookkeeping; one CSV row per defended image."""

    tau: float
    ttc_tau: float
    sigma: float
    k: float
    r: float
    w: float
    branch: Branch
    final_perturbation_linf: float
    timing_ms: float


# ---------------------------------------------------------------------------
# dynamic noise-scale module


@dataclass(frozen=True)
class DfmParams:
    """Fixed-weight attention module mapping a feature vector to a noise scale.

    The feature is split into `tokens` tokens, passed through one multi-head
    self-attention layer and a layer norm (weights seeded, never trained).
    The dispersion statistic is the normalized entropy of the softmax over
    post-attention token norms.
    """

    feature_dim: int
    tokens: int
    heads: int
    seed: int
    weights: dict[str, np.ndarray]

    @property
    def token_dim(self) -> int:
        return self.feature_dim // self.tokens


def _orthogonal(rng: np.random.Generator, dim: int) -> np.ndarray:
    raw = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(raw)
    return q * np.sign(np.diag(r))


def init_dfm(feature_dim: int, tokens: int = 8, heads: int = 2, seed: int = 0) -> DfmParams:
    if tokens < 1 or feature_dim % tokens:
        raise ConfigurationError(
            f"feature dim {feature_dim} not divisible into {tokens} tokens"
        )
    dim = feature_dim // tokens
    if heads < 1 or dim % heads:
        raise ConfigurationError(f"token dim {dim} not divisible by {heads} heads")
    rng = make_generator(derive_seed(seed, "dfm-init"))
    weights = {name: _orthogonal(rng, dim) for name in ("wq", "wk", "wv", "wo")}
    weights["ln.gain"] = np.ones(dim)
    weights["ln.shift"] = np.zeros(dim)
    return DfmParams(
        feature_dim=feature_dim, tokens=tokens, heads=heads, seed=seed, weights=weights
    )


def _dfm_forward(dfm: DfmParams, feature: np.ndarray) -> np.ndarray:
    """Attention + layer norm over feature tokens, plain numpy."""
    toks = feature.reshape(dfm.tokens, dfm.token_dim)
    w = dfm.weights
    q, k, v = toks @ w["wq"], toks @ w["wk"], toks @ w["wv"]
    dh = dfm.token_dim // dfm.heads
    out = np.empty_like(toks)
    for h in range(dfm.heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        scores -= scores.max(axis=1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=1, keepdims=True)
        out[:, sl] = attn @ v[:, sl]
    out = out @ w["wo"]
    mu = out.mean(axis=1, keepdims=True)
    var = out.var(axis=1)
    normed = (out - mu) / np.sqrt(var + 1e-5)[:, None]
    return normed * w["ln.gain"] + w["ln.shift"]


def dispersion_statistic(dfm: DfmParams, feature: np.ndarray) -> float:
    """Normalized entropy in [0, 1] of softmax over post-attention token norms."""
    if dfm.tokens == 1:
        return 0.0
    norms = np.linalg.norm(_dfm_forward(dfm, feature), axis=1)
    norms = norms - norms.max()
    p = np.exp(norms)
    p /= p.sum()
    entropy = -(p * np.log(np.maximum(p, 1e-300))).sum()
    return float(entropy / math.log(dfm.tokens))


def sigma_from_dispersion(h: float, cfg: DefenseConfig) -> float:
    return cfg.sigma_min + (cfg.sigma_max - cfg.sigma_min) * h


def dfm_sigma(feature: np.ndarray, dfm: DfmParams, cfg: DefenseConfig) -> float:
    """Per-image noise scale in [sigma_min, sigma_max]."""
    feature = np.asarray(feature, dtype=np.float64).reshape(-1)
    if feature.shape[0] != dfm.feature_dim:
        raise ConfigurationError(
            f"feature dim {feature.shape[0]} does not match module dim "
            f"{dfm.feature_dim}"
        )
    return sigma_from_dispersion(dispersion_statistic(dfm, feature), cfg)


# ---------------------------------------------------------------------------
# drift probes and thresholds


def _feature_and_norm(params, image: np.ndarray) -> tuple[np.ndarray, float]:
    feat = encode(params, image)
    norm = float(np.linalg.norm(feat))
    if norm == 0.0:
        raise DegenerateFeatureError("encoder produced a zero feature vector")
    return feat, norm


def drift_norm(params, image: np.ndarray, probe: np.ndarray, anchor: np.ndarray) -> float:
    """Feature displacement caused by a probe, with the probed image clipped."""
    probed = clip01(image + probe)
    return float(np.linalg.norm(encode(params, probed) - anchor))


def fpt_from_probes(params, image, delta0, delta1) -> float:
    """Differential drift response (large-probe minus small-probe, normalized)."""
    image = as_image(image, params.image_shape)
    anchor, norm = _feature_and_norm(params, image)
    d0 = drift_norm(params, image, delta0, anchor)
    d1 = drift_norm(params, image, delta1, anchor)
    return (d1 - d0) / norm


def compute_fpt(params, image, cfg: DefenseConfig, rng: np.random.Generator) -> float:
    """Draw the two uniform probes (small first) and return tau."""
    image = as_image(image, params.image_shape)
    d0 = rng.uniform(-cfg.probe_eps_small, cfg.probe_eps_small, size=image.shape)
    d1 = rng.uniform(-cfg.probe_eps_large, cfg.probe_eps_large, size=image.shape)
    return fpt_from_probes(params, image, d0, d1)


def compute_ttc_tau(params, image, probe_eps: float, rng: np.random.Generator) -> float:
    """Single-probe drift ratio (the baseline detector)."""
    image = as_image(image, params.image_shape)
    anchor, norm = _feature_and_norm(params, image)
    probe = rng.uniform(-probe_eps, probe_eps, size=image.shape)
    return drift_norm(params, image, probe, anchor) / norm


def _probe_statistics(params, image, cfg, rng, anchor, norm) -> tuple[float, float]:
    """(tau, ttc_tau) sharing one small-probe draw; draw order: small, large."""
    d0 = rng.uniform(-cfg.probe_eps_small, cfg.probe_eps_small, size=image.shape)
    d1 = rng.uniform(-cfg.probe_eps_large, cfg.probe_eps_large, size=image.shape)
    drift0 = drift_norm(params, image, d0, anchor)
    drift1 = drift_norm(params, image, d1, anchor)
    return (drift1 - drift0) / norm, drift0 / norm


# ---------------------------------------------------------------------------
# counterattack


def adaptive_gain(tau: float, cfg: DefenseConfig) -> float:
    """k = clamp(exp(tau - tau_init), k_min, k_max)."""
    return min(max(math.exp(tau - cfg.tau_init), cfg.k_min), cfg.k_max)


def init_noise(k: float, sigma: float, shape, rng: np.random.Generator) -> np.ndarray:
    """Seed noise k * sigma * standard-normal draw, elementwise."""
    if k < 0 or sigma < 0:
        raise ConfigurationError("k and sigma must be >= 0")
    return k * sigma * rng.standard_normal(shape)


@dataclass(frozen=True)
class CounterattackResult:
    delta: np.ndarray
    objective: float
    start_objective: float


def optimize_counterattack(
    params, image, delta_init: np.ndarray, cfg: DefenseConfig
) -> CounterattackResult:
    """Projected sign-gradient ascent on drift from the fixed anchor feature.

    The anchor is encoded exactly once. Each step projects onto the
    counter-budget box and keeps the image in [0, 1]; the best-objective
    iterate seen (start included) is returned.
    """
    image = as_image(image, params.image_shape)
    budget = cfg.counter_budget
    anchor = encode(params, image)

    def project(delta):
        delta = np.clip(delta, -budget, budget)
        return clip01(image + delta) - image

    delta = project(np.asarray(delta_init, dtype=np.float64))
    if budget == 0.0:
        return CounterattackResult(delta=delta, objective=0.0, start_objective=0.0)

    anchor_t = Tensor(anchor)
    best_delta, best_obj = delta, -np.inf
    start_obj = None
    for _ in range(cfg.counter_steps):
        delta_t = Tensor(delta[None], requires_grad=True)
        feat = feature_graph(params, ad.add(Tensor(image[None]), delta_t))
        drift = ad.l2_norm(ad.sub(feat, anchor_t))
        obj = drift.item()
        if start_obj is None:
            start_obj = obj
        if obj > best_obj:
            best_obj, best_delta = obj, delta
        grad = ad.backward(drift)[delta_t][0]
        delta = project(delta + budget * np.sign(grad))
    final_obj = float(np.linalg.norm(encode(params, clip01(image + delta)) - anchor))
    if final_obj > best_obj:
        best_obj, best_delta = final_obj, delta
    return CounterattackResult(
        delta=best_delta, objective=best_obj, start_objective=start_obj
    )


def norm_ratio(params, image, delta_c: np.ndarray) -> float:
    """Feature-norm recovery ratio after adding the counterattack noise."""
    image = as_image(image, params.image_shape)
    _, norm = _feature_and_norm(params, image)
    return float(np.linalg.norm(encode(params, image + delta_c))) / norm


def suppression_weight(tau: float, cfg: DefenseConfig) -> float:
    """W = exp((tau - tau_init) * w_scale); at most 1 for sub-threshold tau."""
    return math.exp((tau - cfg.tau_init) * cfg.w_scale)


def select_final(
    tau: float, r: float, delta_c: np.ndarray, cfg: DefenseConfig
) -> tuple[np.ndarray, Branch, float]:
    """Three-way rule: full noise on high tau, full on norm recovery, else
    suppressed. Returns (delta_final, branch, weight applied)."""
    if tau > cfg.tau_init:
        return delta_c, Branch.COUNTER_FULL_TAU_HIGH, 1.0
    if r > cfg.beta:
        return delta_c, Branch.COUNTER_FULL_RATIO_HIGH, 1.0
    w = suppression_weight(tau, cfg)
    return w * delta_c, Branch.SUPPRESSED, w


# ---------------------------------------------------------------------------
# prediction


def tte_transforms(cfg: DefenseConfig):
    """Transformation set: identity, horizontal flip, center crop rescaled
    back, and the flipped crop; identity only when ensembling is off."""
    if not cfg.tte_enabled:
        return [lambda img: img]
    return [
        lambda img: img,
        hflip,
        center_crop_resize,
        lambda img: center_crop_resize(hflip(img)),
    ]


def tte_predict(params, clf: PrototypeClassifier, image, cfg: DefenseConfig) -> np.ndarray:
    """Arithmetic mean of cosine logits over the transformation set."""
    image = as_image(image, params.image_shape)
    members = tte_transforms(cfg)
    logits = [classify(clf, encode(params, t(image))) for t in members]
    return np.mean(logits, axis=0)


# ---------------------------------------------------------------------------
# full pipeline


def defend(
    params,
    clf: PrototypeClassifier,
    dfm: DfmParams,
    image,
    cfg: DefenseConfig,
    rng: np.random.Generator,
    *,
    dfm_on: bool = True,
    fpt_on: bool = True,
    sar_on: bool = True,
    measure_time: bool = True,
) -> tuple[int, DecisionTrace]:
    """Run the full defense on one image; returns (prediction, trace).

    Ablations: dfm_on=False fixes sigma at the midpoint of its range;
    fpt_on=False gates on the single-probe baseline threshold instead;
    sar_on=False applies the counterattack noise unweighted regardless of
    the branch (the branch is still recorded from the usual comparisons).

    Draw order on `rng`: small probe, large probe, Gaussian seed noise.
    """
    started = time.perf_counter() if measure_time else None
    image = as_image(image, params.image_shape)
    anchor, anchor_norm = _feature_and_norm(params, image)

    if dfm_on:
        sigma = dfm_sigma(anchor, dfm, cfg)
    else:
        sigma = 0.5 * (cfg.sigma_min + cfg.sigma_max)

    tau_fpt, ttc_tau = _probe_statistics(params, image, cfg, rng, anchor, anchor_norm)
    tau = tau_fpt if fpt_on else ttc_tau

    k = adaptive_gain(tau, cfg)
    delta_init = init_noise(k, sigma, image.shape, rng)
    counter = optimize_counterattack(params, image, delta_init, cfg)
    r = float(np.linalg.norm(encode(params, image + counter.delta))) / anchor_norm

    delta_final, branch, w = select_final(tau, r, counter.delta, cfg)
    if not sar_on:
        delta_final = counter.delta

    defended = clip01(image + delta_final)
    logits = tte_predict(params, clf, defended, cfg)
    prediction = int(np.argmax(logits))

    elapsed_ms = (time.perf_counter() - started) * 1e3 if measure_time else 0.0
    trace = DecisionTrace(
        tau=tau,
        ttc_tau=ttc_tau,
        sigma=sigma,
        k=k,
        r=r,
        w=w,
        branch=branch,
        final_perturbation_linf=float(np.abs(defended - image).max()),
        timing_ms=elapsed_ms,
    )
    return prediction, trace


class FPTNoiseDefense(BaseEstimator):
    """Estimator facade: predict() defends each image before classifying.

    `encoder` is a trained params object and `classifier` the prototype
    classifier it was trained against. fit() only builds the fixed noise
    module; there is nothing to learn.
    """

    def __init__(
        self,
        encoder=None,
        classifier=None,
        tau_init=0.32,
        beta=1.125,
        k_min=1.0,
        k_max=6.0,
        w_scale=10.0,
        probe_eps_small=4.0 / 255.0,
        probe_eps_large=32.0 / 255.0,
        counter_steps=2,
        counter_budget=4.0 / 255.0,
        sigma_min=2.0 / 255.0,
        sigma_max=16.0 / 255.0,
        tte_enabled=True,
        dfm_tokens=8,
        dfm_heads=2,
        seed=0,
    ):
        self.encoder = encoder
        self.classifier = classifier
        self.tau_init = tau_init
        self.beta = beta
        self.k_min = k_min
        self.k_max = k_max
        self.w_scale = w_scale
        self.probe_eps_small = probe_eps_small
        self.probe_eps_large = probe_eps_large
        self.counter_steps = counter_steps
        self.counter_budget = counter_budget
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.tte_enabled = tte_enabled
        self.dfm_tokens = dfm_tokens
        self.dfm_heads = dfm_heads
        self.seed = seed

    def _config(self) -> DefenseConfig:
        return DefenseConfig(
            tau_init=self.tau_init,
            beta=self.beta,
            k_min=self.k_min,
            k_max=self.k_max,
            w_scale=self.w_scale,
            probe_eps_small=self.probe_eps_small,
            probe_eps_large=self.probe_eps_large,
            counter_steps=self.counter_steps,
            counter_budget=self.counter_budget,
            sigma_min=self.sigma_min,
            sigma_max=self.sigma_max,
            tte_enabled=self.tte_enabled,
            seed=self.seed,
        )

    def fit(self, X=None, y=None):
        if self.encoder is None or self.classifier is None:
            raise ConfigurationError("defense needs an encoder and a classifier")
        self.config_ = self._config()
        self.dfm_ = init_dfm(
            self.encoder.feature_dim,
            tokens=self.dfm_tokens,
            heads=self.dfm_heads,
            seed=derive_seed(self.seed, "dfm"),
        )
        return self

    def predict_trace(self, X) -> tuple[np.ndarray, list[DecisionTrace]]:
        preds, traces = [], []
        for index, image in enumerate(np.asarray(X, dtype=np.float64)):
            rng = generator_for(self.seed, "defend", index)
            pred, trace = defend(
                self.encoder, self.classifier, self.dfm_, image, self.config_, rng
            )
            preds.append(pred)
            traces.append(trace)
        return np.asarray(preds, dtype=np.int64), traces

    def predict(self, X) -> np.ndarray:
        return self.predict_trace(X)[0]
