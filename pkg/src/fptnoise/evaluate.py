"""Experiment driver: train, attack, defend, and report at desk scale.

Per-image seeds are derived from the base seed with purpose tags, so results
are independent of worker count and chunking. The heavy context (trained
model plus attacked images) is built once and reused across ablation and
sweep variants.
"""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, attack_batch
from .data import Dataset, SyntheticDatasetSpec, generate_synthetic, load_idx
from .defense import Branch, DecisionTrace, DefenseConfig, DfmParams, defend, init_dfm
from .encoders import (
    PrototypeClassifier,
    TrainConfig,
    init_transformer_encoder,
    load_model,
    predict_batch,
    save_model,
    train_encoder,
)
from .errors import ConfigurationError, UsageError
from .metrics import accuracy, detector_auc
from .rng import derive_seed, make_generator


@dataclass(frozen=True)
class AblationFlags:
    dfm_on: bool = True
    fpt_on: bool = True
    sar_on: bool = True
    tte_on: bool = True


@dataclass(frozen=True)
class EncoderArch:
    patch_size: int = 4
    embed_dim: int = 64
    heads: int = 4
    blocks: int = 2
    feature_dim: int = 64
    mlp_dim: int = 128
    # 10 rather than the classifier's own default of 20: the lower temperature
    # trains more stably at this scale and keeps clean inputs robust to the
    # counterattack noise (swept; see README)
    temperature: float = 10.0
    dfm_tokens: int = 8
    dfm_heads: int = 2


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    synthetic: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    train_images_path: str | None = None
    train_labels_path: str | None = None
    eval_images_path: str | None = None
    eval_labels_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "idx"):
            raise ConfigurationError(f"unknown dataset kind {self.kind!r}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderArch = field(default_factory=EncoderArch)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack_kind: str = "pgd"
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=16 / 255))
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    flags: AblationFlags = field(default_factory=AblationFlags)
    workers: int = 1
    timing_enabled: bool = True
    weights_path: str | None = None
    out_dir: str | None = None

    def to_dict(self) -> dict:
        raw = dataclasses.asdict(self)
        raw["dataset"]["synthetic"]["image_shape"] = list(
            self.dataset.synthetic.image_shape
        )
        return raw

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        def section(name, klass, transform=None):
            data = dict(raw.get(name) or {})
            if transform:
                transform(data)
            try:
                return klass(**data)
            except TypeError as exc:
                raise UsageError(f"bad '{name}' config section: {exc}") from exc

        def fix_dataset(data):
            syn = dict(data.get("synthetic") or {})
            if "image_shape" in syn:
                syn["image_shape"] = tuple(syn["image_shape"])
            data["synthetic"] = SyntheticDatasetSpec(**syn)

        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        return cls(
            seed=raw.get("seed", 0),
            dataset=section("dataset", DatasetConfig, fix_dataset),
            encoder=section("encoder", EncoderArch),
            train=section("train", TrainConfig),
            attack_kind=raw.get("attack_kind", "pgd"),
            attack=section("attack", AttackConfig)
            if raw.get("attack")
            else AttackConfig(epsilon=8 / 255),
            defense=section("defense", DefenseConfig),
            flags=section("flags", AblationFlags),
            workers=raw.get("workers", 1),
            timing_enabled=raw.get("timing_enabled", True),
            weights_path=raw.get("weights_path"),
            out_dir=raw.get("out_dir"),
        )


@dataclass(frozen=True)
class TraceRow:
    """One serialized defense decision: the pinned trace-CSV column set."""

    index: int
    tau: float
    ttc_tau: float
    sigma: float
    k: float
    r: float
    w: float
    branch: str
    final_linf: float
    pred: int
    label: int
    timing_ms: float


@dataclass
class EvalReport:
    clean_accuracy: float
    robust_accuracy: float
    defended_clean_accuracy: float
    defended_robust_accuracy: float
    auc_fpt: float
    auc_ttc: float
    branch_hist_clean: dict[str, int]
    branch_hist_adv: dict[str, int]
    mean_defense_time_ms: float
    train_accuracy: float
    config: dict
    traces: list[TraceRow] = field(default_factory=list)

    SUMMARY_FIELDS = (
        "clean_accuracy",
        "robust_accuracy",
        "defended_clean_accuracy",
        "defended_robust_accuracy",
        "auc_fpt",
        "auc_ttc",
        "mean_defense_time_ms",
        "train_accuracy",
    )


# ---------------------------------------------------------------------------
# context: everything upstream of the defense


@dataclass
class EvalContext:
    run: RunConfig
    params: object
    clf: PrototypeClassifier
    dfm: DfmParams
    train_accuracy: float
    eval_set: Dataset
    adv_images: np.ndarray
    clean_accuracy: float
    robust_accuracy: float


def load_datasets(run: RunConfig) -> tuple[Dataset, Dataset]:
    ds = run.dataset
    if ds.kind == "idx":
        train = load_idx(ds.train_images_path, ds.train_labels_path)
        evalset = load_idx(ds.eval_images_path, ds.eval_labels_path)
        return train, evalset
    train = generate_synthetic(ds.synthetic, derive_seed(run.seed, "train-data"))
    evalset = generate_synthetic(ds.synthetic, derive_seed(run.seed, "eval-data"))
    return train, evalset


def _image_shape(run: RunConfig, train: Dataset) -> tuple[int, int, int]:
    if run.dataset.kind == "idx":
        return tuple(train.images.shape[1:])
    return run.dataset.synthetic.image_shape


def build_context(run: RunConfig) -> EvalContext:
    """Data, trained (or loaded) model, attacked eval set, undefended metrics."""
    train_set, eval_set = load_datasets(run)
    arch = run.encoder
    n_classes = int(train_set.labels.max()) + 1

    if run.weights_path and os.path.exists(run.weights_path):
        params, clf = load_model(run.weights_path)
        train_accuracy = accuracy(
            predict_batch(params, clf, train_set.images), train_set.labels
        )
    else:
        params = init_transformer_encoder(
            image_shape=_image_shape(run, train_set),
            patch_size=arch.patch_size,
            embed_dim=arch.embed_dim,
            heads=arch.heads,
            blocks=arch.blocks,
            feature_dim=arch.feature_dim,
            mlp_dim=arch.mlp_dim,
            seed=derive_seed(run.seed, "encoder"),
        )
        clf = PrototypeClassifier.random(
            n_classes,
            arch.feature_dim,
            seed=derive_seed(run.seed, "prototypes"),
            temperature=arch.temperature,
        )
        result = train_encoder(params, clf, train_set.images, train_set.labels, run.train)
        params, train_accuracy = result.params, result.train_accuracy
        if run.weights_path:
            save_model(params, clf, run.weights_path)

    dfm = init_dfm(
        params.feature_dim if hasattr(params, "feature_dim") else arch.feature_dim,
        tokens=arch.dfm_tokens,
        heads=arch.dfm_heads,
        seed=derive_seed(run.seed, "dfm"),
    )

    adv_images = attack_batch(
        eval_set.images, eval_set.labels, params, clf, run.attack_kind, run.attack
    )
    clean_acc = accuracy(predict_batch(params, clf, eval_set.images), eval_set.labels)
    robust_acc = accuracy(predict_batch(params, clf, adv_images), eval_set.labels)
    return EvalContext(
        run=run,
        params=params,
        clf=clf,
        dfm=dfm,
        train_accuracy=train_accuracy,
        eval_set=eval_set,
        adv_images=adv_images,
        clean_accuracy=clean_acc,
        robust_accuracy=robust_acc,
    )


# ---------------------------------------------------------------------------
# defended populations (optionally in parallel)


def _defend_chunk(args):
    params, clf, dfm, images, cfg, flags, seeds, measure_time = args
    out = []
    for image, seed in zip(images, seeds):
        rng = make_generator(seed)
        pred, trace = defend(
            params,
            clf,
            dfm,
            image,
            cfg,
            rng,
            dfm_on=flags.dfm_on,
            fpt_on=flags.fpt_on,
            sar_on=flags.sar_on,
            measure_time=measure_time,
        )
        out.append((pred, trace))
    return out


def defend_population(
    ctx: EvalContext,
    images: np.ndarray,
    cfg: DefenseConfig,
    flags: AblationFlags,
    seed_tag: str,
) -> tuple[np.ndarray, list[DecisionTrace]]:
    run = ctx.run
    seeds = [derive_seed(run.seed, seed_tag, i) for i in range(len(images))]
    chunk = 16
    jobs = [
        (
            ctx.params,
            ctx.clf,
            ctx.dfm,
            images[i : i + chunk],
            cfg,
            flags,
            seeds[i : i + chunk],
            run.timing_enabled,
        )
        for i in range(0, len(images), chunk)
    ]
    if run.workers > 1:
        with ProcessPoolExecutor(max_workers=run.workers) as pool:
            chunks = list(pool.map(_defend_chunk, jobs))
    else:
        chunks = [_defend_chunk(job) for job in jobs]
    results = [item for chunk_result in chunks for item in chunk_result]
    preds = np.asarray([p for p, _ in results], dtype=np.int64)
    traces = [t for _, t in results]
    return preds, traces


def _histogram(traces: list[DecisionTrace]) -> dict[str, int]:
    hist = {b.value: 0 for b in Branch}
    for t in traces:
        hist[t.branch.value] += 1
    return hist


def _trace_rows(traces, preds, labels, start_index) -> list[TraceRow]:
    rows = []
    for i, (trace, pred, label) in enumerate(zip(traces, preds, labels)):
        rows.append(
            TraceRow(
                index=start_index + i,
                tau=trace.tau,
                ttc_tau=trace.ttc_tau,
                sigma=trace.sigma,
                k=trace.k,
                r=trace.r,
                w=trace.w,
                branch=trace.branch.value,
                final_linf=trace.final_perturbation_linf,
                pred=int(pred),
                label=int(label),
                timing_ms=trace.timing_ms,
            )
        )
    return rows


def evaluate_defense(
    ctx: EvalContext,
    defense: DefenseConfig | None = None,
    flags: AblationFlags | None = None,
) -> EvalReport:
    """Defend both eval populations against an already-built context."""
    run = ctx.run
    cfg = defense if defense is not None else run.defense
    flags = flags if flags is not None else run.flags
    cfg = dataclasses.replace(cfg, tte_enabled=cfg.tte_enabled and flags.tte_on)

    labels = ctx.eval_set.labels
    clean_preds, clean_traces = defend_population(
        ctx, ctx.eval_set.images, cfg, flags, "defend-clean"
    )
    adv_preds, adv_traces = defend_population(
        ctx, ctx.adv_images, cfg, flags, "defend-adv"
    )

    all_traces = clean_traces + adv_traces
    run_echo = dataclasses.replace(run, defense=cfg, flags=flags)
    rows = _trace_rows(clean_traces, clean_preds, labels, 0) + _trace_rows(
        adv_traces, adv_preds, labels, len(labels)
    )
    return EvalReport(
        clean_accuracy=ctx.clean_accuracy,
        robust_accuracy=ctx.robust_accuracy,
        defended_clean_accuracy=accuracy(clean_preds, labels),
        defended_robust_accuracy=accuracy(adv_preds, labels),
        auc_fpt=detector_auc(
            [t.tau for t in clean_traces], [t.tau for t in adv_traces]
        ),
        auc_ttc=detector_auc(
            [t.ttc_tau for t in clean_traces], [t.ttc_tau for t in adv_traces]
        ),
        branch_hist_clean=_histogram(clean_traces),
        branch_hist_adv=_histogram(adv_traces),
        mean_defense_time_ms=float(np.mean([t.timing_ms for t in all_traces])),
        train_accuracy=ctx.train_accuracy,
        config=run_echo.to_dict(),
        traces=rows,
    )


def evaluate(run: RunConfig) -> EvalReport:
    """Full pipeline: data, train-or-load, attack, defend, report."""
    return evaluate_defense(build_context(run))


ABLATION_GRID = {
    "full": AblationFlags(dfm_on=True, fpt_on=True, sar_on=True),
    "no_sar": AblationFlags(dfm_on=True, fpt_on=True, sar_on=False),
    "no_fpt": AblationFlags(dfm_on=True, fpt_on=False, sar_on=True),
    "no_dfm": AblationFlags(dfm_on=False, fpt_on=True, sar_on=True),
    "none": AblationFlags(dfm_on=False, fpt_on=False, sar_on=False),
}


def run_ablation_grid(run: RunConfig, ctx: EvalContext | None = None):
    """Reports for the module-toggle grid, sharing one trained context."""
    if ctx is None:
        ctx = build_context(run)
    return {name: evaluate_defense(ctx, flags=flags) for name, flags in ABLATION_GRID.items()}


SWEEPABLE = ("tau_init", "beta", "counter_budget", "sigma_max", "counter_steps")


def sweep(param: str, values, run: RunConfig, ctx: EvalContext | None = None):
    """One report per parameter value, reusing the trained/attacked context."""
    if param not in SWEEPABLE:
        raise UsageError(f"cannot sweep {param!r}; choose one of {SWEEPABLE}")
    values = list(values)
    if not values:
        raise UsageError("sweep needs at least one value")
    if ctx is None:
        ctx = build_context(run)
    out = []
    for value in values:
        if param == "counter_steps":
            value = int(value)
        cfg = dataclasses.replace(run.defense, **{param: value})
        out.append((value, evaluate_defense(ctx, defense=cfg)))
    return out
