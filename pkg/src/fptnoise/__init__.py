"""Test-time adversarial defense via feature-perception-threshold noise."""

from .attacks import AttackConfig, fgsm, pgd
from .autodiff import GradientResult, Tensor, backward
from .data import Dataset, SyntheticDatasetSpec, generate_synthetic, load_idx
from .defense import (
    Branch,
    DecisionTrace,
    DefenseConfig,
    DfmParams,
    FPTNoiseDefense,
    adaptive_gain,
    compute_fpt,
    compute_ttc_tau,
    defend,
    dfm_sigma,
    init_dfm,
    init_noise,
    norm_ratio,
    optimize_counterattack,
    select_final,
    suppression_weight,
    tte_predict,
)
from .encoders import (
    LinearEncoder,
    LinearEncoderParams,
    PrototypeClassifier,
    TrainConfig,
    TransformerEncoder,
    TransformerEncoderParams,
    classify,
    encode,
    identity_linear_encoder,
    init_linear_encoder,
    init_transformer_encoder,
    load_weights,
    save_weights,
    train_encoder,
)
from .errors import (
    ConfigurationError,
    DegenerateFeatureError,
    FormatError,
    FptNoiseError,
    GenerationError,
    InputError,
    TrainingError,
    UsageError,
)
from .evaluate import (
    AblationFlags,
    EvalReport,
    RunConfig,
    evaluate,
    run_ablation_grid,
    sweep,
)
from .metrics import accuracy, bootstrap_mean_gap, detector_auc
from .reports import emit_report

__version__ = "0.1.0"
