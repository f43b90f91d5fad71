"""talab: a desk-scale laboratory for transferable adversarial attacks."""

__version__ = "0.1.0"

from .attacks import (
    AttackConfig,
    MethodParams,
    PerturbationState,
    adjusted_preset,
    dual_example_attack,
    rgi_initialize,
    run_attack,
)
from .autodiff import evaluate_with_gradient, finite_difference_gradient
from .datasets import DatasetFile, generate_dataset, load_dataset, save_dataset
from .ensembles import (
    EnsembleSpec,
    EnsembleTarget,
    FusionView,
    align_gradients,
    analytic_fusion_gradient,
    assign_async_transforms,
    fuse_outputs,
    longitude_attack,
)
from .errors import (
    ConfigurationError,
    FormatError,
    NumericError,
    TalabError,
    UndefinedRateError,
)
from .experiments import (
    AttackReport,
    ExperimentConfig,
    run_experiment,
    success_rate,
    sweep,
)
from .models import (
    ArchSpec,
    Model,
    TrainReport,
    build_model,
    classify,
    load_model,
    load_weights,
    save_weights,
    train_model,
)
from .projection import project_linf, uniform_linf_init
from .schedules import ScheduleSpec, make_schedule
from .spectral import SpectralPlan, dct2, idct2
from .transforms import (
    FrequencyMask,
    TransformSpec,
    TransformedTarget,
    apply_transform,
    averaged_transformed_gradient,
    highfreq_mask,
    tim_smooth_gradient,
)
