"""Fine-grained specialization for class-agnostic object counters.

A class-agnostic counter finds "all the objects"; this package narrows it to
one named subcategory without retraining the counter. The pipeline:

1. ``taxonomy`` - expand a category name into diverse prompts and source
   hard-negative sibling categories.
2. ``synthesis`` - generate images with a text-to-image backend and turn its
   cross-attention into pseudo ground-truth relevance masks.
3. ``specializer`` - tune a 512-d concept embedding against those masks with
   a joint positive/negative objective, picking a flat low-loss checkpoint.
4. ``counting`` - re-weight the counter's raw output by the predicted
   relevance mask and extract the specialized count.
5. ``evaluation`` - benchmark against point-annotated images with
   per-subcategory-averaged error metrics.

The ``finecount`` CLI wires the stages together from a single config file.
"""

from . import counting, evaluation, gridops, rng, specializer, synthesis, taxonomy
from .counting import (
    BlobDensityCounter,
    CentroidCounter,
    CountField,
    CounterBackend,
    CountKind,
    Diagnostics,
    count_fine_grained,
    extract_count,
    predict_mask,
    specialize,
)
from .errors import (
    BackendError,
    CapabilityError,
    DatasetError,
    FinecountError,
    FrozenBackendError,
    InsufficientNegativesError,
    InvalidSpecError,
    MetricError,
    MissingEmbeddingError,
    SuggesterTransportError,
    SynthesisError,
    TuningError,
)
from .evaluation import (
    ErrorFn,
    Report,
    load_dataset,
    metric,
    per_subcategory_errors,
    run_benchmark,
    summarize_records,
    write_report,
)
from .specializer import (
    AdamW,
    BilinearToySegmenter,
    ConceptEmbedding,
    InitStrategy,
    OptimizerStepper,
    SegmenterBackend,
    TuningConfig,
    concept_loss,
    load_concept,
    negative_loss,
    positive_loss,
    save_concept,
    sharpness,
    tune,
)
from .synthesis import (
    AttentionStack,
    GenerationResult,
    GeneratorBackend,
    GeneratorCapabilities,
    MockShapesGenerator,
    Polarity,
    PseudoPair,
    average_attention,
    binarize,
    build_toy_benchmark,
    extract_category_map,
    load_pairs,
    normalize_map,
    persist_pairs,
    synthesize_dataset,
)
from .taxonomy import (
    CategorySpec,
    NegativeSource,
    NegativeSuggester,
    PromptBundle,
    StaticSuggester,
    expand_prompts,
    source_negatives,
)

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "AttentionStack",
    "BackendError",
    "BilinearToySegmenter",
    "BlobDensityCounter",
    "CapabilityError",
    "CategorySpec",
    "CentroidCounter",
    "ConceptEmbedding",
    "CountField",
    "CountKind",
    "CounterBackend",
    "DatasetError",
    "Diagnostics",
    "ErrorFn",
    "FinecountError",
    "FrozenBackendError",
    "GenerationResult",
    "GeneratorBackend",
    "GeneratorCapabilities",
    "InitStrategy",
    "InsufficientNegativesError",
    "InvalidSpecError",
    "MetricError",
    "MissingEmbeddingError",
    "MockShapesGenerator",
    "NegativeSource",
    "NegativeSuggester",
    "OptimizerStepper",
    "Polarity",
    "PromptBundle",
    "PseudoPair",
    "Report",
    "SegmenterBackend",
    "StaticSuggester",
    "SuggesterTransportError",
    "SynthesisError",
    "TuningConfig",
    "TuningError",
    "average_attention",
    "binarize",
    "build_toy_benchmark",
    "concept_loss",
    "count_fine_grained",
    "counting",
    "evaluation",
    "expand_prompts",
    "extract_category_map",
    "extract_count",
    "gridops",
    "load_concept",
    "load_dataset",
    "load_pairs",
    "metric",
    "negative_loss",
    "normalize_map",
    "per_subcategory_errors",
    "persist_pairs",
    "positive_loss",
    "predict_mask",
    "rng",
    "run_benchmark",
    "save_concept",
    "sharpness",
    "source_negatives",
    "specialize",
    "specializer",
    "summarize_records",
    "synthesis",
    "synthesize_dataset",
    "taxonomy",
    "tune",
    "write_report",
]
