"""Caption-conditioning toolkit for diffusion-based image restoration.

The package covers the full loop around a text-conditioned restoration
backend: token-window extension and caption hygiene (harmful-span
filtering, relevance perturbation), length-first chain-of-thought caption
emit/parse, a trainable token-count adapter, deterministic LQ/HQ pair
generation with caption fan-out, a human annotation service, and an
evaluation harness with ablations and token-richness sweeps.
"""

from .config import RunConfig, load_config, save_config
from .cot_captioner import (
    CaptionerClient,
    CoTCaption,
    HttpCaptionerClient,
    LengthAnnotation,
    StubCaptioner,
    cot_prompt,
    emit_cot,
    mean_offset,
    offset_level,
    parse_cot,
    render_length_prompt,
    stub_token_length,
)
from .degradation_adapter import (
    SWEEP_TOKEN_COUNTS,
    AdapterConfig,
    AdapterGrads,
    AdapterState,
    adapter_backward,
    adapter_forward,
    concat_visual_tokens,
    init_adapter,
    load_adapter,
    rescale_spectral_norm,
    save_adapter,
)
from .errors import (
    AnnotationConflictError,
    BackendError,
    ConfigError,
    CoTParseError,
    DimensionError,
    DuplicateRegistrationError,
    HarmfulCaptionError,
    InvalidInputError,
    MismatchError,
    NotFoundError,
    ScorerFaultError,
    SequenceTooShortError,
    StaleLeaseError,
    ToolkitError,
    TransportError,
    UndefinedImprovementError,
)
from .evaluation import (
    AblationVariant,
    MetricRegistry,
    MetricReport,
    MetricSpec,
    build_report,
    default_registry,
    fixture_report,
    improvement_pct,
    load_improvement_fixture,
    richness_sweep,
    run_ablation,
    write_report,
)
from .pipeline import (
    Candidate,
    ClassicalDegrader,
    DataPipeline,
    Degrader,
    ExportSummary,
    HqImage,
    ImageMeta,
    LengthSchedule,
    PairRecord,
    RunStore,
    assign_degraders,
    classify_degradation,
)
from .restoration import (
    BatchOutcome,
    RestorationBackend,
    RestorationClient,
    RestorationRequest,
    RestorationResult,
    StubRestorationBackend,
    effective_token_length,
)
from .text_conditioning import (
    BASE_WINDOW,
    RICHNESS_BLOCK,
    CaptionRecord,
    HarmfulLexicon,
    TokenSequence,
    default_harmful_lexicon,
    encode_stub,
    extend_richness,
    filter_harmful,
    perturb_relevance,
    richness_schedule,
)

__all__ = [
    "AblationVariant",
    "AdapterConfig",
    "AdapterGrads",
    "AdapterState",
    "AnnotationConflictError",
    "BASE_WINDOW",
    "BackendError",
    "BatchOutcome",
    "Candidate",
    "CaptionRecord",
    "CaptionerClient",
    "ClassicalDegrader",
    "CoTCaption",
    "CoTParseError",
    "ConfigError",
    "DataPipeline",
    "Degrader",
    "DimensionError",
    "DuplicateRegistrationError",
    "ExportSummary",
    "HarmfulCaptionError",
    "HarmfulLexicon",
    "HqImage",
    "HttpCaptionerClient",
    "ImageMeta",
    "InvalidInputError",
    "LengthAnnotation",
    "LengthSchedule",
    "MetricRegistry",
    "MetricReport",
    "MetricSpec",
    "MismatchError",
    "NotFoundError",
    "PairRecord",
    "RICHNESS_BLOCK",
    "RestorationBackend",
    "RestorationClient",
    "RestorationRequest",
    "RestorationResult",
    "RunConfig",
    "RunStore",
    "SWEEP_TOKEN_COUNTS",
    "ScorerFaultError",
    "SequenceTooShortError",
    "StaleLeaseError",
    "StubCaptioner",
    "StubRestorationBackend",
    "TokenSequence",
    "ToolkitError",
    "TransportError",
    "UndefinedImprovementError",
    "adapter_backward",
    "adapter_forward",
    "assign_degraders",
    "build_report",
    "concat_visual_tokens",
    "classify_degradation",
    "cot_prompt",
    "default_harmful_lexicon",
    "default_registry",
    "effective_token_length",
    "emit_cot",
    "encode_stub",
    "extend_richness",
    "filter_harmful",
    "fixture_report",
    "improvement_pct",
    "init_adapter",
    "load_adapter",
    "load_config",
    "load_improvement_fixture",
    "mean_offset",
    "offset_level",
    "parse_cot",
    "perturb_relevance",
    "render_length_prompt",
    "rescale_spectral_norm",
    "richness_schedule",
    "richness_sweep",
    "run_ablation",
    "save_adapter",
    "save_config",
    "stub_token_length",
    "write_report",
]

__version__ = "0.1.0"
