"""Expert-in-the-loop few-shot prompt tuning and batched VLM inference."""

from .aggregate import (
    INCONCLUSIVE,
    AnimalTally,
    StudyReport,
    build_report,
    compute_accuracy,
    compute_time_improvement,
    majority_vote,
    render_report,
    tally_predictions,
)
from .clocks import VirtualClock, WallClock
from .dataset import (
    AnimalRecord,
    DatasetManifest,
    ImageRecord,
    StudyConfig,
    load_manifest,
    partition_prompt_subset,
    select_prompt_subset,
)
from .engine import (
    AptState,
    ReviewItem,
    apply_review,
    finalize_effective_set,
    init_apt,
    run_round,
)
from .gateway import (
    GatewayTelemetry,
    ProviderConfig,
    RateLimitPolicy,
    ReplayProvider,
    ScriptEntry,
    VlmGateway,
    VlmResponse,
    scripted_provider,
)
from .inference import BatchPlan, plan_batches, run_inference
from .parsing import (
    ModelVerdict,
    ParseFailure,
    parse_batch_response,
    parse_verdict,
    render_expected_format,
    render_verdict,
)
from .prompting import (
    Caption,
    ImageCaptionPair,
    PromptSet,
    SystemPromptSpec,
    VlmRequest,
    assemble_request,
    encode_image_payload,
    render_system_prompt,
)
from .runstate import AptRun

__version__ = "0.1.0"
