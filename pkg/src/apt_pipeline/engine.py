"""The active prompt tuning state machine.

Round loop: query the model on the active set with the current prompt set
as few-shot context, gate verdicts on correctness against prompt-cohort
ground truth, route correct ones to expert review, promote verified pairs,
stop at the round cap. Incorrectly classified images are never offered for
caption review; they simply stay active for the next round.

All transitions mutate state in place and are serialized by a single
owner. Correctness is computed only here, and only for prompt-cohort
animals: the truth mapping handed in never contains test-cohort entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone

from .dataset import COHORT_PROMPT, DatasetManifest, ImageRecord
from .errors import (
    GatewayFailure,
    GatewayError,
    IncorrectItemPromotion,
    NoSuchPending,
    NotFinalized,
    OverlapError,
    PendingReviewsExist,
    RoundCapReached,
    StateError,
    UnverifiedInitialCaption,
)
from .parsing import ModelVerdict, parse_batch_response
from .prompting import (
    Caption,
    ImageCaptionPair,
    PROVENANCE_CORRECTED,
    PROVENANCE_EXPERT,
    PROVENANCE_MODEL,
    PromptSet,
    assemble_request,
)

DECISION_ACCEPT = "accept"
DECISION_EDIT = "edit"
DECISION_REJECT = "reject"
DECISIONS = (DECISION_ACCEPT, DECISION_EDIT, DECISION_REJECT)

STATUS_PENDING = "pending"
STATUS_ACCEPTED = "accepted"
STATUS_EDITED = "edited"
STATUS_REJECTED = "rejected"


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class ReviewItem:
    image: ImageRecord
    proposed: ModelVerdict
    ground_truth: str
    correct: bool
    round: int
    status: str = STATUS_PENDING


@dataclass(frozen=True)
class HistoryEvent:
    kind: str
    at: str
    data: dict


@dataclass
class ExcludedImage:
    image: ImageRecord
    reason: str


@dataclass
class AptState:
    prompt_set: PromptSet
    active: list[ImageRecord]
    round: int
    round_cap: int
    pending: list[ReviewItem] = field(default_factory=list)
    round_rejected: list[ReviewItem] = field(default_factory=list)
    excluded: list[ExcludedImage] = field(default_factory=list)
    history: list[HistoryEvent] = field(default_factory=list)
    finalized: bool = False

    def log(self, kind: str, **data) -> None:
        self.history.append(HistoryEvent(kind, _now_iso(), data))

    def active_ids(self) -> list[str]:
        return [img.image_id for img in self.active]

    def pending_item(self, image_id: str) -> ReviewItem | None:
        for item in self.pending:
            if item.image.image_id == image_id and item.status == STATUS_PENDING:
                return item
        return None


def prompt_truth_map(manifest: DatasetManifest) -> dict[str, str]:
    """Ground truth restricted to the prompt cohort; test labels stay out."""
    return {
        a.animal_id: a.ground_truth for a in manifest.animals if a.cohort == COHORT_PROMPT
    }


def init_apt(
    initial: list[ImageCaptionPair], active: list[ImageRecord], round_cap: int = 5
) -> AptState:
    """Start a run: expert-authored verified pairs plus a disjoint active set."""
    if not initial:
        raise ValueError("initial prompt set must be non-empty")
    if round_cap < 1:
        raise ValueError("round_cap must be >= 1")
    for pair in initial:
        if not pair.verified or pair.caption.provenance != PROVENANCE_EXPERT:
            raise UnverifiedInitialCaption(
                f"initial caption for {pair.image.image_id!r} must be expert-authored "
                "and verified"
            )
    initial_ids = {p.image.image_id for p in initial}
    active_ids = [img.image_id for img in active]
    if len(set(active_ids)) != len(active_ids):
        raise ValueError("active set contains duplicate image ids")
    overlap = initial_ids & set(active_ids)
    if overlap:
        raise OverlapError(f"images in both initial and active sets: {sorted(overlap)}")
    prompt_set = PromptSet()
    for pair in initial:
        prompt_set.add(pair)
    state = AptState(prompt_set=prompt_set, active=list(active), round=0, round_cap=round_cap)
    state.log("initialized", initial=len(initial), active=len(active), round_cap=round_cap)
    return state


def _chunks(items: list, size: int) -> list[list]:
    return [items[i : i + size] for i in range(0, len(items), size)]


def run_round(
    state: AptState,
    gateway,
    system_text: str,
    truth: dict[str, str],
    classes,
    batch_size: int | None = None,
) -> None:
    """Query the model over the whole active set and populate pending reviews.

    Correct verdicts become pending ReviewItems; incorrect or unparsable
    ones are auto-rejected and stay active. On any gateway-level failure
    the state is left unchanged apart from a history entry.
    """
    if state.finalized:
        raise StateError("run is finalized")
    if state.round >= state.round_cap:
        raise RoundCapReached(f"round cap {state.round_cap} reached")
    if state.pending:
        raise PendingReviewsExist(f"{len(state.pending)} reviews still pending")
    if not state.active:
        raise StateError("active set is empty; finalize instead")

    round_no = state.round + 1
    batches = _chunks(state.active, batch_size or len(state.active))
    requests = [
        assemble_request(system_text, state.prompt_set, batch, f"tune-r{round_no}-b{i}")
        for i, batch in enumerate(batches)
    ]
    entries = gateway.dispatch_batch(requests)
    failure = next((e for e in entries if isinstance(e, GatewayError)), None)
    if failure is not None:
        state.log("gateway_failure", round=round_no, error=str(failure))
        raise GatewayFailure(f"round {round_no} dispatch failed: {failure}", cause=failure)

    outcomes: dict[str, ModelVerdict | None] = {}
    parse_notes: dict[str, str] = {}
    for batch, response in zip(batches, entries):
        parsed = parse_batch_response(response.raw_text, [i.image_id for i in batch], classes)
        for image_id, result in parsed.results.items():
            if isinstance(result, ModelVerdict):
                outcomes[image_id] = result
            else:
                outcomes[image_id] = None
                parse_notes[image_id] = f"{result.kind}: {result.detail}"

    state.round = round_no
    state.round_rejected = []
    state.log("round_started", round=round_no, active=len(state.active))
    for image in state.active:
        verdict = outcomes.get(image.image_id)
        if verdict is None:
            state.log(
                "verdict_failed",
                round=round_no,
                image_id=image.image_id,
                detail=parse_notes.get(image.image_id, "missing"),
            )
            continue
        correct = verdict.label == truth[image.animal_id]
        item = ReviewItem(image, verdict, truth[image.animal_id], correct, round_no)
        state.log(
            "verdict_produced",
            round=round_no,
            image_id=image.image_id,
            predicted=verdict.label,
            correct=correct,
        )
        if correct:
            state.pending.append(item)
        else:
            item.status = STATUS_REJECTED
            state.round_rejected.append(item)
            state.log("auto_rejected", round=round_no, image_id=image.image_id)


def _promote(state: AptState, item_image: ImageRecord, caption: Caption) -> None:
    pair = ImageCaptionPair(item_image, caption, verified=True)
    state.prompt_set.add(pair)
    state.active = [img for img in state.active if img.image_id != item_image.image_id]
    state.log(
        "pair_promoted",
        image_id=item_image.image_id,
        provenance=caption.provenance,
        prompt_set_version=state.prompt_set.version,
    )


def apply_review(
    state: AptState,
    image_id: str,
    decision: str,
    explanation: str | None = None,
    nonce: str | None = None,
) -> None:
    """Apply one expert decision to a pending review item.

    accept promotes the model's caption; edit promotes expert text as a
    correction; reject keeps the image active for the next round.
    """
    if decision not in DECISIONS:
        raise ValueError(f"unknown decision {decision!r}")
    item = state.pending_item(image_id)
    if item is None:
        if any(r.image.image_id == image_id for r in state.round_rejected):
            raise IncorrectItemPromotion(
                f"image {image_id!r} was classified incorrectly this round and "
                "cannot be reviewed"
            )
        raise NoSuchPending(f"no pending review for image {image_id!r}")

    if decision == DECISION_REJECT:
        item.status = STATUS_REJECTED
    elif decision == DECISION_ACCEPT:
        caption = Caption(item.proposed.label, item.proposed.explanation, PROVENANCE_MODEL)
        _promote(state, item.image, caption)
        item.status = STATUS_ACCEPTED
    else:
        if not explanation or not explanation.strip():
            raise ValueError("edit decision requires replacement explanation text")
        caption = Caption(item.ground_truth, explanation.strip(), PROVENANCE_CORRECTED)
        _promote(state, item.image, caption)
        item.status = STATUS_EDITED
    state.pending.remove(item)
    state.log(
        "review_decided",
        image_id=image_id,
        decision=decision,
        round=item.round,
        nonce=nonce or "",
    )


def _residual_phase(state: AptState) -> None:
    if state.finalized:
        raise StateError("run is finalized")
    if state.pending:
        raise PendingReviewsExist(f"{len(state.pending)} reviews still pending")
    if state.round < state.round_cap:
        raise StateError("residual handling starts once the round cap is reached")


def caption_residual(
    state: AptState, image_id: str, explanation: str, truth: dict[str, str]
) -> None:
    """Manually caption an image the model never classified correctly."""
    _residual_phase(state)
    image = next((img for img in state.active if img.image_id == image_id), None)
    if image is None:
        raise NoSuchPending(f"image {image_id!r} is not in the active set")
    caption = Caption(truth[image.animal_id], explanation.strip(), PROVENANCE_EXPERT)
    state.log("residual_captioned", image_id=image_id)
    _promote(state, image, caption)


def exclude_residual(state: AptState, image_id: str, reason: str) -> None:
    """Explicitly drop a stuck image from the run, with a logged reason."""
    _residual_phase(state)
    image = next((img for img in state.active if img.image_id == image_id), None)
    if image is None:
        raise NoSuchPending(f"image {image_id!r} is not in the active set")
    state.active = [img for img in state.active if img.image_id != image_id]
    state.excluded.append(ExcludedImage(image, reason))
    state.log("residual_excluded", image_id=image_id, reason=reason)


def finalize_effective_set(state: AptState) -> tuple[PromptSet, list[ImageRecord]]:
    """Freeze the prompt set. Residual images (still active at the cap) are
    reported back for manual captioning or exclusion; both paths land in
    history. Idempotent once finalized."""
    if state.finalized:
        return state.prompt_set, list(state.active)
    if state.pending:
        raise PendingReviewsExist(f"{len(state.pending)} reviews still pending")
    if state.active and state.round < state.round_cap:
        raise StateError(
            f"active images remain and round {state.round} is below the cap "
            f"{state.round_cap}; run more rounds or reach the cap first"
        )
    residual = list(state.active)
    state.finalized = True
    state.log(
        "finalized",
        effective=len(state.prompt_set),
        residual=[img.image_id for img in residual],
        excluded=[e.image.image_id for e in state.excluded],
    )
    return state.prompt_set, residual


def require_finalized(state: AptState) -> PromptSet:
    if not state.finalized:
        raise NotFinalized("prompt set not finalized")
    return state.prompt_set
