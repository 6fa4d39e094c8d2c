"""Durable run state for the tuning loop.

The full state document (round, prompt set with provenance, active ids,
pending reviews, append-only history) is rewritten atomically after every
transition, so a crashed or abandoned session resumes exactly where it
stopped. AptRun is the single writer every mutation funnels through.
"""

from __future__ import annotations

import json
import threading
from pathlib import Path

from .dataset import DatasetManifest
from .engine import (
    AptState,
    ExcludedImage,
    HistoryEvent,
    ReviewItem,
    apply_review,
    caption_residual,
    exclude_residual,
    finalize_effective_set,
    prompt_truth_map,
    run_round,
)
from .errors import ConflictError, PendingReviewsExist, RoundCapReached, StateError
from .parsing import ModelVerdict
from .prompting import Caption, ImageCaptionPair, PromptSet

STATE_FORMAT_VERSION = 1


def state_to_doc(state: AptState, run_id: str, seed: int, template_fingerprint: str) -> dict:
    def item_doc(item: ReviewItem) -> dict:
        return {
            "image_id": item.image.image_id,
            "predicted": item.proposed.label,
            "explanation": item.proposed.explanation,
            "ground_truth": item.ground_truth,
            "correct": item.correct,
            "round": item.round,
            "status": item.status,
        }

    return {
        "format_version": STATE_FORMAT_VERSION,
        "run_id": run_id,
        "seed": seed,
        "template_fingerprint": template_fingerprint,
        "round": state.round,
        "round_cap": state.round_cap,
        "finalized": state.finalized,
        "prompt_set": {
            "version": state.prompt_set.version,
            "pairs": [
                {
                    "image_id": p.image.image_id,
                    "label": p.caption.label,
                    "explanation": p.caption.explanation,
                    "provenance": p.caption.provenance,
                }
                for p in state.prompt_set
            ],
        },
        "active": state.active_ids(),
        "pending": [item_doc(i) for i in state.pending],
        "round_rejected": [item_doc(i) for i in state.round_rejected],
        "excluded": [
            {"image_id": e.image.image_id, "reason": e.reason} for e in state.excluded
        ],
        "history": [{"kind": ev.kind, "at": ev.at, **ev.data} for ev in state.history],
    }


def state_from_doc(doc: dict, manifest: DatasetManifest) -> AptState:
    if doc.get("format_version") != STATE_FORMAT_VERSION:
        raise StateError(f"unsupported run-state format {doc.get('format_version')!r}")

    prompt_set = PromptSet()
    for p in doc["prompt_set"]["pairs"]:
        prompt_set.add(
            ImageCaptionPair(
                manifest.image(p["image_id"]),
                Caption(p["label"], p["explanation"], p["provenance"]),
                verified=True,
            )
        )
    prompt_set.version = doc["prompt_set"]["version"]

    def item_from(d: dict) -> ReviewItem:
        return ReviewItem(
            image=manifest.image(d["image_id"]),
            proposed=ModelVerdict(d["image_id"], d["predicted"], d["explanation"]),
            ground_truth=d["ground_truth"],
            correct=d["correct"],
            round=d["round"],
            status=d["status"],
        )

    history = [
        HistoryEvent(e["kind"], e["at"], {k: v for k, v in e.items() if k not in ("kind", "at")})
        for e in doc["history"]
    ]
    return AptState(
        prompt_set=prompt_set,
        active=[manifest.image(i) for i in doc["active"]],
        round=doc["round"],
        round_cap=doc["round_cap"],
        pending=[item_from(d) for d in doc["pending"]],
        round_rejected=[item_from(d) for d in doc.get("round_rejected", [])],
        excluded=[
            ExcludedImage(manifest.image(e["image_id"]), e["reason"])
            for e in doc.get("excluded", [])
        ],
        history=history,
        finalized=doc["finalized"],
    )


def save_state_doc(path: Path, doc: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1), encoding="utf-8")
    tmp.replace(path)


def load_state_doc(path: Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


class AptRun:
    """Single-writer owner of one tuning run.

    Serializes every transition behind a lock, checkpoints state after
    each one, and answers idempotent review submissions by nonce.
    """

    def __init__(
        self,
        run_id: str,
        state: AptState,
        manifest: DatasetManifest,
        gateway,
        system_text: str,
        seed: int = 0,
        template_fingerprint: str = "",
        state_path: Path | None = None,
        round_batch_size: int | None = None,
    ):
        self.run_id = run_id
        self.state = state
        self.manifest = manifest
        self.gateway = gateway
        self.system_text = system_text
        self.seed = seed
        self.template_fingerprint = template_fingerprint
        self.state_path = Path(state_path) if state_path else None
        self.round_batch_size = round_batch_size
        self._truth = prompt_truth_map(manifest)
        self._classes = manifest.study.class_names
        self._lock = threading.RLock()
        self._nonce_replies: dict[tuple[str, str], dict] = {}

    @classmethod
    def resume(
        cls,
        state_path: Path,
        manifest: DatasetManifest,
        gateway,
        system_text: str,
        round_batch_size: int | None = None,
    ) -> "AptRun":
        doc = load_state_doc(state_path)
        state = state_from_doc(doc, manifest)
        return cls(
            run_id=doc["run_id"],
            state=state,
            manifest=manifest,
            gateway=gateway,
            system_text=system_text,
            seed=doc.get("seed", 0),
            template_fingerprint=doc.get("template_fingerprint", ""),
            state_path=state_path,
            round_batch_size=round_batch_size,
        )

    def checkpoint(self) -> None:
        if self.state_path is not None:
            save_state_doc(
                self.state_path,
                state_to_doc(self.state, self.run_id, self.seed, self.template_fingerprint),
            )

    # -- read side --

    def pending_snapshot(self) -> list[dict]:
        with self._lock:
            return [
                {
                    "image_id": item.image.image_id,
                    "proposed_label": item.proposed.label,
                    "proposed_explanation": item.proposed.explanation,
                    "ground_truth_label": item.ground_truth,
                    "round": item.round,
                }
                for item in self.state.pending
            ]

    def status(self) -> dict:
        with self._lock:
            s = self.state
            total = len(s.prompt_set) + len(s.active) + len(s.excluded)
            out = {
                "run_id": self.run_id,
                "round": s.round,
                "round_cap": s.round_cap,
                "pending": len(s.pending),
                "active_remaining": len(s.active),
                "promoted": len(s.prompt_set),
                "prompt_set_version": s.prompt_set.version,
                "total_images": total,
                "excluded": len(s.excluded),
                "finalized": s.finalized,
            }
            if s.finalized:
                out["effective_size"] = len(s.prompt_set)
                out["residual"] = s.active_ids()
            return out

    def residual_ids(self) -> list[str]:
        with self._lock:
            return self.state.active_ids()

    def _summary(self, image_id: str, decision: str, replayed: bool) -> dict:
        s = self.state
        return {
            "image_id": image_id,
            "decision": decision,
            "remaining_pending": len(s.pending),
            "round_complete": not s.pending,
            "promoted": len(s.prompt_set),
            "replayed": replayed,
        }

    # -- transitions --

    def submit_review(
        self,
        image_id: str,
        decision: str,
        explanation: str | None = None,
        nonce: str | None = None,
    ) -> dict:
        with self._lock:
            if nonce:
                cached = self._nonce_replies.get((image_id, nonce))
                if cached is not None:
                    return dict(cached)
                for event in self.state.history:
                    if (
                        event.kind == "review_decided"
                        and event.data.get("image_id") == image_id
                        and event.data.get("nonce") == nonce
                    ):
                        return self._summary(image_id, decision, replayed=True)
            if self.state.pending_item(image_id) is None and any(
                ev.kind == "review_decided" and ev.data.get("image_id") == image_id
                for ev in self.state.history
            ):
                raise ConflictError(f"review for image {image_id!r} was already decided")
            apply_review(self.state, image_id, decision, explanation, nonce)
            self.checkpoint()
            summary = self._summary(image_id, decision, replayed=False)
            if nonce:
                self._nonce_replies[(image_id, nonce)] = dict(summary)
            return summary

    def advance(self) -> dict:
        """Run the next round, or finalize when the active set is empty."""
        with self._lock:
            s = self.state
            if s.finalized:
                return self.status()
            if s.pending:
                raise PendingReviewsExist(f"{len(s.pending)} reviews still pending")
            if not s.active:
                finalize_effective_set(s)
                self.checkpoint()
                return self.status()
            if s.round >= s.round_cap:
                raise RoundCapReached(
                    f"round cap {s.round_cap} reached with {len(s.active)} residual images"
                )
            try:
                run_round(
                    s,
                    self.gateway,
                    self.system_text,
                    self._truth,
                    self._classes,
                    self.round_batch_size,
                )
            finally:
                self.checkpoint()
            return self.status()

    def finalize(self) -> dict:
        with self._lock:
            finalize_effective_set(self.state)
            self.checkpoint()
            return self.status()

    def caption_residual(self, image_id: str, explanation: str) -> None:
        with self._lock:
            caption_residual(self.state, image_id, explanation, self._truth)
            self.checkpoint()

    def exclude_residual(self, image_id: str, reason: str) -> None:
        with self._lock:
            exclude_residual(self.state, image_id, reason)
            self.checkpoint()
