"""Batched test-set inference with per-batch checkpoints and resume.

The results file is append-only line-delimited JSON: a header object, then
one verdict or failure record per image. A separate checkpoint file marks
completed batches, so an interrupted run never re-sends finished batches.
Nothing in this module touches ground truth; requests are built from image
records alone.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .dataset import DatasetManifest
from .errors import AuthError, EmptyTestCohort, GatewayError
from .parsing import ModelVerdict, ParseFailure, parse_batch_response
from .prompting import PromptSet, assemble_request

logger = logging.getLogger(__name__)

RESULTS_NAME = "results.jsonl"
CHECKPOINT_NAME = "checkpoint.jsonl"


@dataclass(frozen=True)
class BatchPlan:
    """Deterministic partition of the test images into ordered batches."""

    batches: tuple[tuple[str, ...], ...]
    batch_size: int
    total_images: int


def plan_batches(manifest: DatasetManifest, batch_size: int) -> BatchPlan:
    """Partition test-cohort image ids, sorted by (animal_id, image_id)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    images = manifest.test_images()
    if not images:
        raise EmptyTestCohort("no test-cohort images in manifest")
    ids = [img.image_id for img in images]
    batches = tuple(tuple(ids[i : i + batch_size]) for i in range(0, len(ids), batch_size))
    return BatchPlan(batches, batch_size, len(ids))


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _append_jsonl(path: Path, record: dict) -> None:
    with path.open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(record) + "\n")


def completed_batches(checkpoint_path: Path, run_id: str) -> set[int]:
    done: set[int] = set()
    if not checkpoint_path.exists():
        return done
    with checkpoint_path.open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if record.get("run_id") == run_id and record.get("status") == "done":
                done.add(int(record["batch_index"]))
    return done


def _chunks(items: list, size: int) -> list[list]:
    return [items[i : i + size] for i in range(0, len(items), size)]


def run_inference(
    plan: BatchPlan,
    manifest: DatasetManifest,
    effective_set: PromptSet,
    system_text: str,
    gateway,
    out_dir: str | Path,
    run_id: str,
    reask: bool = True,
) -> Path:
    """Run every planned batch; each test image ends with exactly one record.

    A per-image parse failure gets one automatic re-ask as a fresh
    single-image request; a second failure is recorded as data. Aborts
    only on AuthError (or operator interrupt); everything else becomes
    per-image failure records.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results_path = out_dir / RESULTS_NAME
    checkpoint_path = out_dir / CHECKPOINT_NAME
    classes = manifest.study.class_names

    if not results_path.exists():
        _append_jsonl(
            results_path,
            {
                "kind": "header",
                "run_id": run_id,
                "prompt_set_version": effective_set.version,
                "model_name": getattr(gateway, "model_name", ""),
                "created_at": _now_iso(),
            },
        )

    done = completed_batches(checkpoint_path, run_id)
    todo = [i for i in range(len(plan.batches)) if i not in done]
    if done:
        logger.info("resuming run %s: %d/%d batches done", run_id, len(done), len(plan.batches))

    failures = 0
    completed = len(done)
    group_size = max(1, gateway.policy.max_concurrent)
    for group in _chunks(todo, group_size):
        requests = [
            assemble_request(
                system_text,
                effective_set,
                [manifest.image(image_id) for image_id in plan.batches[index]],
                f"{run_id}-b{index:04d}",
            )
            for index in group
        ]
        entries = gateway.dispatch_batch(requests)
        for index, entry in zip(group, entries):
            if isinstance(entry, AuthError):
                raise entry
            records = _fold_batch(
                index, plan.batches[index], entry, manifest, effective_set,
                system_text, gateway, classes, run_id, reask,
            )
            for record in records:
                _append_jsonl(results_path, record)
            failures += sum(1 for r in records if r["kind"] == "failure")
            _append_jsonl(
                checkpoint_path,
                {"run_id": run_id, "batch_index": index, "status": "done", "at": _now_iso()},
            )
            completed += 1
        logger.info(
            "run %s: %d/%d batches done, %d failures so far",
            run_id, completed, len(plan.batches), failures,
        )
    return results_path


def _record(kind: str, image_id: str, animal_id: str, batch_index: int, **extra) -> dict:
    record = {
        "kind": kind,
        "image_id": image_id,
        "animal_id": animal_id,
        "round_or_batch": batch_index,
        "timestamp": _now_iso(),
    }
    record.update(extra)
    return record


def _fold_batch(
    batch_index: int,
    image_ids: tuple[str, ...],
    entry,
    manifest: DatasetManifest,
    effective_set: PromptSet,
    system_text: str,
    gateway,
    classes,
    run_id: str,
    reask: bool,
) -> list[dict]:
    animal_of = {image_id: manifest.image(image_id).animal_id for image_id in image_ids}
    if isinstance(entry, GatewayError):
        return [
            _record(
                "failure", image_id, animal_of[image_id], batch_index,
                error=type(entry).__name__, detail=str(entry), reasked=False,
            )
            for image_id in image_ids
        ]

    parsed = parse_batch_response(entry.raw_text, list(image_ids), classes)
    for warning in parsed.warnings:
        logger.warning("batch %d: %s", batch_index, warning)
    records: list[dict] = []
    for image_id in image_ids:
        outcome = parsed.results[image_id]
        reasked = False
        if not isinstance(outcome, ModelVerdict) and reask:
            outcome = _reask(
                image_id, batch_index, manifest, effective_set, system_text,
                gateway, classes, run_id,
            )
            reasked = True
        if isinstance(outcome, ModelVerdict):
            records.append(
                _record(
                    "verdict", image_id, animal_of[image_id], batch_index,
                    predicted=outcome.label, explanation=outcome.explanation,
                    reasked=reasked,
                )
            )
        else:
            records.append(
                _record(
                    "failure", image_id, animal_of[image_id], batch_index,
                    error=outcome.kind, detail=outcome.detail, reasked=reasked,
                )
            )
    return records


def _reask(
    image_id: str,
    batch_index: int,
    manifest: DatasetManifest,
    effective_set: PromptSet,
    system_text: str,
    gateway,
    classes,
    run_id: str,
):
    """One fresh single-image request for an image whose block failed to parse."""
    request = assemble_request(
        system_text,
        effective_set,
        [manifest.image(image_id)],
        f"{run_id}-b{batch_index:04d}-reask-{image_id}",
    )
    try:
        response = gateway.dispatch(request)
    except AuthError:
        raise
    except GatewayError as exc:
        return ParseFailure(image_id, f"gateway:{type(exc).__name__}", str(exc))
    return parse_batch_response(response.raw_text, [image_id], classes).results[image_id]
