"""End-to-end replay of the bundled demo study on a virtual clock.

Drives the full pipeline (select, tune with auto-accepted reviews, infer,
tally, report) against the ReplayProvider's reference predictions. Used by
the acceptance suite and the replay script; finishes in seconds because
all waiting happens on simulated time.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .aggregate import StudyReport, build_report, render_report, tally_predictions, write_report
from .clocks import VirtualClock
from .dataset import DatasetManifest, load_manifest, partition_prompt_subset, select_prompt_subset
from .demo import build_demo_dataset, demo_prompt_spec, expert_pairs_for, reference_label_map
from .engine import init_apt, require_finalized
from .gateway import GatewayTelemetry, RateLimitPolicy, ReplayProvider, VlmGateway
from .inference import plan_batches, run_inference
from .prompting import render_system_prompt, template_fingerprint
from .runstate import AptRun


@dataclass
class ReplayResult:
    manifest: DatasetManifest
    run: AptRun
    plan_batches: int
    effective_size: int
    results_path: Path
    report: StudyReport
    report_text: str
    telemetry: GatewayTelemetry


def run_replay(
    workdir: str | Path,
    batch_size: int = 10,
    seed: int = 42,
    capture_wire: bool = False,
    policy: RateLimitPolicy | None = None,
    method_minutes: float = 45,
    baseline_minutes: float = 1080,
) -> ReplayResult:
    workdir = Path(workdir)
    dataset_dir = workdir / "dataset"
    manifest_path = build_demo_dataset(dataset_dir)
    manifest = load_manifest(manifest_path)

    subset = select_prompt_subset(manifest, animals_per_class=3, images_per_animal=6, seed=seed)
    manifest = manifest.with_cohorts(subset.animal_ids())
    initial, active = partition_prompt_subset(subset, initial_fraction=0.5, seed=seed)
    pairs = expert_pairs_for(subset, [img.image_id for img in initial])

    clock = VirtualClock()
    telemetry = GatewayTelemetry(capture_wire=capture_wire)
    gateway = VlmGateway(
        ReplayProvider(reference_label_map(manifest)),
        policy=policy or RateLimitPolicy(),
        clock=clock,
        telemetry=telemetry,
        model_name="replay-vlm",
    )
    system_text = render_system_prompt(demo_prompt_spec(manifest))

    state = init_apt(pairs, active, round_cap=5)
    run = AptRun(
        "replay",
        state,
        manifest,
        gateway,
        system_text,
        seed=seed,
        template_fingerprint=template_fingerprint(),
        state_path=workdir / "run_state.json",
    )
    run.checkpoint()

    while True:
        status = run.advance()
        if status["finalized"]:
            break
        for item in run.pending_snapshot():
            run.submit_review(item["image_id"], "accept", nonce=f"replay-{item['image_id']}")

    effective = require_finalized(state)
    plan = plan_batches(manifest, batch_size)
    results_path = run_inference(
        plan, manifest, effective, system_text, gateway, workdir, run_id="replay"
    )
    tallies = tally_predictions(results_path, manifest)
    report = build_report(
        tallies,
        effective_set_size=len(effective),
        method_minutes=method_minutes,
        baseline_minutes=baseline_minutes,
    )
    write_report(report, workdir / "report.json")
    return ReplayResult(
        manifest=manifest,
        run=run,
        plan_batches=len(plan.batches),
        effective_size=len(effective),
        results_path=results_path,
        report=report,
        report_text=render_report(report, manifest.study.class_names),
        telemetry=telemetry,
    )
