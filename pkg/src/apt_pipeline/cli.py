"""Operator entry point: validate, select, tune, review-serve, infer, report.

Exit codes: 0 success, 2 validation problem, 3 state-order violation,
4 provider failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .aggregate import build_report, render_report, tally_predictions, write_report
from .config import RunConfig, load_config, snapshot_config
from .dataset import (
    COHORT_PROMPT,
    COHORT_TEST,
    DatasetManifest,
    load_manifest,
    partition_prompt_subset,
    select_prompt_subset,
)
from .engine import init_apt, prompt_truth_map, require_finalized
from .errors import (
    CaptionError,
    DegeneratePartition,
    EmptyReport,
    EmptyTestCohort,
    GatewayError,
    GatewayFailure,
    IncompleteResults,
    InsufficientAnimals,
    InsufficientImages,
    IntegrityError,
    MissingFile,
    NonpositiveBaseline,
    PipelineError,
    SchemaError,
    StateError,
    UnverifiedInitialCaption,
)
from .gateway import VlmGateway
from .inference import CHECKPOINT_NAME, RESULTS_NAME, plan_batches, run_inference
from .prompting import (
    Caption,
    DEFAULT_TEMPLATE,
    ImageCaptionPair,
    PROVENANCE_EXPERT,
    build_prompt_spec,
    load_template,
    render_system_prompt,
    template_fingerprint,
)
from .runstate import AptRun, load_state_doc
from .service import create_app

logger = logging.getLogger("apt_pipeline")

_OVERRIDE_KEYS = (
    "manifest", "out_dir", "run_id", "seed", "animals_per_class", "images_per_animal",
    "initial_fraction", "round_cap", "batch_size", "provider_kind", "provider_endpoint",
    "provider_model", "replay_verdicts", "method_minutes", "baseline_minutes",
)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="declarative JSON config file")
    parser.add_argument("--manifest", help="dataset manifest path")
    parser.add_argument("--out-dir", dest="out_dir", help="run directory")
    parser.add_argument("--run-id", dest="run_id")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--animals-per-class", type=int, dest="animals_per_class")
    parser.add_argument("--images-per-animal", type=int, dest="images_per_animal")
    parser.add_argument("--initial-fraction", type=float, dest="initial_fraction")
    parser.add_argument("--round-cap", type=int, dest="round_cap")
    parser.add_argument("--batch-size", type=int, dest="batch_size")
    parser.add_argument("--provider-kind", dest="provider_kind", choices=["http", "replay"])
    parser.add_argument("--provider-endpoint", dest="provider_endpoint")
    parser.add_argument("--provider-model", dest="provider_model")
    parser.add_argument("--replay-verdicts", dest="replay_verdicts")
    parser.add_argument("--method-minutes", type=float, dest="method_minutes")
    parser.add_argument("--baseline-minutes", type=float, dest="baseline_minutes")


def _config(args: argparse.Namespace) -> RunConfig:
    overrides = {key: getattr(args, key, None) for key in _OVERRIDE_KEYS}
    return load_config(args.config, overrides)


def _system_text(config: RunConfig, manifest: DatasetManifest) -> str:
    spec = build_prompt_spec(
        manifest.study, class_criteria=config.class_criteria, role_text=config.role_text
    )
    template = (
        load_template(config.template_path) if config.template_path else DEFAULT_TEMPLATE
    )
    return render_system_prompt(spec, template)


def _gateway(config: RunConfig) -> VlmGateway:
    return VlmGateway(
        config.build_provider(), policy=config.policy(), model_name=config.provider_model
    )


def _marked_manifest(config: RunConfig) -> tuple[DatasetManifest, dict]:
    manifest = load_manifest(config.manifest)
    selection_path = config.out_path() / "selection.json"
    if not selection_path.is_file():
        raise MissingFile(f"no selection at {selection_path}; run `select` first")
    selection = json.loads(selection_path.read_text(encoding="utf-8"))
    return manifest.with_cohorts(selection["prompt_animals"]), selection


def cmd_validate(args: argparse.Namespace) -> int:
    config = _config(args)
    if not config.manifest:
        raise SchemaError("validate requires --manifest or a config with one")
    manifest = load_manifest(config.manifest)
    first, second = manifest.study.class_names
    per_class = {
        c: sum(1 for a in manifest.animals if a.ground_truth == c) for c in (first, second)
    }
    n_prompt = sum(1 for a in manifest.animals if a.cohort == COHORT_PROMPT)
    n_test = sum(1 for a in manifest.animals if a.cohort == COHORT_TEST)
    print(
        f"{per_class[first]} {first} / {per_class[second]} {second}, "
        f"{n_prompt} prompt / {n_test} test"
    )
    print(f"{len(manifest.animals)} animals, {len(manifest.images)} images, manifest OK")
    return 0


def cmd_select(args: argparse.Namespace) -> int:
    config = _config(args)
    config.validate()
    out = config.out_path()
    selection_path = out / "selection.json"
    if selection_path.exists() and not args.force:
        print(f"selection already exists at {selection_path} (use --force to redo)")
        return 0
    manifest = load_manifest(config.manifest)
    subset = select_prompt_subset(
        manifest, config.animals_per_class, config.images_per_animal, config.seed
    )
    initial, active = partition_prompt_subset(subset, config.initial_fraction, config.seed)
    marked = manifest.with_cohorts(subset.animal_ids())
    selection = {
        "seed": config.seed,
        "animals_per_class": config.animals_per_class,
        "images_per_animal": config.images_per_animal,
        "initial_fraction": config.initial_fraction,
        "prompt_animals": subset.animal_ids(),
        "initial": [img.image_id for img in initial],
        "active": [img.image_id for img in active],
    }
    out.mkdir(parents=True, exist_ok=True)
    selection_path.write_text(json.dumps(selection, indent=1), encoding="utf-8")
    snapshot_config(config, out)
    n_test = sum(1 for a in marked.animals if a.cohort == COHORT_TEST)
    print(
        f"selected {len(subset.animal_ids())} prompt animals "
        f"({len(initial)} initial + {len(active)} active images); {n_test} test animals"
    )
    print(f"selection written to {selection_path}")
    return 0


def _initial_pairs(manifest, selection, captions_path: Path) -> list[ImageCaptionPair]:
    if not captions_path.is_file():
        raise MissingFile(f"captions file not found: {captions_path}")
    truth = prompt_truth_map(manifest)
    explanations: dict[str, str] = {}
    with captions_path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if "image_id" not in record or "explanation" not in record:
                raise SchemaError("caption record needs image_id and explanation", lineno)
            explanations[record["image_id"]] = record["explanation"]
    missing = [i for i in selection["initial"] if i not in explanations]
    if missing:
        raise SchemaError(f"captions missing for initial images: {missing[:10]}")
    pairs = []
    for image_id in selection["initial"]:
        image = manifest.image(image_id)
        pairs.append(
            ImageCaptionPair(
                image,
                Caption(truth[image.animal_id], explanations[image_id], PROVENANCE_EXPERT),
                verified=True,
            )
        )
    return pairs


def cmd_tune(args: argparse.Namespace) -> int:
    config = _config(args)
    config.validate()
    out = config.out_path()
    state_path = out / "run_state.json"
    manifest, selection = _marked_manifest(config)
    gateway = _gateway(config)
    system_text = _system_text(config, manifest)

    if state_path.exists():
        run = AptRun.resume(state_path, manifest, gateway, system_text, config.round_batch_size)
    else:
        captions = Path(args.captions or out / "captions.jsonl")
        pairs = _initial_pairs(manifest, selection, captions)
        state = init_apt(
            pairs, [manifest.image(i) for i in selection["active"]], config.round_cap
        )
        run = AptRun(
            config.run_id,
            state,
            manifest,
            gateway,
            system_text,
            seed=config.seed,
            template_fingerprint=template_fingerprint(),
            state_path=state_path,
            round_batch_size=config.round_batch_size,
        )
        run.checkpoint()
        snapshot_config(config, out)

    if args.residual_captions:
        with Path(args.residual_captions).open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    record = json.loads(line)
                    run.caption_residual(record["image_id"], record["explanation"])
    if args.exclude_residuals:
        for record in json.loads(Path(args.exclude_residuals).read_text(encoding="utf-8")):
            run.exclude_residual(record["image_id"], record.get("reason", "excluded"))

    while True:
        state = run.state
        if state.finalized:
            residual = state.active_ids()
            print(f"finalized: effective prompt set of {len(state.prompt_set)} pairs")
            if residual:
                print(f"residual images (never promoted): {', '.join(residual)}")
            return 0
        if state.pending:
            print(
                f"round {state.round}/{state.round_cap}: {len(state.pending)} reviews pending"
            )
            print("start the review service: apt-pipeline review-serve --config <config>")
            return 0
        if not state.active:
            run.advance()
            continue
        if state.round >= state.round_cap:
            if args.finalize:
                run.finalize()
                continue
            print(
                f"round cap {state.round_cap} reached with "
                f"{len(state.active)} residual images: {', '.join(state.active_ids())}"
            )
            print(
                "caption them manually (--residual-captions FILE.jsonl with "
                '{"image_id", "explanation"} lines), exclude them '
                '(--exclude-residuals FILE.json with [{"image_id", "reason"}]), '
                "or pass --finalize to freeze the set as is"
            )
            return 0
        status = run.advance()
        print(
            f"round {status['round']} dispatched: {status['pending']} pending reviews, "
            f"{status['active_remaining']} images still active"
        )


def cmd_review_serve(args: argparse.Namespace) -> int:
    import uvicorn

    config = _config(args)
    config.validate()
    state_path = config.out_path() / "run_state.json"
    if not state_path.exists():
        raise StateError(f"no run state at {state_path}; run `tune` first")
    manifest, _ = _marked_manifest(config)
    gateway = _gateway(config)
    run = AptRun.resume(
        state_path, manifest, gateway, _system_text(config, manifest), config.round_batch_size
    )
    token = os.environ.get(config.review_token_env) or None
    app = create_app(run, manifest, token=token, static_dir=args.ui_dir)
    print(f"review service for run {run.run_id!r} at http://{args.host}:{args.port}/")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    config = _config(args)
    config.validate()
    out = config.out_path()
    state_path = out / "run_state.json"
    if not state_path.exists():
        raise StateError(f"no run state at {state_path}; run `tune` first")
    manifest, _ = _marked_manifest(config)
    gateway = _gateway(config)
    system_text = _system_text(config, manifest)
    run = AptRun.resume(state_path, manifest, gateway, system_text, config.round_batch_size)
    effective = require_finalized(run.state)
    if args.force:
        for name in (RESULTS_NAME, CHECKPOINT_NAME):
            (out / name).unlink(missing_ok=True)
    plan = plan_batches(manifest, config.batch_size)
    print(f"{plan.total_images} test images in {len(plan.batches)} batches")
    results = run_inference(
        plan, manifest, effective, system_text, gateway, out, config.run_id
    )
    print(f"results at {results}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    config = _config(args)
    config.validate()
    out = config.out_path()
    results_path = out / RESULTS_NAME
    if not results_path.is_file():
        raise MissingFile(f"no results at {results_path}; run `infer` first")
    if not (out / "run_state.json").is_file():
        raise StateError(f"no run state in {out}; run `tune` first")
    manifest, _ = _marked_manifest(config)
    state_doc = load_state_doc(out / "run_state.json")
    if not state_doc.get("finalized"):
        raise StateError("prompt set not finalized")
    tallies = tally_predictions(results_path, manifest)
    report = build_report(
        tallies,
        effective_set_size=len(state_doc["prompt_set"]["pairs"]),
        method_minutes=config.method_minutes,
        baseline_minutes=config.baseline_minutes,
    )
    write_report(report, out / "report.json")
    print(render_report(report, manifest.study.class_names))
    print(f"\nreport written to {out / 'report.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apt-pipeline",
        description="Expert-in-the-loop prompt tuning and batched VLM inference",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check manifest health")
    _add_common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("select", help="draw the prompt subset and initial/active split")
    _add_common(p)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("tune", help="drive tuning rounds until reviews pend or the cap")
    _add_common(p)
    p.add_argument("--captions", help="expert captions JSONL for the initial set")
    p.add_argument("--residual-captions", dest="residual_captions")
    p.add_argument("--exclude-residuals", dest="exclude_residuals")
    p.add_argument("--finalize", action="store_true", help="freeze the set at the round cap")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("review-serve", help="serve the expert review HTTP API")
    _add_common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--ui-dir", dest="ui_dir", help="static directory with the review UI build")
    p.set_defaults(func=cmd_review_serve)

    p = sub.add_parser("infer", help="run the effective prompt set over the test cohort")
    _add_common(p)
    p.add_argument("--force", action="store_true", help="discard results and start over")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("report", help="tally verdicts into the study report")
    _add_common(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (
        MissingFile, SchemaError, IntegrityError, InsufficientAnimals, InsufficientImages,
        DegeneratePartition, IncompleteResults, EmptyReport, EmptyTestCohort,
        NonpositiveBaseline, CaptionError, UnverifiedInitialCaption,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (GatewayFailure, GatewayError) as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return 4
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
