#!/usr/bin/env python3
"""Generate the bundled demo corpus plus everything a full dry run needs:
manifest, images, replay verdict map, expert captions, and a ready config.

Usage:
    python scripts/make_demo_dataset.py out/demo [--drawn]

--drawn renders distinguishable 64x64 images (slower); the default writes
tiny uniform PNGs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from apt_pipeline.dataset import load_manifest, partition_prompt_subset, select_prompt_subset
from apt_pipeline.demo import build_demo_dataset, demo_expert_caption, reference_label_map


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("root", type=Path, help="directory to create the demo under")
    parser.add_argument("--drawn", action="store_true", help="render distinguishable images")
    parser.add_argument("--seed", type=int, default=42)
    args = parser.parse_args()

    root = args.root
    manifest_path = build_demo_dataset(
        root / "dataset", image_mode="drawn" if args.drawn else "fast"
    )
    manifest = load_manifest(manifest_path)
    print(f"dataset: {len(manifest.animals)} animals, {len(manifest.images)} images")

    verdicts_path = root / "verdicts.json"
    verdicts_path.write_text(json.dumps(reference_label_map(manifest), indent=0))
    print(f"replay verdict map: {verdicts_path}")

    subset = select_prompt_subset(manifest, 3, 6, seed=args.seed)
    initial, _ = partition_prompt_subset(subset, 0.5, seed=args.seed)
    captions_path = root / "captions.jsonl"
    with captions_path.open("w", encoding="utf-8") as fh:
        for image in initial:
            label = subset.labels[image.animal_id]
            fh.write(
                json.dumps({"image_id": image.image_id, "explanation": demo_expert_caption(label)})
                + "\n"
            )
    print(f"expert captions for the initial set: {captions_path}")

    config_path = root / "config.json"
    config_path.write_text(
        json.dumps(
            {
                "manifest": str(manifest_path),
                "out_dir": str(root / "run"),
                "seed": args.seed,
                "provider_kind": "replay",
                "replay_verdicts": str(verdicts_path),
                # the replay provider is local, so the demo lifts the rate
                # limit; keep the defaults (3 per 60s) for real providers
                "max_requests_per_window": 100000,
                "window_s": 1.0,
                "method_minutes": 45,
                "baseline_minutes": 1080,
            },
            indent=1,
        )
    )
    print(f"config: {config_path}")
    print("\nnext steps:")
    print(f"  apt-pipeline validate --config {config_path}")
    print(f"  apt-pipeline select --config {config_path}")
    print(f"  apt-pipeline tune --config {config_path} --captions {captions_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
