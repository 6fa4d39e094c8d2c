"""Bundled demo study: a synthetic cerebellum corpus and replay fixtures.

Generates a manifest plus tiny PNG images shaped like the real study this
tool was built for: 18 mice split into a 6-animal prompt cohort and a
12-animal test cohort of 1471 images. The per-animal reference predictions
drive a ReplayProvider so the whole pipeline can run end to end without a
live model.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

from .dataset import DatasetManifest, PromptSubset, load_manifest
from .parsing import render_expected_format
from .prompting import (
    DEFAULT_ROLE_TEXT,
    ImageCaptionPair,
    Caption,
    PROVENANCE_EXPERT,
    SystemPromptSpec,
)

CLASS_MUTANT = "Lurcher"
CLASS_CONTROL = "Wild"

# Prompt cohort: 3 animals per class, 6 images each.
DEMO_PROMPT_ANIMALS = {
    "5909": CLASS_MUTANT,
    "5911": CLASS_MUTANT,
    "6301": CLASS_MUTANT,
    "5960": CLASS_CONTROL,
    "6127": CLASS_CONTROL,
    "6340": CLASS_CONTROL,
}

# Test cohort: ground truth and image count per animal (1471 images total).
DEMO_TEST_ANIMALS = {
    "5917": (CLASS_MUTANT, 50),
    "6323": (CLASS_MUTANT, 45),
    "6350": (CLASS_MUTANT, 74),
    "6480": (CLASS_MUTANT, 50),
    "6481": (CLASS_MUTANT, 38),
    "6509": (CLASS_MUTANT, 61),
    "5973": (CLASS_CONTROL, 172),
    "6132": (CLASS_CONTROL, 202),
    "6134": (CLASS_CONTROL, 175),
    "6349": (CLASS_CONTROL, 256),
    "6353": (CLASS_CONTROL, 137),
    "6483": (CLASS_CONTROL, 211),
}

# Reference per-animal prediction splits (mutant/control) used by the
# replay provider; 6350 is deliberately a majority-wrong animal.
DEMO_REFERENCE_PREDICTIONS = {
    "5917": (48, 2),
    "6323": (39, 6),
    "6350": (24, 50),
    "6480": (50, 0),
    "6481": (38, 0),
    "6509": (61, 0),
    "5973": (1, 171),
    "6132": (0, 202),
    "6134": (4, 171),
    "6349": (5, 251),
    "6353": (2, 135),
    "6483": (16, 195),
}

DEMO_MAGNIFICATION = "10x"
DEMO_STAIN = "cresyl violet"
DEMO_ANATOMY = "2-D sections through mouse cerebellum"

DEMO_CLASS_CRITERIA = {
    CLASS_MUTANT: (
        "marked loss of Purkinje cells, thinning of the molecular layer, and "
        "overall cerebellar atrophy"
    ),
    CLASS_CONTROL: (
        "intact, regularly spaced Purkinje cell layer with well-defined "
        "molecular and granular layers"
    ),
}


def _tiny_png(rgb: tuple[int, int, int]) -> bytes:
    """A valid 4x4 single-color PNG without pulling in an image library."""

    def chunk(kind: bytes, payload: bytes) -> bytes:
        return (
            struct.pack(">I", len(payload))
            + kind
            + payload
            + struct.pack(">I", zlib.crc32(kind + payload) & 0xFFFFFFFF)
        )

    width = height = 4
    header = struct.pack(">IIBBBBB", width, height, 8, 2, 0, 0, 0)
    row = b"\x00" + bytes(rgb) * width
    body = zlib.compress(row * height)
    out = io.BytesIO()
    out.write(b"\x89PNG\r\n\x1a\n")
    out.write(chunk(b"IHDR", header))
    out.write(chunk(b"IDAT", body))
    out.write(chunk(b"IEND", b""))
    return out.getvalue()


def _drawn_png(label: str, index: int) -> bytes:
    """Distinguishable 64x64 images for interactive demos (needs Pillow)."""
    from PIL import Image, ImageDraw

    base = (150, 90, 160) if label == CLASS_MUTANT else (90, 130, 170)
    img = Image.new("RGB", (64, 64), base)
    draw = ImageDraw.Draw(img)
    step = 6 if label == CLASS_MUTANT else 10
    for y in range(4, 64, step):
        draw.line([(0, y), (63, (y + index) % 64)], fill=(235, 225, 240))
    draw.text((4, 24), label[:1], fill=(20, 20, 20))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def build_demo_dataset(
    root: str | Path,
    images_per_prompt_animal: int = 6,
    image_mode: str = "fast",
    mark_cohorts: bool = True,
) -> Path:
    """Write the demo corpus under ``root``; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    manifest_path = root / "manifest.jsonl"

    fast_bytes = {
        CLASS_MUTANT: _tiny_png((150, 90, 160)),
        CLASS_CONTROL: _tiny_png((90, 130, 170)),
    }

    def write_image(animal_id: str, label: str, index: int) -> str:
        rel = f"images/{animal_id}_s{index:03d}.png"
        if image_mode == "fast":
            data = fast_bytes[label]
        else:
            data = _drawn_png(label, index)
        (root / rel).write_bytes(data)
        return rel

    lines = [
        json.dumps(
            {
                "kind": "study_config",
                "class_names": [CLASS_MUTANT, CLASS_CONTROL],
                "magnification": DEMO_MAGNIFICATION,
                "stain": DEMO_STAIN,
                "anatomy": DEMO_ANATOMY,
            }
        )
    ]

    def animal_line(animal_id: str, label: str, cohort: str | None) -> str:
        record = {"kind": "animal", "animal_id": animal_id, "ground_truth": label}
        if cohort is not None:
            record["cohort"] = cohort
        return json.dumps(record)

    for animal_id, label in sorted(DEMO_PROMPT_ANIMALS.items()):
        lines.append(animal_line(animal_id, label, "prompt" if mark_cohorts else None))
        for index in range(1, images_per_prompt_animal + 1):
            rel = write_image(animal_id, label, index)
            lines.append(
                json.dumps(
                    {
                        "kind": "image",
                        "image_id": f"{animal_id}_s{index:03d}",
                        "animal_id": animal_id,
                        "file_path": rel,
                        "magnification": DEMO_MAGNIFICATION,
                        "stain": DEMO_STAIN,
                    }
                )
            )
    for animal_id, (label, count) in sorted(DEMO_TEST_ANIMALS.items()):
        lines.append(animal_line(animal_id, label, "test" if mark_cohorts else None))
        for index in range(1, count + 1):
            rel = write_image(animal_id, label, index)
            lines.append(
                json.dumps(
                    {
                        "kind": "image",
                        "image_id": f"{animal_id}_s{index:03d}",
                        "animal_id": animal_id,
                        "file_path": rel,
                        "magnification": DEMO_MAGNIFICATION,
                        "stain": DEMO_STAIN,
                    }
                )
            )

    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest_path


def demo_prompt_spec(manifest: DatasetManifest) -> SystemPromptSpec:
    """Default system-prompt spec assembled from the manifest's study header."""
    study = manifest.study
    criteria = {
        name: DEMO_CLASS_CRITERIA.get(name, f"features characteristic of {name}")
        for name in study.class_names
    }
    return SystemPromptSpec(
        role_text=DEFAULT_ROLE_TEXT,
        magnification=study.magnification or "unspecified",
        stain=study.stain or "unspecified",
        anatomy=study.anatomy or "unspecified",
        class_criteria=criteria,
        format_instruction=render_expected_format(study.class_names),
    )


def demo_expert_caption(label: str) -> str:
    if label == CLASS_MUTANT:
        return (
            "Severe Purkinje cell loss with a collapsed molecular layer. "
            "The cortical layering is visibly atrophic."
        )
    return (
        "Purkinje cells form a continuous, evenly spaced row. "
        "Molecular and granular layers show normal thickness."
    )


def expert_pairs_for(subset: PromptSubset, image_ids: list[str]) -> list[ImageCaptionPair]:
    """Expert-authored verified pairs for the given initial images."""
    wanted = set(image_ids)
    pairs = []
    for animal_id, images in subset.by_animal.items():
        label = subset.labels[animal_id]
        for image in images:
            if image.image_id in wanted:
                pairs.append(
                    ImageCaptionPair(
                        image,
                        Caption(label, demo_expert_caption(label), PROVENANCE_EXPERT),
                        verified=True,
                    )
                )
    return pairs


def reference_label_map(manifest: DatasetManifest) -> dict[str, str]:
    """image_id -> label map for the replay provider.

    Prompt-cohort images answer with their true class; test-cohort images
    follow the reference per-animal splits, assigned over sorted image ids.
    """
    labels: dict[str, str] = {}
    for animal in manifest.animals:
        images = manifest.images_for(animal.animal_id)
        if animal.animal_id in DEMO_TEST_ANIMALS:
            mutant_n, control_n = DEMO_REFERENCE_PREDICTIONS[animal.animal_id]
            if mutant_n + control_n != len(images):
                raise ValueError(
                    f"reference split for {animal.animal_id} does not match "
                    f"its image count"
                )
            for i, image in enumerate(images):
                labels[image.image_id] = CLASS_MUTANT if i < mutant_n else CLASS_CONTROL
        else:
            for image in images:
                labels[image.image_id] = animal.ground_truth
    return labels


def load_demo_manifest(root: str | Path) -> DatasetManifest:
    return load_manifest(Path(root) / "manifest.jsonl")
