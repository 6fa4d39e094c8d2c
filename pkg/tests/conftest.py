from __future__ import annotations

import json
from pathlib import Path

import pytest

from apt_pipeline.dataset import AnimalRecord, DatasetManifest, ImageRecord, StudyConfig
from apt_pipeline.demo import _tiny_png

CLASSES = ("Lurcher", "Wild")

PNG_BYTES = _tiny_png((120, 100, 140))


def mem_manifest(spec: dict[str, tuple[str, int, str | None]]) -> DatasetManifest:
    """In-memory manifest; spec maps animal_id -> (label, n_images, cohort).

    No files are written: suitable for code paths that never read image
    bytes (request assembly with scripted providers, engine rounds).
    """
    animals = []
    images = []
    for animal_id, (label, n_images, cohort) in spec.items():
        animals.append(AnimalRecord(animal_id, label, cohort))
        for i in range(1, n_images + 1):
            image_id = f"{animal_id}_s{i:03d}"
            images.append(
                ImageRecord(
                    image_id=image_id,
                    animal_id=animal_id,
                    file_path=f"images/{image_id}.png",
                    path=Path(f"/nonexistent/images/{image_id}.png"),
                )
            )
    study = StudyConfig(CLASSES, "10x", "cresyl violet", "cerebellum sections")
    return DatasetManifest(study, tuple(animals), tuple(images), Path("/nonexistent"))


def write_dataset(root: Path, spec: dict[str, tuple[str, int, str | None]]) -> Path:
    """On-disk manifest plus tiny PNG files; returns the manifest path."""
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = [
        json.dumps(
            {
                "kind": "study_config",
                "class_names": list(CLASSES),
                "magnification": "10x",
                "stain": "cresyl violet",
                "anatomy": "cerebellum sections",
            }
        )
    ]
    for animal_id, (label, n_images, cohort) in spec.items():
        record = {"kind": "animal", "animal_id": animal_id, "ground_truth": label}
        if cohort:
            record["cohort"] = cohort
        lines.append(json.dumps(record))
        for i in range(1, n_images + 1):
            image_id = f"{animal_id}_s{i:03d}"
            rel = f"images/{image_id}.png"
            (root / rel).write_bytes(PNG_BYTES)
            lines.append(
                json.dumps(
                    {
                        "kind": "image",
                        "image_id": image_id,
                        "animal_id": animal_id,
                        "file_path": rel,
                    }
                )
            )
    path = root / "manifest.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def study_shape_spec() -> dict[str, tuple[str, int, str | None]]:
    """18 animals, 9 per class, no cohort marks, 6 images each."""
    spec: dict[str, tuple[str, int, str | None]] = {}
    for i in range(9):
        spec[f"L{i:02d}"] = ("Lurcher", 6, None)
        spec[f"W{i:02d}"] = ("Wild", 6, None)
    return spec


@pytest.fixture
def small_manifest() -> DatasetManifest:
    return mem_manifest(
        {
            "a1": ("Lurcher", 4, "prompt"),
            "a2": ("Wild", 4, "prompt"),
            "b1": ("Lurcher", 3, "test"),
            "b2": ("Wild", 3, "test"),
        }
    )
