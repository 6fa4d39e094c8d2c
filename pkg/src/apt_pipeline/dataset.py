"""Image corpus: manifest loading, validation, and prompt-cohort selection.

The manifest is a UTF-8 line-delimited file. The first record is a
``study_config`` header (class names, magnification, stain, anatomy);
every following line is an ``animal`` or ``image`` record tagged by its
``kind`` field. Image files are referenced by path relative to the
manifest's directory.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, replace
from pathlib import Path

from .errors import (
    DegeneratePartition,
    InsufficientAnimals,
    InsufficientImages,
    IntegrityError,
    MissingFile,
    SchemaError,
)

COHORT_PROMPT = "prompt"
COHORT_TEST = "test"


@dataclass(frozen=True)
class StudyConfig:
    """Study-level context shared by every image in the corpus."""

    class_names: tuple[str, str]
    magnification: str = ""
    stain: str = ""
    anatomy: str = ""

    def __post_init__(self):
        names = tuple(self.class_names)
        if len(names) != 2:
            raise ValueError("a study defines exactly two class names")
        if any(not n or not n.strip() for n in names):
            raise ValueError("class names must be non-empty")
        if names[0].casefold() == names[1].casefold():
            raise ValueError("class names must be distinct")
        object.__setattr__(self, "class_names", names)

    def normalize_label(self, text: str) -> str:
        """Map a label token to its canonical class name, case-insensitively."""
        token = text.strip().casefold()
        for name in self.class_names:
            if name.casefold() == token:
                return name
        raise ValueError(f"unknown class label {text!r}")


@dataclass(frozen=True)
class ImageRecord:
    """One microscopy image. Carries no ground truth."""

    image_id: str
    animal_id: str
    file_path: str
    magnification: str = ""
    stain: str = ""
    path: Path | None = None  # absolute location, resolved against the manifest root


@dataclass(frozen=True)
class AnimalRecord:
    animal_id: str
    ground_truth: str
    cohort: str | None = None  # "prompt" | "test" | None when unassigned


@dataclass(frozen=True)
class DatasetManifest:
    study: StudyConfig
    animals: tuple[AnimalRecord, ...]
    images: tuple[ImageRecord, ...]
    root: Path

    def __post_init__(self):
        object.__setattr__(self, "animals", tuple(self.animals))
        object.__setattr__(self, "images", tuple(self.images))
        by_animal: dict[str, AnimalRecord] = {}
        for a in self.animals:
            by_animal[a.animal_id] = a
        by_image: dict[str, ImageRecord] = {img.image_id: img for img in self.images}
        grouped: dict[str, list[ImageRecord]] = {}
        for img in self.images:
            grouped.setdefault(img.animal_id, []).append(img)
        for imgs in grouped.values():
            imgs.sort(key=lambda i: i.image_id)
        object.__setattr__(self, "_animals_by_id", by_animal)
        object.__setattr__(self, "_images_by_id", by_image)
        object.__setattr__(self, "_images_by_animal", grouped)

    # -- lookups --

    def animal(self, animal_id: str) -> AnimalRecord:
        try:
            return self._animals_by_id[animal_id]
        except KeyError:
            raise IntegrityError(f"unknown animal {animal_id!r}") from None

    def image(self, image_id: str) -> ImageRecord:
        try:
            return self._images_by_id[image_id]
        except KeyError:
            raise IntegrityError(f"unknown image {image_id!r}") from None

    def has_image(self, image_id: str) -> bool:
        return image_id in self._images_by_id

    def images_for(self, animal_id: str) -> tuple[ImageRecord, ...]:
        return tuple(self._images_by_animal.get(animal_id, ()))

    # -- cohort views --

    def prompt_pool(self) -> tuple[AnimalRecord, ...]:
        """Animals eligible for prompt selection.

        Animals explicitly marked cohort="prompt" form the pool when any
        exist; otherwise every animal is eligible.
        """
        marked = tuple(a for a in self.animals if a.cohort == COHORT_PROMPT)
        return marked if marked else self.animals

    def prompt_animals(self) -> tuple[AnimalRecord, ...]:
        return tuple(a for a in self.animals if a.cohort == COHORT_PROMPT)

    def test_animals(self) -> tuple[AnimalRecord, ...]:
        return tuple(a for a in self.animals if a.cohort == COHORT_TEST)

    def test_images(self) -> tuple[ImageRecord, ...]:
        """Test-cohort images in deterministic (animal_id, image_id) order."""
        out: list[ImageRecord] = []
        for a in sorted(self.test_animals(), key=lambda a: a.animal_id):
            out.extend(self._images_by_animal.get(a.animal_id, ()))
        return tuple(out)

    def with_cohorts(self, prompt_animal_ids) -> "DatasetManifest":
        """Return a manifest with the given animals marked prompt, all others test."""
        chosen = set(prompt_animal_ids)
        unknown = chosen - set(self._animals_by_id)
        if unknown:
            raise IntegrityError(f"unknown animals in cohort assignment: {sorted(unknown)}")
        animals = tuple(
            replace(a, cohort=COHORT_PROMPT if a.animal_id in chosen else COHORT_TEST)
            for a in self.animals
        )
        return DatasetManifest(self.study, animals, self.images, self.root)


def _require(record: dict, key: str, line: int) -> str:
    value = record.get(key)
    if not isinstance(value, str) or not value.strip():
        raise SchemaError(f"{record.get('kind', '?')} record missing field {key!r}", line)
    return value.strip()


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    """Load and fully validate a line-delimited manifest.

    Raises MissingFile, SchemaError (with a line locator), or
    IntegrityError (duplicate ids, dangling references, missing image
    files, animals without images).
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    root = path.parent

    study: StudyConfig | None = None
    animals: list[AnimalRecord] = []
    images: list[ImageRecord] = []

    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", lineno) from None
            if not isinstance(record, dict):
                raise SchemaError("record is not an object", lineno)
            kind = record.get("kind")
            if study is None:
                if kind != "study_config":
                    raise SchemaError("first record must be the study_config header", lineno)
                names = record.get("class_names")
                if not isinstance(names, list) or len(names) != 2:
                    raise SchemaError("study_config.class_names must list two classes", lineno)
                try:
                    study = StudyConfig(
                        class_names=tuple(str(n) for n in names),
                        magnification=str(record.get("magnification", "")),
                        stain=str(record.get("stain", "")),
                        anatomy=str(record.get("anatomy", "")),
                    )
                except ValueError as exc:
                    raise SchemaError(str(exc), lineno) from None
                continue
            if kind == "study_config":
                raise SchemaError("duplicate study_config header", lineno)
            if kind == "animal":
                label_text = _require(record, "ground_truth", lineno)
                try:
                    label = study.normalize_label(label_text)
                except ValueError as exc:
                    raise SchemaError(str(exc), lineno) from None
                cohort = record.get("cohort")
                if cohort is not None and cohort not in (COHORT_PROMPT, COHORT_TEST):
                    raise SchemaError(f"invalid cohort {cohort!r}", lineno)
                animals.append(
                    AnimalRecord(_require(record, "animal_id", lineno), label, cohort)
                )
            elif kind == "image":
                file_path = _require(record, "file_path", lineno)
                images.append(
                    ImageRecord(
                        image_id=_require(record, "image_id", lineno),
                        animal_id=_require(record, "animal_id", lineno),
                        file_path=file_path,
                        magnification=str(record.get("magnification", "")),
                        stain=str(record.get("stain", "")),
                        path=(root / file_path).resolve(),
                    )
                )
            else:
                raise SchemaError(f"unknown record kind {kind!r}", lineno)

    if study is None:
        raise SchemaError("manifest is empty", 0)
    _validate_integrity(animals, images, check_files)
    return DatasetManifest(study, tuple(animals), tuple(images), root)


def _validate_integrity(animals, images, check_files: bool) -> None:
    if not animals:
        raise IntegrityError("manifest contains no animals")
    seen_animals: set[str] = set()
    for a in animals:
        if a.animal_id in seen_animals:
            raise IntegrityError(f"duplicate animal_id {a.animal_id!r}")
        seen_animals.add(a.animal_id)
    seen_images: set[str] = set()
    referenced: set[str] = set()
    for img in images:
        if img.image_id in seen_images:
            raise IntegrityError(f"duplicate image_id {img.image_id!r}")
        seen_images.add(img.image_id)
        if img.animal_id not in seen_animals:
            raise IntegrityError(
                f"image {img.image_id!r} references unknown animal {img.animal_id!r}"
            )
        referenced.add(img.animal_id)
        if check_files and not (img.path and img.path.is_file()):
            raise IntegrityError(f"image file not readable: {img.file_path}")
    missing = seen_animals - referenced
    if missing:
        raise IntegrityError(f"animals without images: {sorted(missing)}")


@dataclass(frozen=True)
class PromptSubset:
    """Images drawn for prompt building, grouped by animal.

    ``labels`` maps each selected animal to its class; only prompt-cohort
    animals ever appear here.
    """

    study: StudyConfig
    by_animal: dict[str, tuple[ImageRecord, ...]]
    labels: dict[str, str]
    seed: int

    def animal_ids(self) -> list[str]:
        return list(self.by_animal)

    def all_images(self) -> list[ImageRecord]:
        return [img for imgs in self.by_animal.values() for img in imgs]


def select_prompt_subset(
    manifest: DatasetManifest,
    animals_per_class: int,
    images_per_animal: int,
    seed: int,
) -> PromptSubset:
    """Draw a stratified random prompt subset: per class, ``animals_per_class``
    animals and ``images_per_animal`` images from each.

    Deterministic for a fixed seed. Raises InsufficientAnimals or
    InsufficientImages (naming the offending animal).
    """
    if animals_per_class < 1 or images_per_animal < 1:
        raise ValueError("animals_per_class and images_per_animal must be >= 1")
    rng = random.Random(seed)
    pool = manifest.prompt_pool()
    by_animal: dict[str, tuple[ImageRecord, ...]] = {}
    labels: dict[str, str] = {}
    for class_name in manifest.study.class_names:
        candidates = sorted(
            (a for a in pool if a.ground_truth == class_name), key=lambda a: a.animal_id
        )
        if len(candidates) < animals_per_class:
            raise InsufficientAnimals(
                f"class {class_name!r} has {len(candidates)} eligible animals, "
                f"need {animals_per_class}"
            )
        chosen = sorted(rng.sample(candidates, animals_per_class), key=lambda a: a.animal_id)
        for animal in chosen:
            available = manifest.images_for(animal.animal_id)
            if len(available) < images_per_animal:
                raise InsufficientImages(
                    f"animal {animal.animal_id!r} has {len(available)} images, "
                    f"need {images_per_animal}"
                )
            drawn = sorted(rng.sample(available, images_per_animal), key=lambda i: i.image_id)
            by_animal[animal.animal_id] = tuple(drawn)
            labels[animal.animal_id] = animal.ground_truth
    return PromptSubset(manifest.study, by_animal, labels, seed)


def partition_prompt_subset(
    subset: PromptSubset, initial_fraction: float, seed: int
) -> tuple[list[ImageRecord], list[ImageRecord]]:
    """Split a prompt subset into (initial, active) image lists.

    The initial part holds floor(initial_fraction * n) images, clamped so
    both parts are non-empty, and always covers every study class.
    Deterministic for a fixed seed.
    """
    if not 0 < initial_fraction < 1:
        raise ValueError("initial_fraction must be strictly between 0 and 1")
    images = subset.all_images()
    n = len(images)
    if n == 0:
        raise DegeneratePartition("subset is empty")
    classes = subset.study.class_names
    by_class: dict[str, list[ImageRecord]] = {c: [] for c in classes}
    for img in images:
        by_class[subset.labels[img.animal_id]].append(img)
    for class_name, imgs in by_class.items():
        if not imgs:
            raise DegeneratePartition(f"class {class_name!r} has no images in the subset")
    k_total = max(1, min(n - 1, math.floor(initial_fraction * n)))
    if k_total < len(classes):
        raise DegeneratePartition(
            f"initial part of {k_total} cannot cover {len(classes)} classes"
        )

    quotas = {c: max(1, math.floor(initial_fraction * len(by_class[c]))) for c in classes}
    order = sorted(classes)
    while sum(quotas.values()) > k_total:
        c = max((c for c in order if quotas[c] > 1), key=lambda c: (quotas[c], c))
        quotas[c] -= 1
    while sum(quotas.values()) < k_total:
        c = min(
            (c for c in order if quotas[c] < len(by_class[c])), key=lambda c: (quotas[c], c)
        )
        quotas[c] += 1

    rng = random.Random(seed)
    initial: list[ImageRecord] = []
    active: list[ImageRecord] = []
    for class_name in order:
        imgs = sorted(by_class[class_name], key=lambda i: i.image_id)
        chosen = set(i.image_id for i in rng.sample(imgs, quotas[class_name]))
        initial.extend(i for i in imgs if i.image_id in chosen)
        active.extend(i for i in imgs if i.image_id not in chosen)
    return initial, active
