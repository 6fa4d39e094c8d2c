from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apt_pipeline.dataset import (
    StudyConfig,
    load_manifest,
    partition_prompt_subset,
    select_prompt_subset,
)
from apt_pipeline.errors import (
    DegeneratePartition,
    InsufficientAnimals,
    InsufficientImages,
    IntegrityError,
    MissingFile,
    SchemaError,
)

from conftest import mem_manifest, study_shape_spec, write_dataset


def test_study_config_rejects_bad_classes():
    with pytest.raises(ValueError):
        StudyConfig(("Lurcher",))
    with pytest.raises(ValueError):
        StudyConfig(("Lurcher", "lurcher"))
    with pytest.raises(ValueError):
        StudyConfig(("Lurcher", ""))


def test_normalize_label_case_insensitive():
    study = StudyConfig(("Lurcher", "Wild"))
    assert study.normalize_label("  lurcher ") == "Lurcher"
    assert study.normalize_label("WILD") == "Wild"
    with pytest.raises(ValueError):
        study.normalize_label("Mutant")


class TestLoadManifest:
    def test_loads_full_study_shape(self, tmp_path):
        spec = study_shape_spec()
        path = write_dataset(tmp_path, spec)
        manifest = load_manifest(path)
        assert len(manifest.animals) == 18
        assert sum(1 for a in manifest.animals if a.ground_truth == "Lurcher") == 9
        assert len(manifest.images) == 18 * 6

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFile):
            load_manifest(tmp_path / "nope.jsonl")

    def test_empty_animals_is_integrity_error(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(
            json.dumps({"kind": "study_config", "class_names": ["Lurcher", "Wild"]}) + "\n"
        )
        with pytest.raises(IntegrityError):
            load_manifest(path)

    def test_dangling_animal_reference_names_it(self, tmp_path):
        path = write_dataset(tmp_path, {"a1": ("Lurcher", 1, None), "a2": ("Wild", 1, None)})
        with path.open("a") as fh:
            fh.write(
                json.dumps(
                    {
                        "kind": "image",
                        "image_id": "ghost",
                        "animal_id": "X9",
                        "file_path": "images/a1_s001.png",
                    }
                )
                + "\n"
            )
        with pytest.raises(IntegrityError, match="X9"):
            load_manifest(path)

    def test_duplicate_image_id(self, tmp_path):
        path = write_dataset(tmp_path, {"a1": ("Lurcher", 1, None), "a2": ("Wild", 1, None)})
        line = json.dumps(
            {
                "kind": "image",
                "image_id": "a1_s001",
                "animal_id": "a1",
                "file_path": "images/a1_s001.png",
            }
        )
        with path.open("a") as fh:
            fh.write(line + "\n")
        with pytest.raises(IntegrityError, match="duplicate"):
            load_manifest(path)

    def test_schema_error_carries_line_number(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(
            json.dumps({"kind": "study_config", "class_names": ["Lurcher", "Wild"]})
            + "\n{broken\n"
        )
        with pytest.raises(SchemaError) as exc_info:
            load_manifest(path)
        assert exc_info.value.line == 2

    def test_missing_image_file_is_integrity_error(self, tmp_path):
        path = write_dataset(tmp_path, {"a1": ("Lurcher", 2, None), "a2": ("Wild", 1, None)})
        (tmp_path / "images" / "a1_s002.png").unlink()
        with pytest.raises(IntegrityError, match="a1_s002"):
            load_manifest(path)
        # tolerated when file checks are off
        manifest = load_manifest(path, check_files=False)
        assert len(manifest.images) == 3

    def test_header_must_come_first(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(
            json.dumps({"kind": "animal", "animal_id": "a", "ground_truth": "Lurcher"}) + "\n"
        )
        with pytest.raises(SchemaError, match="study_config"):
            load_manifest(path)


class TestSelectPromptSubset:
    def test_study_shape_selection(self):
        manifest = mem_manifest(study_shape_spec())
        subset = select_prompt_subset(manifest, 3, 6, seed=42)
        assert len(subset.animal_ids()) == 6
        assert len(subset.all_images()) == 36
        labels = [subset.labels[a] for a in subset.animal_ids()]
        assert labels.count("Lurcher") == 3 and labels.count("Wild") == 3

    def test_deterministic_for_seed(self):
        manifest = mem_manifest(study_shape_spec())
        first = select_prompt_subset(manifest, 3, 6, seed=7)
        second = select_prompt_subset(manifest, 3, 6, seed=7)
        assert [i.image_id for i in first.all_images()] == [
            i.image_id for i in second.all_images()
        ]
        different = select_prompt_subset(manifest, 3, 6, seed=8)
        assert [i.image_id for i in first.all_images()] != [
            i.image_id for i in different.all_images()
        ]

    def test_insufficient_animals(self):
        manifest = mem_manifest(study_shape_spec())
        with pytest.raises(InsufficientAnimals):
            select_prompt_subset(manifest, 10, 6, seed=1)

    def test_insufficient_images_names_animal(self):
        spec = study_shape_spec()
        spec["L00"] = ("Lurcher", 2, None)
        manifest = mem_manifest(spec)
        with pytest.raises(InsufficientImages, match="L00"):
            select_prompt_subset(manifest, 9, 6, seed=1)

    def test_respects_marked_prompt_pool(self):
        spec = study_shape_spec()
        marked = {"L00", "L01", "L02", "W00", "W01", "W02"}
        spec = {
            a: (label, n, "prompt" if a in marked else "test")
            for a, (label, n, _) in spec.items()
        }
        manifest = mem_manifest(spec)
        subset = select_prompt_subset(manifest, 3, 6, seed=999)
        assert set(subset.animal_ids()) == marked

    def test_cohort_assignment_total(self):
        manifest = mem_manifest(study_shape_spec())
        subset = select_prompt_subset(manifest, 3, 6, seed=5)
        marked = manifest.with_cohorts(subset.animal_ids())
        cohorts = {a.cohort for a in marked.animals}
        assert cohorts == {"prompt", "test"}
        assert len(marked.prompt_animals()) == 6
        assert len(marked.test_animals()) == 12


class TestPartition:
    def test_half_split_of_36(self):
        manifest = mem_manifest(study_shape_spec())
        subset = select_prompt_subset(manifest, 3, 6, seed=42)
        initial, active = partition_prompt_subset(subset, 0.5, seed=7)
        # set-equality oracle: |I| + |A| = |S| and I, A disjoint
        initial_ids = {i.image_id for i in initial}
        active_ids = {i.image_id for i in active}
        all_ids = {i.image_id for i in subset.all_images()}
        assert len(initial) == 18 and len(active) == 18
        assert initial_ids | active_ids == all_ids
        assert initial_ids & active_ids == set()

    def test_extreme_fraction_keeps_one_active(self):
        manifest = mem_manifest(study_shape_spec())
        subset = select_prompt_subset(manifest, 3, 6, seed=42)
        initial, active = partition_prompt_subset(subset, 0.99, seed=7)
        assert len(initial) == 35 and len(active) == 1

    def test_single_class_subset_degenerate(self):
        manifest = mem_manifest(study_shape_spec())
        subset = select_prompt_subset(manifest, 3, 6, seed=42)
        one_class = type(subset)(
            subset.study,
            {a: imgs for a, imgs in subset.by_animal.items() if subset.labels[a] == "Wild"},
            {a: l for a, l in subset.labels.items() if l == "Wild"},
            subset.seed,
        )
        with pytest.raises(DegeneratePartition):
            partition_prompt_subset(one_class, 0.5, seed=7)

    def test_each_class_covered_in_initial(self):
        manifest = mem_manifest(study_shape_spec())
        subset = select_prompt_subset(manifest, 3, 6, seed=42)
        initial, _ = partition_prompt_subset(subset, 0.1, seed=3)
        initial_labels = {subset.labels[i.animal_id] for i in initial}
        assert initial_labels == {"Lurcher", "Wild"}

    @settings(max_examples=60, deadline=None)
    @given(
        n_lurcher=st.integers(1, 4),
        n_wild=st.integers(1, 4),
        images=st.integers(2, 5),
        fraction=st.floats(0.05, 0.95),
        seed=st.integers(0, 10_000),
    )
    def test_partition_property(self, n_lurcher, n_wild, images, fraction, seed):
        spec = {f"L{i}": ("Lurcher", images, None) for i in range(n_lurcher)}
        spec.update({f"W{i}": ("Wild", images, None) for i in range(n_wild)})
        manifest = mem_manifest(spec)
        subset = select_prompt_subset(
            manifest, min(n_lurcher, n_wild), images, seed=seed
        )
        try:
            initial, active = partition_prompt_subset(subset, fraction, seed)
        except DegeneratePartition:
            n = len(subset.all_images())
            assert max(1, min(n - 1, int(fraction * n))) < 2
            return
        initial_ids = {i.image_id for i in initial}
        active_ids = {i.image_id for i in active}
        assert initial_ids | active_ids == {i.image_id for i in subset.all_images()}
        assert not initial_ids & active_ids
        assert initial and active
        assert {subset.labels[i.animal_id] for i in initial} == {"Lurcher", "Wild"}
