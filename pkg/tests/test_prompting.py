from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apt_pipeline.dataset import StudyConfig
from apt_pipeline.errors import (
    CaptionError,
    EmptyBatch,
    EmptyField,
    OverlapError,
    UnreadableFile,
    UnsupportedFormat,
)
from apt_pipeline.parsing import parse_verdict
from apt_pipeline.prompting import (
    Caption,
    ImageCaptionPair,
    PROVENANCE_EXPERT,
    PromptSet,
    SystemPromptSpec,
    assemble_request,
    build_prompt_spec,
    count_sentences,
    encode_image_payload,
    render_system_prompt,
    template_fingerprint,
)

from conftest import PNG_BYTES, mem_manifest


@pytest.mark.parametrize(
    "text,expected",
    [
        ("One sentence.", 1),
        ("One. Two.", 2),
        ("One. Two. Three.", 3),
        ("One! Two? Three... Four.", 4),
        ("No terminal punctuation", 1),
        ("Trailing fragment. And more", 2),
        ("", 0),
        ("   ", 0),
    ],
)
def test_count_sentences(text, expected):
    assert count_sentences(text) == expected


def test_caption_sentence_rule():
    Caption("Lurcher", "Fine.", PROVENANCE_EXPERT)
    Caption("Lurcher", "One. Two. Three.", PROVENANCE_EXPERT)
    with pytest.raises(CaptionError):
        Caption("Lurcher", "", PROVENANCE_EXPERT)
    with pytest.raises(CaptionError):
        Caption("Lurcher", "One. Two. Three. Four.", PROVENANCE_EXPERT)
    with pytest.raises(CaptionError):
        Caption("Lurcher", "Fine.", "divine_inspiration")


def _pair(image, label="Lurcher"):
    return ImageCaptionPair(
        image, Caption(label, "Clear cell loss.", PROVENANCE_EXPERT), verified=True
    )


class TestPromptSet:
    def test_version_strictly_increases(self, small_manifest):
        images = small_manifest.images_for("a1")
        prompt_set = PromptSet()
        versions = [prompt_set.version]
        for image in images:
            prompt_set.add(_pair(image))
            versions.append(prompt_set.version)
        assert versions == sorted(set(versions))
        assert len(prompt_set) == len(images)

    def test_rejects_unverified(self, small_manifest):
        image = small_manifest.images_for("a1")[0]
        pair = ImageCaptionPair(
            image, Caption("Lurcher", "Fine.", PROVENANCE_EXPERT), verified=False
        )
        with pytest.raises(ValueError):
            PromptSet().add(pair)

    def test_rejects_duplicates(self, small_manifest):
        image = small_manifest.images_for("a1")[0]
        prompt_set = PromptSet()
        prompt_set.add(_pair(image))
        with pytest.raises(OverlapError):
            prompt_set.add(_pair(image))


def _spec():
    study = StudyConfig(("Lurcher", "Wild"), "10x", "cresyl violet", "cerebellum")
    return build_prompt_spec(study)


class TestRenderSystemPrompt:
    def test_contains_class_names_and_sections_in_order(self):
        text = render_system_prompt(_spec())
        assert "Lurcher" in text and "Wild" in text
        role_at = text.find("Role-play")
        context_at = text.find("Magnification")
        criteria_at = text.find("Class criteria")
        format_at = text.find("CLASSIFICATION:")
        assert -1 < role_at < context_at < criteria_at < format_at

    def test_deterministic(self):
        assert render_system_prompt(_spec()) == render_system_prompt(_spec())

    def test_empty_field_named(self):
        spec = _spec()
        broken = SystemPromptSpec(
            role_text=spec.role_text,
            magnification=spec.magnification,
            stain=spec.stain,
            anatomy=spec.anatomy,
            class_criteria=spec.class_criteria,
            format_instruction="",
        )
        with pytest.raises(EmptyField, match="format_instruction"):
            render_system_prompt(broken)

    def test_format_instruction_round_trips_through_parser(self):
        spec = _spec()
        text = render_system_prompt(spec)
        # the embedded example block must parse under the real grammar
        start = text.index("IMAGE: sample_001")
        verdict = parse_verdict(text[start:].split("\n\n")[0], ("Lurcher", "Wild"))
        assert verdict.image_id == "sample_001"

    def test_fingerprint_tracks_template_edits(self):
        assert template_fingerprint("a") != template_fingerprint("b")


class TestAssembleRequest:
    def test_order_is_system_pairs_queries(self, small_manifest):
        prompt_images = list(small_manifest.images_for("a1"))
        batch = list(small_manifest.images_for("b1"))
        prompt_set = PromptSet()
        for image in prompt_images:
            prompt_set.add(_pair(image))
        request = assemble_request("SYSTEM", prompt_set, batch, "r1")
        expected = [i.image_id for i in prompt_images] + [i.image_id for i in batch]
        assert request.ordered_image_ids() == expected
        assert request.system == "SYSTEM"
        assert request.query_ids() == [i.image_id for i in batch]

    def test_overlap_rejected(self, small_manifest):
        images = list(small_manifest.images_for("a1"))
        prompt_set = PromptSet()
        prompt_set.add(_pair(images[0]))
        with pytest.raises(OverlapError):
            assemble_request("S", prompt_set, [images[0]], "r1")

    def test_empty_batch_rejected(self, small_manifest):
        with pytest.raises(EmptyBatch):
            assemble_request("S", PromptSet(), [], "r1")

    def test_zero_shot_request(self, small_manifest):
        batch = [small_manifest.images_for("b1")[0]]
        request = assemble_request("S", PromptSet(), batch, "r1")
        assert request.context_pairs == ()
        assert len(request.queries) == 1

    def test_pair_text_carries_caption_grammar(self, small_manifest):
        image = small_manifest.images_for("a1")[0]
        prompt_set = PromptSet()
        prompt_set.add(_pair(image))
        batch = [small_manifest.images_for("b1")[0]]
        request = assemble_request("S", prompt_set, batch, "r1")
        _, caption_text = request.context_pairs[0]
        verdict = parse_verdict(caption_text, ("Lurcher", "Wild"))
        assert verdict.image_id == image.image_id
        assert verdict.label == "Lurcher"

    @settings(max_examples=50, deadline=None)
    @given(n_pairs=st.integers(0, 4), n_batch=st.integers(1, 4))
    def test_order_preserving_property(self, n_pairs, n_batch):
        manifest = mem_manifest(
            {"p": ("Lurcher", 4, "prompt"), "q": ("Wild", 4, "test")}
        )
        prompt_images = list(manifest.images_for("p"))[:n_pairs]
        batch = list(manifest.images_for("q"))[:n_batch]
        prompt_set = PromptSet()
        for image in prompt_images:
            prompt_set.add(_pair(image))
        request = assemble_request("S", prompt_set, batch, "r")
        assert request.ordered_image_ids() == [i.image_id for i in prompt_images] + [
            i.image_id for i in batch
        ]


class TestEncodeImagePayload:
    def test_png_round_trip(self, tmp_path, small_manifest):
        from apt_pipeline.dataset import ImageRecord

        path = tmp_path / "img.png"
        path.write_bytes(PNG_BYTES)
        record = ImageRecord("x", "a", "img.png", path=path)
        payload = encode_image_payload(record)
        assert payload.media_type == "image/png"
        assert payload.decode() == PNG_BYTES

    def test_large_jpeg_round_trip(self, tmp_path):
        import numpy as np
        from PIL import Image

        from apt_pipeline.dataset import ImageRecord

        path = tmp_path / "big.jpg"
        noise = np.random.default_rng(3).integers(0, 255, (2600, 2600, 3), dtype=np.uint8)
        Image.fromarray(noise).save(path, format="JPEG", quality=97)
        data = path.read_bytes()
        assert len(data) > 2_000_000
        record = ImageRecord("x", "a", "big.jpg", path=path)
        payload = encode_image_payload(record)
        assert payload.media_type == "image/jpeg"
        # byte-equality oracle on the fixture file
        assert payload.decode() == data

    def test_unsupported_format(self, tmp_path):
        from apt_pipeline.dataset import ImageRecord

        path = tmp_path / "img.tiff"
        path.write_bytes(b"II*\x00not really a tiff but not png/jpeg either")
        record = ImageRecord("x", "a", "img.tiff", path=path)
        with pytest.raises(UnsupportedFormat):
            encode_image_payload(record)

    def test_unreadable_file(self, tmp_path):
        from apt_pipeline.dataset import ImageRecord

        record = ImageRecord("x", "a", "gone.png", path=tmp_path / "gone.png")
        with pytest.raises(UnreadableFile):
            encode_image_payload(record)
