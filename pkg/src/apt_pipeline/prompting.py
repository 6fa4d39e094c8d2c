"""System-prompt rendering, prompt-set bookkeeping, and request assembly.

Everything here is pure and thread-safe except PromptSet, whose mutations
are serialized by its single owner (the tuning engine). Nothing in this
module can see ground-truth types: requests are built from ImageRecords
and verified captions only.
"""

from __future__ import annotations

import base64
import hashlib
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

from .dataset import ImageRecord
from .errors import (
    CaptionError,
    EmptyBatch,
    EmptyField,
    OverlapError,
    UnreadableFile,
    UnsupportedFormat,
)
from .parsing import ModelVerdict, render_expected_format, render_verdict

PROVENANCE_EXPERT = "expert_authored"
PROVENANCE_MODEL = "model_generated"
PROVENANCE_CORRECTED = "expert_corrected"
PROVENANCES = (PROVENANCE_EXPERT, PROVENANCE_MODEL, PROVENANCE_CORRECTED)

_SENTENCE_END = re.compile(r"[.!?]+(?=\s|$)")


def count_sentences(text: str) -> int:
    """Count sentences by terminal punctuation runs; a trailing fragment counts."""
    stripped = text.strip()
    if not stripped:
        return 0
    terminals = list(_SENTENCE_END.finditer(stripped))
    count = len(terminals)
    if not terminals or terminals[-1].end() < len(stripped):
        count += 1
    return count


@dataclass(frozen=True)
class Caption:
    """Ground-truth label plus a short expert-facing explanation."""

    label: str
    explanation: str
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise CaptionError(f"unknown provenance {self.provenance!r}")
        n = count_sentences(self.explanation)
        if n == 0:
            raise CaptionError("explanation must not be empty")
        if n > 3:
            raise CaptionError(f"explanation has {n} sentences, the limit is 3")


@dataclass(frozen=True)
class ImageCaptionPair:
    image: ImageRecord
    caption: Caption
    verified: bool = False


class PromptSet:
    """Ordered, append-only set of verified image-caption pairs.

    The version increases by one on every mutation; duplicate image ids
    are rejected.
    """

    def __init__(self):
        self._pairs: list[ImageCaptionPair] = []
        self._ids: set[str] = set()
        self.version = 0

    def __len__(self) -> int:
        return len(self._pairs)

    def __iter__(self):
        return iter(self._pairs)

    @property
    def pairs(self) -> tuple[ImageCaptionPair, ...]:
        return tuple(self._pairs)

    def image_ids(self) -> set[str]:
        return set(self._ids)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._ids

    def add(self, pair: ImageCaptionPair) -> None:
        if not pair.verified:
            raise ValueError("only verified pairs may enter a prompt set")
        if pair.image.image_id in self._ids:
            raise OverlapError(f"image {pair.image.image_id!r} already in prompt set")
        self._pairs.append(pair)
        self._ids.add(pair.image.image_id)
        self.version += 1


@dataclass(frozen=True)
class SystemPromptSpec:
    """The four system-prompt ingredients: persona, dataset context,
    per-class criteria, and the output-format instruction."""

    role_text: str
    magnification: str
    stain: str
    anatomy: str
    class_criteria: dict[str, str]
    format_instruction: str


TEMPLATE_VERSION = "1"

DEFAULT_TEMPLATE = """\
{role}

Dataset context, applicable to every image:
- Magnification: {magnification}
- Staining: {stain}
- Anatomy: {anatomy}

Classify each queried image using the characteristics visible in the image. Class criteria:
{class_criteria}

{format_instruction}
"""

DEFAULT_ROLE_TEXT = (
    "Role-play as an expert in morphological analysis of stained tissue "
    "microscopy images. Apply the same criteria consistently to every image "
    "and answer with precision."
)


def template_fingerprint(template: str = DEFAULT_TEMPLATE) -> str:
    """Short content hash recorded in run state so template edits are visible."""
    digest = hashlib.sha256(template.encode("utf-8")).hexdigest()[:12]
    return f"{TEMPLATE_VERSION}-{digest}"


def load_template(path: str | Path) -> str:
    return Path(path).read_text(encoding="utf-8")


def build_prompt_spec(
    study,
    class_criteria: dict[str, str] | None = None,
    role_text: str | None = None,
    format_instruction: str | None = None,
) -> SystemPromptSpec:
    """Assemble a spec from a study header, filling generic criteria where
    none are configured."""
    criteria = {
        name: (class_criteria or {}).get(name, f"features characteristic of {name}")
        for name in study.class_names
    }
    return SystemPromptSpec(
        role_text=role_text or DEFAULT_ROLE_TEXT,
        magnification=study.magnification or "unspecified",
        stain=study.stain or "unspecified",
        anatomy=study.anatomy or "unspecified",
        class_criteria=criteria,
        format_instruction=format_instruction or render_expected_format(study.class_names),
    )


def render_system_prompt(spec: SystemPromptSpec, template: str = DEFAULT_TEMPLATE) -> str:
    """Render the system prompt; byte-identical output for identical specs."""
    for name in ("role_text", "magnification", "stain", "anatomy", "format_instruction"):
        if not str(getattr(spec, name)).strip():
            raise EmptyField(name)
    if not spec.class_criteria or any(not v.strip() for v in spec.class_criteria.values()):
        raise EmptyField("class_criteria")
    criteria = "\n".join(f"- {label}: {text}" for label, text in spec.class_criteria.items())
    return template.format(
        role=spec.role_text,
        magnification=spec.magnification,
        stain=spec.stain,
        anatomy=spec.anatomy,
        class_criteria=criteria,
        format_instruction=spec.format_instruction,
    )


@dataclass(frozen=True)
class ImagePayload:
    media_type: str
    data_b64: str

    def decode(self) -> bytes:
        return base64.b64decode(self.data_b64)


_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
_JPEG_MAGIC = b"\xff\xd8\xff"


def media_type_of(data: bytes) -> str:
    """Sniff PNG or JPEG from magic bytes; anything else is unsupported."""
    if data.startswith(_PNG_MAGIC):
        return "image/png"
    if data.startswith(_JPEG_MAGIC):
        return "image/jpeg"
    raise UnsupportedFormat("not a PNG or JPEG file")


@lru_cache(maxsize=4096)
def _encode_file(path_str: str, mtime_ns: int, size: int) -> ImagePayload:
    data = Path(path_str).read_bytes()
    try:
        media = media_type_of(data)
    except UnsupportedFormat:
        raise UnsupportedFormat(f"not a PNG or JPEG file: {path_str}") from None
    return ImagePayload(media, base64.b64encode(data).decode("ascii"))


def encode_image_payload(image: ImageRecord) -> ImagePayload:
    """Base64-encode an image file; the payload decodes byte-identically."""
    path = image.path if image.path is not None else Path(image.file_path)
    try:
        stat = path.stat()
    except OSError as exc:
        raise UnreadableFile(f"cannot read {path}: {exc}") from None
    return _encode_file(str(path), stat.st_mtime_ns, stat.st_size)


@dataclass(frozen=True)
class VlmRequest:
    """One provider request: system text, then in-context pairs, then queries.

    Image bytes are not materialized here; the wire adapter encodes them at
    send time.
    """

    system: str
    context_pairs: tuple[tuple[ImageRecord, str], ...]
    queries: tuple[ImageRecord, ...]
    request_id: str

    def ordered_image_ids(self) -> list[str]:
        return [img.image_id for img, _ in self.context_pairs] + [
            img.image_id for img in self.queries
        ]

    def query_ids(self) -> list[str]:
        return [img.image_id for img in self.queries]


def caption_message_text(pair: ImageCaptionPair) -> str:
    """Render a context pair's caption in the exact grammar the model must emit."""
    return render_verdict(
        ModelVerdict(pair.image.image_id, pair.caption.label, pair.caption.explanation)
    )


def query_message_text(image: ImageRecord) -> str:
    # The echoed id is how multi-image responses are matched back to images.
    return f"IMAGE: {image.image_id}"


def assemble_request(
    system: str,
    prompt_set: PromptSet,
    batch: list[ImageRecord],
    request_id: str,
) -> VlmRequest:
    """Build a request honoring the fixed order: system, pairs, queries."""
    if not batch:
        raise EmptyBatch("request batch is empty")
    overlap = [img.image_id for img in batch if img.image_id in prompt_set]
    if overlap:
        raise OverlapError(f"batch images already in prompt set: {overlap}")
    pairs = tuple((pair.image, caption_message_text(pair)) for pair in prompt_set)
    return VlmRequest(
        system=system,
        context_pairs=pairs,
        queries=tuple(batch),
        request_id=request_id,
    )
