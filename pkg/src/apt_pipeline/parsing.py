"""Strict verdict grammar: parse model text into per-image verdicts.

One verdict block::

    IMAGE: <image_id>
    CLASSIFICATION: <class>
    EXPLANATION: <free text, may continue on following lines>

Keys are case-insensitive and whitespace-tolerant; class tokens match the
expected set case-insensitively; explanation text is captured verbatim.
This module never sees ground truth: it maps text to claims, nothing else.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import MalformedBlock, MissingField, UnknownClass

_IMAGE_RE = re.compile(r"^\s*image\s*:\s*(?P<id>.*)$", re.IGNORECASE)
_CLASS_RE = re.compile(r"^\s*classification\s*:\s*(?P<label>.*)$", re.IGNORECASE)
_EXPL_RE = re.compile(r"^\s*explanation\s*:\s*(?P<text>.*)$", re.IGNORECASE)

FAILURE_MISSING = "missing_verdict"
FAILURE_DUPLICATE = "duplicate"
FAILURE_UNKNOWN_CLASS = "unknown_class"
FAILURE_MISSING_FIELD = "missing_field"
FAILURE_MALFORMED = "malformed_block"


@dataclass(frozen=True)
class ModelVerdict:
    """A parsed per-image prediction: class label plus short explanation."""

    image_id: str
    label: str
    explanation: str


@dataclass(frozen=True)
class ParseFailure:
    image_id: str
    kind: str
    detail: str = ""


@dataclass
class BatchParse:
    """Total parse outcome: one entry per expected image id, plus warnings."""

    results: dict[str, ModelVerdict | ParseFailure]
    warnings: list[str] = field(default_factory=list)

    def verdicts(self) -> list[ModelVerdict]:
        return [r for r in self.results.values() if isinstance(r, ModelVerdict)]

    def failures(self) -> list[ParseFailure]:
        return [r for r in self.results.values() if isinstance(r, ParseFailure)]


def _match_class(token: str, expected_classes) -> str:
    folded = token.strip().casefold()
    for name in expected_classes:
        if name.casefold() == folded:
            return name
    raise UnknownClass(token.strip())


def render_verdict(verdict: ModelVerdict) -> str:
    return (
        f"IMAGE: {verdict.image_id}\n"
        f"CLASSIFICATION: {verdict.label}\n"
        f"EXPLANATION: {verdict.explanation}"
    )


def parse_verdict(block: str, expected_classes) -> ModelVerdict:
    """Parse a single verdict block.

    Raises MalformedBlock, MissingField, or UnknownClass.
    """
    expected_classes = list(expected_classes)
    if not expected_classes:
        raise ValueError("expected_classes must be non-empty")
    lines = block.strip("\n").split("\n")
    idx = 0
    while idx < len(lines) and not lines[idx].strip():
        idx += 1
    if idx >= len(lines):
        raise MalformedBlock("empty block")
    m = _IMAGE_RE.match(lines[idx])
    if not m:
        raise MalformedBlock(f"block does not start with an IMAGE line: {lines[idx]!r}")
    image_id = m.group("id").strip()
    if not image_id:
        raise MalformedBlock("IMAGE line has no id")
    idx += 1
    while idx < len(lines) and not lines[idx].strip():
        idx += 1
    if idx >= len(lines):
        raise MissingField("CLASSIFICATION")
    m = _CLASS_RE.match(lines[idx])
    if not m:
        raise MissingField("CLASSIFICATION")
    label = _match_class(m.group("label"), expected_classes)
    idx += 1
    while idx < len(lines) and not lines[idx].strip():
        idx += 1
    if idx >= len(lines):
        raise MissingField("EXPLANATION")
    m = _EXPL_RE.match(lines[idx])
    if not m:
        raise MissingField("EXPLANATION")
    rest = lines[idx + 1 :]
    explanation = "\n".join([m.group("text")] + rest).strip()
    if not explanation:
        raise MissingField("EXPLANATION")
    return ModelVerdict(image_id, label, explanation)


def split_blocks(raw: str) -> tuple[str, list[str]]:
    """Split raw text into (preamble, verdict blocks) at IMAGE lines."""
    blocks: list[str] = []
    preamble_lines: list[str] = []
    current: list[str] | None = None
    for line in raw.split("\n"):
        if _IMAGE_RE.match(line):
            if current is not None:
                blocks.append("\n".join(current))
            current = [line]
        elif current is not None:
            current.append(line)
        else:
            preamble_lines.append(line)
    if current is not None:
        blocks.append("\n".join(current))
    return "\n".join(preamble_lines).strip(), blocks


def parse_batch_response(raw: str, expected_ids, expected_classes) -> BatchParse:
    """Parse a multi-image response; total over expected_ids.

    Every expected id maps to exactly one ModelVerdict or ParseFailure.
    Unexpected blocks become warnings, never silent drops; a duplicated id
    yields a Duplicate failure for that id.
    """
    expected_ids = list(expected_ids)
    if not expected_ids:
        raise ValueError("expected_ids must be non-empty")
    expected_set = set(expected_ids)
    preamble, blocks = split_blocks(raw)
    warnings: list[str] = []
    if preamble:
        warnings.append(f"unparsed text before first verdict block: {preamble[:80]!r}")

    seen: dict[str, ModelVerdict | ParseFailure] = {}
    duplicated: set[str] = set()
    for block in blocks:
        block_id = _IMAGE_RE.match(block.split("\n", 1)[0]).group("id").strip()
        try:
            verdict = parse_verdict(block, expected_classes)
            outcome: ModelVerdict | ParseFailure = verdict
            block_id = verdict.image_id
        except UnknownClass as exc:
            outcome = ParseFailure(block_id, FAILURE_UNKNOWN_CLASS, str(exc))
        except MissingField as exc:
            outcome = ParseFailure(block_id, FAILURE_MISSING_FIELD, str(exc))
        except MalformedBlock as exc:
            outcome = ParseFailure(block_id, FAILURE_MALFORMED, str(exc))
        if not block_id:
            warnings.append("block with empty image id ignored")
            continue
        if block_id not in expected_set:
            warnings.append(f"verdict for unexpected image id {block_id!r}")
            continue
        if block_id in seen:
            duplicated.add(block_id)
            continue
        seen[block_id] = outcome
    for image_id in duplicated:
        seen[image_id] = ParseFailure(image_id, FAILURE_DUPLICATE, "multiple blocks for id")

    results: dict[str, ModelVerdict | ParseFailure] = {}
    for image_id in expected_ids:
        results[image_id] = seen.get(
            image_id, ParseFailure(image_id, FAILURE_MISSING, "no block in response")
        )
    return BatchParse(results, warnings)


def render_expected_format(expected_classes) -> str:
    """Produce the output-format instruction embedded in the system prompt.

    The embedded example parses under this module's own grammar, which is
    checked in tests (the instruction and the parser cannot drift apart).
    """
    expected_classes = list(expected_classes)
    if not expected_classes:
        raise ValueError("expected_classes must be non-empty")
    allowed = ", ".join(expected_classes)
    example = render_verdict(
        ModelVerdict(
            image_id="sample_001",
            label=expected_classes[0],
            explanation="One or two short sentences naming the decisive visual features.",
        )
    )
    return (
        "For every queried image, answer with exactly one block in this format, "
        "with one field per line and nothing else:\n\n"
        "IMAGE: <the image identifier given with the query>\n"
        f"CLASSIFICATION: <one of: {allowed}>\n"
        "EXPLANATION: <a brief explanation of 1 to 3 sentences>\n\n"
        "Example:\n"
        f"{example}"
    )
