"""Per-animal tallies, majority voting, accuracy and timing metrics.

Votes depend only on parsed counts: unparsed records never tip a vote.
Exact ties and all-unparsed animals come out Inconclusive, which scores
as incorrect rather than silently picking a class. Percentages round
half-up to match integer reporting.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .dataset import DatasetManifest
from .errors import EmptyReport, IncompleteResults, NonpositiveBaseline


class _Inconclusive:
    """Vote outcome when no class wins; compares unequal to every label."""

    def __repr__(self) -> str:
        return "Inconclusive"

    __str__ = __repr__


INCONCLUSIVE = _Inconclusive()


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


@dataclass
class AnimalTally:
    animal_id: str
    ground_truth: str
    counts: dict[str, int]
    unparsed: int = 0

    def total(self) -> int:
        return sum(self.counts.values()) + self.unparsed


def read_results(results_path: str | Path) -> tuple[dict, dict[str, dict]]:
    """Read a results file; returns (header, last record per image id)."""
    header: dict = {}
    records: dict[str, dict] = {}
    with Path(results_path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if record.get("kind") == "header":
                header = record
            elif record.get("kind") in ("verdict", "failure"):
                records[record["image_id"]] = record
    return header, records


def tally_predictions(
    results_path: str | Path, manifest: DatasetManifest
) -> list[AnimalTally]:
    """Fold the results file into per-animal counts.

    Raises IncompleteResults unless every test image has exactly one
    verdict or failure record.
    """
    _, records = read_results(results_path)
    test_images = manifest.test_images()
    missing = [img.image_id for img in test_images if img.image_id not in records]
    if missing:
        raise IncompleteResults(
            f"{len(missing)} test images have no result record "
            f"(first few: {missing[:5]})"
        )
    classes = manifest.study.class_names
    tallies: dict[str, AnimalTally] = {}
    for animal in sorted(manifest.test_animals(), key=lambda a: a.animal_id):
        tallies[animal.animal_id] = AnimalTally(
            animal.animal_id, animal.ground_truth, {c: 0 for c in classes}
        )
    for img in test_images:
        record = records[img.image_id]
        tally = tallies[img.animal_id]
        if record["kind"] == "verdict" and record.get("predicted") in tally.counts:
            tally.counts[record["predicted"]] += 1
        else:
            tally.unparsed += 1
    return list(tallies.values())


def majority_vote(tally: AnimalTally):
    """Argmax over parsed counts; exact tie or nothing parsed is Inconclusive."""
    best = max(tally.counts.values(), default=0)
    if best == 0:
        return INCONCLUSIVE
    winners = [label for label, count in tally.counts.items() if count == best]
    if len(winners) != 1:
        return INCONCLUSIVE
    return winners[0]


@dataclass(frozen=True)
class AccuracySummary:
    correct: int
    total: int
    accuracy_percent: int


def compute_accuracy(tallies: list[AnimalTally]) -> AccuracySummary:
    if not tallies:
        raise EmptyReport("no tallies to score")
    correct = sum(1 for t in tallies if majority_vote(t) == t.ground_truth)
    total = len(tallies)
    return AccuracySummary(correct, total, _round_half_up(Fraction(100 * correct, total)))


def compute_time_improvement(baseline_minutes, method_minutes) -> int:
    """Percent reduction in annotation time, rounded half-up to an integer."""
    baseline = Fraction(str(baseline_minutes))
    method = Fraction(str(method_minutes))
    if baseline <= 0:
        raise NonpositiveBaseline(f"baseline minutes must be > 0, got {baseline_minutes}")
    if method < 0:
        raise ValueError("method minutes must be >= 0")
    return _round_half_up((baseline - method) / baseline * 100)


def prompt_fraction_percent(effective_count: int, test_count: int) -> float:
    """Share of all images that needed detailed ground truth, one decimal."""
    total = effective_count + test_count
    if total <= 0:
        raise EmptyReport("no images to compute a prompt fraction over")
    return round(100 * effective_count / total, 1)


@dataclass(frozen=True)
class TimingComparison:
    method_minutes: float
    baseline_minutes: float
    improvement_percent: int


@dataclass
class StudyReport:
    tallies: list[AnimalTally]
    votes: dict[str, object]
    correct_count: int
    total_animals: int
    accuracy_percent: int
    effective_set_size: int
    test_image_count: int
    prompt_fraction_percent: float
    timing: TimingComparison | None = None


def build_report(
    tallies: list[AnimalTally],
    effective_set_size: int,
    method_minutes: float | None = None,
    baseline_minutes: float | None = None,
) -> StudyReport:
    if not tallies:
        raise EmptyReport("no tallies")
    votes = {t.animal_id: majority_vote(t) for t in tallies}
    accuracy = compute_accuracy(tallies)
    test_image_count = sum(t.total() for t in tallies)
    timing = None
    if method_minutes is not None and baseline_minutes is not None:
        timing = TimingComparison(
            method_minutes,
            baseline_minutes,
            compute_time_improvement(baseline_minutes, method_minutes),
        )
    return StudyReport(
        tallies=tallies,
        votes=votes,
        correct_count=accuracy.correct,
        total_animals=accuracy.total,
        accuracy_percent=accuracy.accuracy_percent,
        effective_set_size=effective_set_size,
        test_image_count=test_image_count,
        prompt_fraction_percent=prompt_fraction_percent(effective_set_size, test_image_count),
        timing=timing,
    )


def render_report(report: StudyReport, class_order: tuple[str, ...] | None = None) -> str:
    """Fixed-column text table: one row per animal, then summary lines."""
    if not report.tallies:
        raise EmptyReport("nothing to render")
    classes = class_order or tuple(report.tallies[0].counts.keys())
    counts_header = "Predictions (" + "/".join(classes) + ")"
    rows = []
    for tally in report.tallies:
        counts = "/".join(str(tally.counts[c]) for c in classes)
        rows.append(
            (tally.animal_id, tally.ground_truth, counts, str(report.votes[tally.animal_id]))
        )
    headers = ("Animal", "Ground truth", counts_header, "Predicted")
    widths = [
        max(len(headers[i]), *(len(r[i]) for r in rows)) for i in range(len(headers))
    ]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
    lines.append("")
    lines.append(
        f"Animals correct: {report.correct_count}/{report.total_animals} "
        f"(accuracy {report.accuracy_percent}%)"
    )
    total = report.effective_set_size + report.test_image_count
    lines.append(
        f"Prompt set: {report.effective_set_size} images of {total} total "
        f"({report.prompt_fraction_percent}%)"
    )
    if report.timing is not None:
        t = report.timing
        lines.append(
            f"Annotation time: {t.method_minutes:g} min vs baseline "
            f"{t.baseline_minutes:g} min (improvement {t.improvement_percent}%)"
        )
    return "\n".join(lines)


def report_to_doc(report: StudyReport) -> dict:
    doc = {
        "tallies": [
            {
                "animal_id": t.animal_id,
                "ground_truth": t.ground_truth,
                "counts": dict(t.counts),
                "unparsed": t.unparsed,
                "predicted": None
                if report.votes[t.animal_id] is INCONCLUSIVE
                else report.votes[t.animal_id],
            }
            for t in report.tallies
        ],
        "accuracy": {
            "correct": report.correct_count,
            "total": report.total_animals,
            "percent": report.accuracy_percent,
        },
        "effective_set_size": report.effective_set_size,
        "test_image_count": report.test_image_count,
        "prompt_fraction_percent": report.prompt_fraction_percent,
    }
    if report.timing is not None:
        doc["timing"] = {
            "method_minutes": report.timing.method_minutes,
            "baseline_minutes": report.timing.baseline_minutes,
            "improvement_percent": report.timing.improvement_percent,
        }
    return doc


def write_report(report: StudyReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report_to_doc(report), indent=1), encoding="utf-8")
