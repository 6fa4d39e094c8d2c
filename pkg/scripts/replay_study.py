#!/usr/bin/env python3
"""Run the bundled reference study end to end on a virtual clock and print
the report: selection, tuning with auto-accepted reviews, batched inference
over 1471 test images, majority voting, accuracy and timing.

Usage:
    python scripts/replay_study.py [workdir]
"""

from __future__ import annotations

import sys
import tempfile
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from apt_pipeline.replay import run_replay


def main() -> int:
    if len(sys.argv) > 1:
        workdir = Path(sys.argv[1])
        workdir.mkdir(parents=True, exist_ok=True)
        cleanup = None
    else:
        cleanup = tempfile.TemporaryDirectory()
        workdir = Path(cleanup.name)

    started = time.monotonic()
    result = run_replay(workdir)
    elapsed = time.monotonic() - started

    print(result.report_text)
    print(
        f"\n{result.plan_batches} inference batches, effective prompt set of "
        f"{result.effective_size}, wall time {elapsed:.1f}s (rate limits on virtual time)"
    )
    if cleanup is None:
        print(f"artifacts kept under {workdir}")
    else:
        cleanup.cleanup()
    return 0


if __name__ == "__main__":
    sys.exit(main())
