"""Run configuration: one declarative JSON file plus flag overrides.

The effective config is snapshotted into the run directory so a finished
run records exactly what produced it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import MissingFile, SchemaError
from .gateway import HttpProvider, ProviderConfig, RateLimitPolicy, ReplayProvider


@dataclass
class RunConfig:
    manifest: str = ""
    out_dir: str = "run"
    run_id: str = "run1"
    seed: int = 42

    animals_per_class: int = 3
    images_per_animal: int = 6
    initial_fraction: float = 0.5
    round_cap: int = 5

    batch_size: int = 10
    round_batch_size: int | None = None

    max_requests_per_window: int = 3
    window_s: float = 60.0
    max_concurrent: int = 2
    retry_max: int = 3
    backoff_base_s: float = 2.0

    provider_kind: str = "http"  # "http" or "replay"
    provider_endpoint: str = ""
    provider_model: str = "gpt-vlm"
    credential_env: str = "VLM_API_KEY"
    provider_timeout_s: float = 60.0
    replay_verdicts: str | None = None

    role_text: str | None = None
    class_criteria: dict[str, str] | None = None
    template_path: str | None = None

    method_minutes: float | None = None
    baseline_minutes: float | None = None

    review_token_env: str = "REVIEW_TOKEN"

    def validate(self) -> None:
        if not self.manifest:
            raise SchemaError("config requires a manifest path")
        if not 0 < self.initial_fraction < 1:
            raise SchemaError("initial_fraction must be strictly between 0 and 1")
        for name in ("animals_per_class", "images_per_animal", "round_cap", "batch_size"):
            if getattr(self, name) < 1:
                raise SchemaError(f"{name} must be >= 1")
        if self.provider_kind not in ("http", "replay"):
            raise SchemaError(f"unknown provider_kind {self.provider_kind!r}")

    def policy(self) -> RateLimitPolicy:
        return RateLimitPolicy(
            max_requests_per_window=self.max_requests_per_window,
            window_s=self.window_s,
            max_concurrent=self.max_concurrent,
            retry_max=self.retry_max,
            backoff_base_s=self.backoff_base_s,
        )

    def build_provider(self):
        if self.provider_kind == "replay":
            if not self.replay_verdicts:
                raise SchemaError("provider_kind=replay requires replay_verdicts")
            path = Path(self.replay_verdicts)
            if not path.is_file():
                raise MissingFile(f"replay verdict map not found: {path}")
            labels = json.loads(path.read_text(encoding="utf-8"))
            return ReplayProvider(labels)
        if not self.provider_endpoint:
            raise SchemaError("provider_kind=http requires provider_endpoint")
        return HttpProvider(
            ProviderConfig(
                endpoint=self.provider_endpoint,
                model_name=self.provider_model,
                credential_env=self.credential_env,
                timeout_s=self.provider_timeout_s,
            )
        )

    def out_path(self) -> Path:
        return Path(self.out_dir)


_FIELD_NAMES = {f.name for f in fields(RunConfig)}


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Read the config file (if given) and apply non-None flag overrides."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise MissingFile(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config is not valid JSON: {exc.msg}") from None
        if not isinstance(data, dict):
            raise SchemaError("config must be a JSON object")
    unknown = set(data) - _FIELD_NAMES
    if unknown:
        raise SchemaError(f"unknown config keys: {sorted(unknown)}")
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    config = RunConfig(**{k: v for k, v in data.items() if k in _FIELD_NAMES})
    return config


def snapshot_config(config: RunConfig, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.snapshot.json"
    path.write_text(json.dumps(asdict(config), indent=1), encoding="utf-8")
    return path
