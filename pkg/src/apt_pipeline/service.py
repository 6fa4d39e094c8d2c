"""HTTP review service: the expert's window into one tuning run.

HTTP+JSON on loopback by default, optional shared bearer token. All
mutations funnel into the run owner's serialized transition queue; errors
come back as ``{"code", "message"}``. Only prompt-cohort data ever crosses
this boundary: review items are prompt-cohort by construction and no
endpoint serializes test-cohort ground truth.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .dataset import DatasetManifest
from .engine import DECISIONS
from .errors import (
    CaptionError,
    ConflictError,
    GatewayFailure,
    IncorrectItemPromotion,
    IntegrityError,
    NoSuchPending,
    PendingReviewsExist,
    RoundCapReached,
    UnsupportedFormat,
)
from .prompting import count_sentences, media_type_of
from .runstate import AptRun


class ReviewBody(BaseModel):
    image_id: str
    decision: str
    explanation: str | None = None
    nonce: str | None = None


def _error(status: int, code: str, message: str, **extra) -> JSONResponse:
    return JSONResponse({"code": code, "message": message, **extra}, status_code=status)


def create_app(
    run: AptRun,
    manifest: DatasetManifest,
    token: str | None = None,
    static_dir: str | Path | None = None,
) -> FastAPI:
    app = FastAPI(title="review service", docs_url=None, redoc_url=None)

    def authorized(request: Request) -> bool:
        if not token:
            return True
        return request.headers.get("Authorization", "") == f"Bearer {token}"

    @app.middleware("http")
    async def auth_middleware(request: Request, call_next):
        if not authorized(request):
            return _error(401, "auth", "missing or invalid bearer token")
        return await call_next(request)

    def guard_run(run_id: str) -> JSONResponse | None:
        if run_id != run.run_id:
            return _error(404, "unknown_run", f"no run {run_id!r}")
        return None

    @app.get("/runs/{run_id}/pending")
    def list_pending(run_id: str):
        if (err := guard_run(run_id)) is not None:
            return err
        return {"run_id": run_id, "pending": run.pending_snapshot()}

    @app.get("/runs/{run_id}/status")
    def status(run_id: str):
        if (err := guard_run(run_id)) is not None:
            return err
        return run.status()

    @app.get("/images/{image_id}")
    def get_image(image_id: str):
        try:
            record = manifest.image(image_id)
            data = record.path.read_bytes()
            media = media_type_of(data)
        except (IntegrityError, FileNotFoundError, OSError):
            return _error(404, "not_found", f"no image {image_id!r}")
        except UnsupportedFormat:
            return _error(404, "not_found", f"image {image_id!r} is not servable")
        return Response(content=data, media_type=media)

    @app.post("/runs/{run_id}/reviews")
    def submit_review(run_id: str, body: ReviewBody):
        if (err := guard_run(run_id)) is not None:
            return err
        if body.decision not in DECISIONS:
            return _error(400, "validation", f"unknown decision {body.decision!r}")
        if body.decision == "edit":
            text = (body.explanation or "").strip()
            if not text:
                return _error(400, "validation", "edit requires explanation text")
            sentences = count_sentences(text)
            if not 1 <= sentences <= 3:
                return _error(
                    400, "validation",
                    f"explanation must be 1 to 3 sentences, got {sentences}",
                )
        try:
            summary = run.submit_review(
                body.image_id, body.decision, body.explanation, body.nonce
            )
        except ConflictError as exc:
            return _error(409, "conflict", str(exc))
        except IncorrectItemPromotion as exc:
            return _error(409, "incorrect_item", str(exc))
        except NoSuchPending as exc:
            return _error(404, "no_such_pending", str(exc))
        except (CaptionError, ValueError) as exc:
            return _error(400, "validation", str(exc))
        return summary

    @app.post("/runs/{run_id}/advance")
    def advance(run_id: str):
        if (err := guard_run(run_id)) is not None:
            return err
        try:
            return run.advance()
        except PendingReviewsExist as exc:
            return _error(409, "pending_reviews_exist", str(exc))
        except RoundCapReached as exc:
            return _error(409, "round_cap_reached", str(exc), residual=run.residual_ids())
        except GatewayFailure as exc:
            return _error(502, "gateway_failure", str(exc))

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")

    return app
