"""HTTP surface: FastAPI app over an Engine.

Every non-2xx response body is an ApiError object: {code, message, detail?}.
"""

from __future__ import annotations

from typing import Any

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .engine import Engine
from .errors import (
    AlreadyDecided,
    BackendUnavailable,
    ContentQCError,
    EmptyJustification,
    JsonError,
    NotFound,
    RequestTimeout,
    SchemaError,
    UnknownRule,
)
from .hitl import DecisionVerdict, FeedbackAction, HumanDecision, KnowledgeUpdate
from .waterfall import ContentContext

_STATUS_BY_ERROR: list[tuple[type[Exception], int, str]] = [
    (NotFound, 404, "not_found"),
    (AlreadyDecided, 409, "already_decided"),
    (EmptyJustification, 400, "empty_justification"),
    (UnknownRule, 400, "unknown_rule"),
    (SchemaError, 400, "schema_error"),
    (JsonError, 400, "json_error"),
    (RequestTimeout, 503, "backend_timeout"),
    (BackendUnavailable, 503, "backend_unavailable"),
]


class ContextBody(BaseModel):
    ip: str | None = None
    country: str | None = None
    use_case: str | None = None
    topic: str | None = None
    subtasks: list[str] = Field(default_factory=list)
    content_type: str | None = None

    def to_context(self) -> ContentContext:
        return ContentContext(
            ip=self.ip, country=self.country, use_case=self.use_case,
            topic=self.topic, subtasks=frozenset(self.subtasks),
            content_type=self.content_type)


class RunBody(BaseModel):
    content: str = Field(min_length=1)
    context: ContextBody = Field(default_factory=ContextBody)


class KnowledgeUpdateBody(BaseModel):
    rule_id: str
    action: str
    scope: ContextBody | None = None
    recommendation: str | None = None
    scope_note: str = ""

    def to_update(self) -> KnowledgeUpdate:
        return KnowledgeUpdate(
            rule_id=self.rule_id,
            action=FeedbackAction(self.action),
            scope=self.scope.to_context() if self.scope is not None else None,
            recommendation=self.recommendation,
            scope_note=self.scope_note,
        )


class DecisionBody(BaseModel):
    verdict: str
    justification: str
    reviewer_id: str = "anonymous"
    knowledge_update: KnowledgeUpdateBody | None = None

    def to_decision(self) -> HumanDecision:
        return HumanDecision(
            verdict=DecisionVerdict(self.verdict),
            justification=self.justification,
            reviewer_id=self.reviewer_id,
            knowledge_update=(self.knowledge_update.to_update()
                              if self.knowledge_update is not None else None),
        )


class IngestBody(BaseModel):
    document: dict[str, Any] | str
    default_tags: dict[str, Any] | None = None
    module_map: dict[str, str] | None = None
    section_tags: dict[str, dict[str, Any]] | None = None


def _api_error(status: int, code: str, message: str,
               detail: Any | None = None) -> JSONResponse:
    body: dict[str, Any] = {"code": code, "message": message}
    if detail is not None:
        body["detail"] = detail
    return JSONResponse(status_code=status, content=body)


def create_app(engine: Engine) -> FastAPI:
    app = FastAPI(title="contentqc", version="0.1.0")

    @app.exception_handler(ContentQCError)
    async def handle_engine_error(_request: Request, exc: ContentQCError):
        for err_type, status, code in _STATUS_BY_ERROR:
            if isinstance(exc, err_type):
                return _api_error(status, code, str(exc))
        return _api_error(500, "internal_error", str(exc))

    @app.exception_handler(ValueError)
    async def handle_value_error(_request: Request, exc: ValueError):
        return _api_error(400, "invalid_request", str(exc))

    @app.exception_handler(RequestValidationError)
    async def handle_validation_error(_request: Request, exc: RequestValidationError):
        return _api_error(400, "schema_error", "request body failed validation",
                          detail=exc.errors())

    @app.post("/qc/run", status_code=202)
    def run_qc(body: RunBody) -> dict[str, str]:
        if not body.content.strip():
            raise ValueError("content must be non-empty")
        report_id = engine.run_qc_async(body.content, body.context.to_context())
        return {"report_id": report_id}

    @app.get("/qc/report/{report_id}")
    def get_report(report_id: str) -> dict[str, Any]:
        report = engine.get_report(report_id)
        if report is None:
            return {"status": "running"}
        return {"status": "complete", "report": report.to_dict()}

    @app.get("/review/pending")
    def review_pending(content_id: str | None = None,
                       rule_id: str | None = None) -> list[dict[str, Any]]:
        return [item.to_dict()
                for item in engine.review_queue.list_pending(content_id, rule_id)]

    @app.post("/review/{item_id}/decision")
    def review_decide(item_id: str, body: DecisionBody) -> dict[str, Any]:
        item = engine.review_queue.decide(item_id, body.to_decision())
        return item.to_dict()

    @app.post("/rules/ingest")
    def ingest(body: IngestBody) -> dict[str, Any]:
        import json as _json

        document = (body.document if isinstance(body.document, str)
                    else _json.dumps(body.document))
        rule_ids, version = engine.ingest_document(
            document, body.default_tags, body.module_map, body.section_tags)
        return {"rule_ids": rule_ids, "rulebase_version": version}

    @app.get("/rules")
    def rules(ip: str | None = None, country: str | None = None,
              use_case: str | None = None, topic: str | None = None,
              subtask: list[str] | None = None) -> dict[str, Any]:
        ctx = ContentContext(
            ip=ip, country=country, use_case=use_case, topic=topic,
            subtasks=frozenset(subtask or []))
        return engine.filtered_rules(ctx).to_dict()

    if engine.cfg.ui_dir and engine.cfg.ui_dir.is_dir():
        app.mount("/ui", StaticFiles(directory=str(engine.cfg.ui_dir), html=True),
                  name="ui")

    return app
