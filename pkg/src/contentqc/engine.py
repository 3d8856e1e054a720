"""Wiring of the engine: rule base, backends, orchestrator, queue, reports.

The engine is the single composition root used by both the HTTP API and the
CLI, so every capability is reachable from either surface.
"""

from __future__ import annotations

import json
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Mapping

from .config import ServiceConfig
from .errors import NotFound
from .hitl import ReviewQueue
from .modelclient import (
    Backend,
    HttpBackend,
    MockBackend,
    ModelClient,
    PricingTable,
    ReplayBackend,
    UsageLog,
    usage_summary,
)
from .orchestrator import Orchestrator, QCReport
from .rulebase import (
    RuleBaseStore,
    TaxonomyTags,
    index_rules,
    parse_rule_document,
    upsert_rules,
)
from .waterfall import ContentContext, FilteredRuleSet, filter_rules


def _build_backends(cfg: ServiceConfig) -> dict[str, Backend]:
    if cfg.backend_mode == "mock":
        backend: Backend = MockBackend.from_file(cfg.mock_script_path)
    elif cfg.backend_mode == "replay":
        backend = ReplayBackend.from_file(cfg.replay_path)
    else:
        backend = HttpBackend(cfg.live_base_url, api_key_env=cfg.api_key_env,
                              timeout_s=cfg.request_timeout_s)
    providers = {cfg.orchestrator.teacher.provider, cfg.orchestrator.student.provider}
    return {provider: backend for provider in providers}


class Engine:
    """Owns all long-lived state for one service/CLI invocation."""

    def __init__(self, cfg: ServiceConfig):
        self.cfg = cfg
        pricing = (PricingTable.from_file(cfg.pricing_path)
                   if cfg.pricing_path else None)
        self.usage_log = UsageLog(cfg.usage_log_path)
        self.client = ModelClient(
            backends=_build_backends(cfg),
            pricing=pricing,
            usage_log=self.usage_log,
        )
        self.rulebase_store = RuleBaseStore(path=cfg.rulebase_path)
        self.review_queue = ReviewQueue(
            log_path=cfg.review_log_path,
            rulebase_store=self.rulebase_store,
        )
        self.orchestrator = Orchestrator(
            client=self.client,
            review_queue=self.review_queue,
            template_dir=str(cfg.template_dir) if cfg.template_dir else None,
        )
        self._reports: dict[str, QCReport | Exception | None] = {}
        self._reports_lock = threading.Lock()
        self._pool = ThreadPoolExecutor(max_workers=cfg.max_concurrent_runs)

    # -- QC runs -----------------------------------------------------------

    def run_qc_sync(self, content: str, ctx: ContentContext) -> tuple[str, QCReport]:
        report_id = uuid.uuid4().hex[:16]
        report = self.orchestrator.run_qc(
            content, ctx, self.rulebase_store.get(), self.cfg.orchestrator)
        self._finish(report_id, report)
        return report_id, report

    def run_qc_async(self, content: str, ctx: ContentContext) -> str:
        report_id = uuid.uuid4().hex[:16]
        with self._reports_lock:
            self._reports[report_id] = None  # running marker
        self._pool.submit(self._run_and_store, report_id, content, ctx)
        return report_id

    def _run_and_store(self, report_id: str, content: str, ctx: ContentContext) -> None:
        try:
            report = self.orchestrator.run_qc(
                content, ctx, self.rulebase_store.get(), self.cfg.orchestrator)
        except Exception as exc:  # surfaced on the next GET for this report
            with self._reports_lock:
                self._reports[report_id] = exc
            return
        self._finish(report_id, report)

    def _finish(self, report_id: str, report: QCReport) -> None:
        with self._reports_lock:
            self._reports[report_id] = report
        if self.cfg.reports_dir:
            self.cfg.reports_dir.mkdir(parents=True, exist_ok=True)
            out = Path(self.cfg.reports_dir) / f"{report_id}.json"
            out.write_text(report.to_json(), encoding="utf-8")

    def get_report(self, report_id: str) -> QCReport | None:
        """The finished report, or None while the run is still in flight.

        Raises NotFound for ids this engine never issued; re-raises the
        pipeline failure for runs that crashed.
        """
        with self._reports_lock:
            if report_id not in self._reports:
                raise NotFound(f"no report {report_id!r}")
            entry = self._reports[report_id]
        if isinstance(entry, Exception):
            raise entry
        return entry

    # -- rules ---------------------------------------------------------------

    def ingest_document(
        self,
        document_json: str,
        default_tags: Mapping[str, Any] | None = None,
        module_map: Mapping[str, str] | None = None,
        section_tags: Mapping[str, Mapping[str, Any]] | None = None,
    ) -> tuple[list[str], int]:
        doc = parse_rule_document(document_json)
        tags = TaxonomyTags.from_dict(default_tags)
        per_section = {title: TaxonomyTags.from_dict(raw)
                       for title, raw in (section_tags or {}).items()}
        rules = index_rules(doc, default_tags=tags, module_assignment=module_map,
                            section_tags=per_section)
        new_base = self.rulebase_store.apply(lambda base: upsert_rules(base, rules))
        return [r.rule_id for r in rules], new_base.version

    def filtered_rules(self, ctx: ContentContext) -> FilteredRuleSet:
        return filter_rules(self.rulebase_store.get(), ctx)

    # -- usage -----------------------------------------------------------------

    def usage(self) -> dict[str, Any]:
        return usage_summary(self.usage_log.records())

    def shutdown(self) -> None:
        self._pool.shutdown(wait=True)


def load_sidecar(path: str | Path) -> dict[str, Any]:
    """Read the optional ingestion sidecar: default tags, per-section module
    assignments and per-section tag overrides."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return {
        "default_tags": data.get("default_tags"),
        "module_map": data.get("module_map"),
        "section_tags": data.get("section_tags"),
    }
