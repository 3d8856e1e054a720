"""Human review queue with an event-sourced audit trail.

Unresolved conflicts land here as pending review items. Humans accept or
reject each flag with a mandatory justification, optionally attaching a
knowledge update that mutates the rule base (scoped suppression, always-valid
marking, or an amended recommendation).

Queue state is a pure fold over an append-only JSON-lines event log:
replaying the log reconstructs the live state exactly, which is what makes
every decision auditable after the fact.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import (
    AlreadyDecided,
    EmptyJustification,
    NotFound,
    StorageError,
    UnknownRule,
)
from .orchestrator import Issue, Verdict, normalize_ws
from .rulebase import ContextSuppression, RuleBase, RuleBaseStore, RuleStatus
from .waterfall import ContentContext

EVENT_SCHEMA_VERSION = 1


class ReviewStatus(str, Enum):
    PENDING = "pending"
    ACCEPTED = "accepted"
    REJECTED = "rejected"


class DecisionVerdict(str, Enum):
    ACCEPT_VIOLATION = "accept_violation"
    REJECT_FLAG = "reject_flag"


class FeedbackAction(str, Enum):
    SUPPRESS_IN_CONTEXT = "suppress_in_context"
    MARK_ALWAYS_VALID = "mark_always_valid"
    AMEND_RECOMMENDATION = "amend_recommendation"


@dataclass(frozen=True)
class KnowledgeUpdate:
    rule_id: str
    action: FeedbackAction
    scope: ContentContext | None = None
    recommendation: str | None = None
    scope_note: str = ""

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"rule_id": self.rule_id, "action": self.action.value}
        if self.scope is not None:
            out["scope"] = self.scope.to_dict()
        if self.recommendation is not None:
            out["recommendation"] = self.recommendation
        if self.scope_note:
            out["scope_note"] = self.scope_note
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "KnowledgeUpdate":
        return cls(
            rule_id=data["rule_id"],
            action=FeedbackAction(data["action"]),
            scope=ContentContext.from_dict(data["scope"]) if "scope" in data else None,
            recommendation=data.get("recommendation"),
            scope_note=data.get("scope_note", ""),
        )


@dataclass(frozen=True)
class HumanDecision:
    verdict: DecisionVerdict
    justification: str
    reviewer_id: str
    knowledge_update: KnowledgeUpdate | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "verdict": self.verdict.value,
            "justification": self.justification,
            "reviewer_id": self.reviewer_id,
        }
        if self.knowledge_update is not None:
            out["knowledge_update"] = self.knowledge_update.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "HumanDecision":
        update = data.get("knowledge_update")
        return cls(
            verdict=DecisionVerdict(data["verdict"]),
            justification=data["justification"],
            reviewer_id=data["reviewer_id"],
            knowledge_update=KnowledgeUpdate.from_dict(update) if update else None,
        )


@dataclass
class ReviewItem:
    item_id: str
    content_id: str
    issue: Issue
    content: str | None = None  # analyzed text, for reviewer display
    teacher_position: Verdict | None = None
    student_position: Issue | None = None
    status: ReviewStatus = ReviewStatus.PENDING
    decision: HumanDecision | None = None
    created_at: str = ""
    decided_at: str | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "item_id": self.item_id,
            "content_id": self.content_id,
            "issue": self.issue.to_dict(),
            "status": self.status.value,
            "created_at": self.created_at,
        }
        if self.content is not None:
            out["content"] = self.content
        if self.teacher_position is not None:
            out["teacher_position"] = self.teacher_position.to_dict()
        if self.student_position is not None:
            out["student_position"] = self.student_position.to_dict()
        if self.decision is not None:
            out["decision"] = self.decision.to_dict()
        if self.decided_at is not None:
            out["decided_at"] = self.decided_at
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ReviewItem":
        return cls(
            item_id=data["item_id"],
            content_id=data["content_id"],
            issue=Issue.from_dict(data["issue"]),
            content=data.get("content"),
            teacher_position=Verdict.from_dict(data["teacher_position"])
            if data.get("teacher_position") else None,
            student_position=Issue.from_dict(data["student_position"])
            if data.get("student_position") else None,
            status=ReviewStatus(data.get("status", "pending")),
            decision=HumanDecision.from_dict(data["decision"])
            if data.get("decision") else None,
            created_at=data.get("created_at", ""),
            decided_at=data.get("decided_at"),
        )


# --------------------------------------------------------------------------
# Feedback application
# --------------------------------------------------------------------------

def apply_feedback(base: RuleBase, update: KnowledgeUpdate) -> RuleBase:
    """Apply one human knowledge update, returning a new rule base version.

    suppress_in_context with an empty scope suppresses the rule globally;
    a scoped suppression leaves the rule active outside the scope.
    """
    rule = base.get(update.rule_id)
    if rule is None:
        raise UnknownRule(f"rule {update.rule_id!r} not in rule base")
    if update.action is FeedbackAction.SUPPRESS_IN_CONTEXT:
        scope = update.scope.scope_dict() if update.scope is not None else {}
        if not scope:
            return base.with_rule(replace(rule, status=RuleStatus.SUPPRESSED))
        return base.with_suppression(
            ContextSuppression.make(update.rule_id, scope, note=update.scope_note))
    if update.action is FeedbackAction.MARK_ALWAYS_VALID:
        return base.with_rule(replace(
            rule, always_valid=True, status=RuleStatus.HUMAN_OVERRIDDEN))
    if update.action is FeedbackAction.AMEND_RECOMMENDATION:
        if not update.recommendation or not update.recommendation.strip():
            raise ValueError("amend_recommendation needs a non-empty recommendation")
        return base.with_rule(replace(
            rule, amended_recommendation=update.recommendation,
            status=RuleStatus.HUMAN_OVERRIDDEN))
    raise ValueError(f"unknown feedback action {update.action}")


# --------------------------------------------------------------------------
# Review queue
# --------------------------------------------------------------------------

def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


def dedup_key(content_id: str, rule_id: str, snippet: str) -> tuple[str, str, str]:
    return (content_id, rule_id, normalize_ws(snippet).casefold())


class ReviewQueue:
    """Event-sourced review queue: single writer, many snapshot readers.

    When constructed with a log path, existing events are replayed on start
    and every new event is durably appended before it becomes visible.
    """

    def __init__(self, log_path: str | Path | None = None,
                 rulebase_store: RuleBaseStore | None = None):
        self._lock = threading.Lock()
        self._items: dict[str, ReviewItem] = {}
        self._dedup: dict[tuple[str, str, str], str] = {}
        self._events: list[dict[str, Any]] = []
        self._next_item = 1
        self._store = rulebase_store
        self._log_path = Path(log_path) if log_path else None
        if self._log_path and self._log_path.exists():
            for line in self._log_path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    self._fold(json.loads(line), record=True)
        elif self._log_path:
            self._log_path.parent.mkdir(parents=True, exist_ok=True)

    # -- event plumbing ------------------------------------------------------

    def _fold(self, event: Mapping[str, Any], record: bool) -> None:
        """Apply one event to in-memory state (no persistence)."""
        etype = event["type"]
        if etype == "enqueued":
            item = ReviewItem.from_dict(event["item"])
            self._items[item.item_id] = item
            self._dedup[dedup_key(item.content_id, item.issue.rule_id,
                                  item.issue.context_snippet)] = item.item_id
            numeric = int(item.item_id.rsplit("-", 1)[-1])
            self._next_item = max(self._next_item, numeric + 1)
        elif etype == "decided":
            item = self._items[event["item_id"]]
            decision = HumanDecision.from_dict(event["decision"])
            item.status = (ReviewStatus.ACCEPTED
                           if decision.verdict is DecisionVerdict.ACCEPT_VIOLATION
                           else ReviewStatus.REJECTED)
            item.decision = decision
            item.decided_at = event["at"]
        elif etype == "feedback_applied":
            pass  # audit-only: rule base effects live in the rule base store
        else:
            raise StorageError(f"unknown event type {etype!r} in review log")
        if record:
            self._events.append(dict(event))

    def _append(self, event: dict[str, Any]) -> None:
        event = {
            "schema_version": EVENT_SCHEMA_VERSION,
            "seq": len(self._events) + 1,
            "at": _utcnow(),
            **event,
        }
        if self._log_path:
            try:
                with self._log_path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(event, ensure_ascii=False) + "\n")
                    fh.flush()
            except OSError as exc:
                raise StorageError(f"cannot append to review log: {exc}") from exc
        self._fold(event, record=True)

    # -- operations ------------------------------------------------------------

    def enqueue(self, item: ReviewItem) -> str:
        """Durably add a pending item; duplicates (same content, rule and
        normalized snippet) return the existing item id instead."""
        if item.status is not ReviewStatus.PENDING or item.decision is not None:
            raise ValueError("enqueued items must be pending and undecided")
        with self._lock:
            key = dedup_key(item.content_id, item.issue.rule_id,
                            item.issue.context_snippet)
            existing = self._dedup.get(key)
            if existing is not None:
                return existing
            item_id = f"ri-{self._next_item:06d}"
            stamped = replace(item, item_id=item_id, created_at=_utcnow())
            self._append({"type": "enqueued", "item": stamped.to_dict()})
            return item_id

    def enqueue_conflict(self, content_id: str, issue: Issue,
                         teacher_position: Verdict | None = None,
                         student_position: Issue | None = None,
                         content: str | None = None) -> str:
        return self.enqueue(ReviewItem(
            item_id="",
            content_id=content_id,
            issue=issue,
            content=content,
            teacher_position=teacher_position,
            student_position=student_position,
        ))

    def list_pending(self, content_id: str | None = None,
                     rule_id: str | None = None) -> list[ReviewItem]:
        """Pending items in creation order; filters are conjunctive."""
        with self._lock:
            items = [i for i in self._items.values() if i.status is ReviewStatus.PENDING]
        if content_id is not None:
            items = [i for i in items if i.content_id == content_id]
        if rule_id is not None:
            items = [i for i in items if i.issue.rule_id == rule_id]
        return items

    def get(self, item_id: str) -> ReviewItem:
        with self._lock:
            item = self._items.get(item_id)
        if item is None:
            raise NotFound(f"no review item {item_id!r}")
        return item

    def decide(self, item_id: str, decision: HumanDecision) -> ReviewItem:
        """Record a human decision; applies any knowledge update atomically
        with it. Second decisions on the same item raise AlreadyDecided."""
        if not decision.justification or not decision.justification.strip():
            raise EmptyJustification("decisions require a non-empty justification")
        with self._lock:
            item = self._items.get(item_id)
            if item is None:
                raise NotFound(f"no review item {item_id!r}")
            if item.status is not ReviewStatus.PENDING:
                raise AlreadyDecided(f"item {item_id} already {item.status.value}")
            new_version: int | None = None
            if decision.knowledge_update is not None:
                if self._store is None:
                    raise StorageError("no rule base store attached; cannot apply feedback")
                # Validate before any event is written so failures stay atomic.
                if self._store.get().get(decision.knowledge_update.rule_id) is None:
                    raise UnknownRule(
                        f"rule {decision.knowledge_update.rule_id!r} not in rule base")
                new_base = self._store.apply(
                    lambda base: apply_feedback(base, decision.knowledge_update))
                new_version = new_base.version
            self._append({"type": "decided", "item_id": item_id,
                          "decision": decision.to_dict()})
            if decision.knowledge_update is not None:
                self._append({"type": "feedback_applied", "item_id": item_id,
                              "update": decision.knowledge_update.to_dict(),
                              "rulebase_version": new_version})
            return self._items[item_id]

    def export_audit(self, start: str | None = None,
                     end: str | None = None) -> list[dict[str, Any]]:
        """Events in append order, optionally bounded by ISO timestamps
        (inclusive). Replaying the full export reconstructs queue state."""
        with self._lock:
            events = [dict(e) for e in self._events]
        if start is not None:
            events = [e for e in events if e["at"] >= start]
        if end is not None:
            events = [e for e in events if e["at"] <= end]
        return events

    @classmethod
    def replay(cls, events: Iterable[Mapping[str, Any]]) -> "ReviewQueue":
        """Rebuild a queue purely from an event list (no persistence)."""
        queue = cls()
        for event in events:
            queue._fold(event, record=True)
        return queue

    # -- snapshots ---------------------------------------------------------------

    def snapshot(self, path: str | Path) -> None:
        """Write current state atomically (temp file + rename)."""
        path = Path(path)
        payload = {
            "schema_version": EVENT_SCHEMA_VERSION,
            "taken_at": _utcnow(),
            "event_count": len(self._events),
            "items": [i.to_dict() for i in self._items.values()],
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(payload, ensure_ascii=False, indent=2),
                       encoding="utf-8")
        tmp.replace(path)

    def state_fingerprint(self) -> str:
        """Order-stable digest of item state, for replay-equality checks."""
        items = sorted((i.to_dict() for i in self._items.values()),
                       key=lambda d: d["item_id"])
        return json.dumps(items, sort_keys=True, ensure_ascii=False)
