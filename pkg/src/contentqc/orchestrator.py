"""Dual-model verification state machine.

One QC run is: filter rules -> render prompt -> teacher and student
detection passes -> diff into agreed/conflict sets -> teacher verification
of conflicts (with consolidation) -> bounded re-check rounds -> hand-off of
anything still contested to the human review queue.

Missing a violation is the critical failure mode, so no issue is ever
silently dropped: every detected issue ends up agreed, verdict-carrying,
explicitly rejected, or enqueued for human review, and the audit trail
records which.
"""

from __future__ import annotations

import hashlib
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Any, Mapping, Protocol

from .errors import BackendUnavailable, RequestTimeout, SchemaViolation

# Failures that degrade a pass instead of aborting the whole run.
PASS_FAILURES = (SchemaViolation, BackendUnavailable, RequestTimeout)
from .modelclient import (
    ISSUES_REPORT_SCHEMA,
    VERIFICATION_VERDICTS_SCHEMA,
    ChatRequest,
    ModelClient,
    ModelSpec,
    RoutingPolicy,
)
from .rulebase import RuleBase
from .waterfall import ContentContext, FilteredRuleSet, filter_rules, render_system_prompt

DEFAULT_JACCARD_THRESHOLD = 0.5
DEFAULT_MAX_ROUNDS = 2

VERIFIER_SYSTEM = (
    "You are the senior reviewer performing an authoritative final check of "
    "previously flagged content issues."
)


def normalize_ws(text: str) -> str:
    return " ".join(text.split())


def snippet_tokens(text: str) -> frozenset[str]:
    return frozenset(re.findall(r"[a-z0-9]+", text.casefold()))


def jaccard(a: str, b: str) -> float:
    ta, tb = snippet_tokens(a), snippet_tokens(b)
    if not ta and not tb:
        return 1.0
    union = ta | tb
    return len(ta & tb) / len(union)


# --------------------------------------------------------------------------
# Artifacts
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Issue:
    """One flagged violation: rule id, verbatim snippet, suggested fix."""

    rule_id: str
    context_snippet: str
    recommendation: str
    origin: str  # "teacher" | "student"
    pass_index: int = 1
    uid: str = ""
    unanchored: bool = False
    out_of_scope: bool = False

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "rule_id": self.rule_id,
            "context": self.context_snippet,
            "recommendation": self.recommendation,
            "origin": self.origin,
            "pass_index": self.pass_index,
            "uid": self.uid,
        }
        if self.unanchored:
            out["unanchored"] = True
        if self.out_of_scope:
            out["out_of_scope"] = True
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Issue":
        return cls(
            rule_id=data["rule_id"],
            context_snippet=data.get("context", ""),
            recommendation=data.get("recommendation", ""),
            origin=data.get("origin", "teacher"),
            pass_index=int(data.get("pass_index", 1)),
            uid=data.get("uid", ""),
            unanchored=bool(data.get("unanchored", False)),
            out_of_scope=bool(data.get("out_of_scope", False)),
        )


@dataclass(frozen=True)
class Verdict:
    issue: Issue
    is_valid: bool
    justification: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "issue": self.issue.to_dict(),
            "is_valid": self.is_valid,
            "justification": self.justification,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Verdict":
        return cls(
            issue=Issue.from_dict(data["issue"]),
            is_valid=bool(data["is_valid"]),
            justification=data.get("justification", ""),
        )


@dataclass
class ConsensusReport:
    """Outcome of diffing teacher and student findings.

    `consolidated` records merges: agreed entries absorb their matched
    student twin's uid. `unresolved` is populated by the verification stage.
    """

    agreed: list[Issue] = field(default_factory=list)
    teacher_only: list[Issue] = field(default_factory=list)
    student_only: list[Issue] = field(default_factory=list)
    consolidated: list[tuple[Issue, tuple[str, ...]]] = field(default_factory=list)
    unresolved: list[Issue] = field(default_factory=list)


@dataclass(frozen=True)
class FinalIssue:
    issue: Issue
    resolution: str  # "agreed" | "verified" | "auto_validated"
    verdict: Verdict | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"issue": self.issue.to_dict(), "resolution": self.resolution}
        if self.verdict is not None:
            out["verdict"] = self.verdict.to_dict()
        return out


@dataclass
class AuditEvent:
    seq: int
    kind: str
    detail: dict[str, Any]
    at: str

    def to_dict(self) -> dict[str, Any]:
        return {"seq": self.seq, "kind": self.kind, "detail": self.detail, "at": self.at}


@dataclass
class QCReport:
    content_id: str
    context: ContentContext
    rulebase_version: int
    filtered_rule_ids: tuple[str, ...]
    final_issues: list[FinalIssue]
    rejected: list[Verdict]
    unresolved_for_review: list[Issue]
    review_item_ids: list[str]
    issue_fates: dict[str, str]
    audit: list[AuditEvent]
    usage_request_ids: list[str]

    def to_dict(self) -> dict[str, Any]:
        return {
            "content_id": self.content_id,
            "context": self.context.to_dict(),
            "rulebase_version": self.rulebase_version,
            "filtered_rule_ids": list(self.filtered_rule_ids),
            "final_issues": [f.to_dict() for f in self.final_issues],
            "rejected": [v.to_dict() for v in self.rejected],
            "unresolved_for_review": [i.to_dict() for i in self.unresolved_for_review],
            "review_item_ids": list(self.review_item_ids),
            "issue_fates": dict(self.issue_fates),
            "audit": [e.to_dict() for e in self.audit],
            "usage_request_ids": list(self.usage_request_ids),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True, indent=2)

    def canonical_json(self) -> str:
        """Stable serialization for comparisons: audit timestamps removed."""
        data = self.to_dict()
        for event in data["audit"]:
            event.pop("at", None)
        return json.dumps(data, ensure_ascii=False, sort_keys=True)


# --------------------------------------------------------------------------
# Detection and diffing
# --------------------------------------------------------------------------

def _anchor(issue: Issue, content: str) -> Issue:
    snippet = normalize_ws(issue.context_snippet)
    anchored = bool(snippet) and snippet in normalize_ws(content)
    if anchored == (not issue.unanchored):
        return issue
    return replace(issue, unanchored=not anchored)


def detect_issues(
    client: ModelClient,
    spec: ModelSpec,
    prompt: str,
    content: str,
    pass_index: int = 1,
    request_id: str | None = None,
) -> list[Issue]:
    """Run one detection pass and parse the issues array into Issues.

    Raises SchemaViolation (from the client) when the model output breaks
    the issues-report contract; the caller owns retries.
    """
    response = client.complete(
        spec,
        ChatRequest(
            system_instruction=prompt,
            user_content=content,
            response_schema_id=ISSUES_REPORT_SCHEMA,
        ),
        request_id=request_id,
    )
    origin = spec.role_hint.value
    prefix = origin[0]
    issues = []
    for i, item in enumerate(response.parsed_json["issues"], start=1):
        issue = Issue(
            rule_id=str(item["issue"]),
            context_snippet=str(item["context"]),
            recommendation=str(item["recommendation"]),
            origin=origin,
            pass_index=pass_index,
            uid=f"{prefix}{pass_index}.{i}",
        )
        issues.append(_anchor(issue, content))
    return issues


def issues_match(a: Issue, b: Issue, threshold: float = DEFAULT_JACCARD_THRESHOLD) -> bool:
    """Two issues flag the same underlying error: same rule id and
    sufficiently overlapping snippets (token-set Jaccard)."""
    return a.rule_id == b.rule_id and jaccard(a.context_snippet, b.context_snippet) >= threshold


def diff_issues(
    teacher: list[Issue],
    student: list[Issue],
    threshold: float = DEFAULT_JACCARD_THRESHOLD,
) -> ConsensusReport:
    """Partition findings into agreed pairs and one-sided conflicts.

    Matching is greedy in teacher order, taking the highest-Jaccard student
    candidate; the teacher copy is kept for agreed pairs.
    """
    report = ConsensusReport()
    taken: set[int] = set()
    for t_issue in teacher:
        best_j, best_idx = -1.0, -1
        for idx, s_issue in enumerate(student):
            if idx in taken or s_issue.rule_id != t_issue.rule_id:
                continue
            j = jaccard(t_issue.context_snippet, s_issue.context_snippet)
            if j >= threshold and j > best_j:
                best_j, best_idx = j, idx
        if best_idx >= 0:
            taken.add(best_idx)
            report.agreed.append(t_issue)
            report.consolidated.append((t_issue, (student[best_idx].uid,)))
        else:
            report.teacher_only.append(t_issue)
    report.student_only.extend(s for i, s in enumerate(student) if i not in taken)
    return report


# --------------------------------------------------------------------------
# Verification
# --------------------------------------------------------------------------

VERIFICATION_INSTRUCTIONS = (
    "Review instructions:\n"
    "1. Critically re-evaluate each listed issue against the original text "
    "and the original rules.\n"
    "2. If several issues point to the same underlying error, consolidate "
    "them into a single issue in your response.\n"
    "3. For each final issue, determine whether it is a valid violation."
)

VERIFICATION_OUTPUT_CONTRACT = (
    "Output format:\n"
    "Respond with a JSON object. The object must have a single key \"issues\" "
    "whose value is an array of objects, one per re-evaluated issue. Each "
    "object must have the following FOUR keys:\n"
    "1. \"issue\": the most appropriate rule ID for the violation.\n"
    "2. \"context\": the exact snippet from the original text.\n"
    "3. \"recommendation\": your final verdict and justification; if the issue "
    "is NOT a valid violation, explain why it was likely flagged incorrectly.\n"
    "4. \"isValid\": a boolean, true when the issue is a valid violation and "
    "false otherwise."
)


def build_verification_prompt(conflicts: list[Issue], content: str, rules_prompt: str) -> str:
    """Assemble the teacher's re-evaluation prompt for a batch of conflicts."""
    lines = "\n".join(
        f'- Rule: {c.rule_id} Context: "{c.context_snippet}"' for c in conflicts
    )
    return (
        "Issues flagged by different reviewer models require a final, "
        "authoritative check against the original text and rules.\n\n"
        f"Original text:\n{content}\n\n"
        f"Original rules:\n{rules_prompt}\n\n"
        f"Issues to re-evaluate:\n{lines}\n\n"
        f"{VERIFICATION_INSTRUCTIONS}\n\n"
        f"{VERIFICATION_OUTPUT_CONTRACT}"
    )


def verify_issues(
    client: ModelClient,
    teacher_spec: ModelSpec,
    prompt: str,
    round_index: int = 1,
    request_id: str | None = None,
) -> list[Verdict]:
    """Run the teacher verification pass; the returned list may be shorter
    than the conflict batch when the teacher consolidates duplicates."""
    response = client.complete(
        teacher_spec,
        ChatRequest(
            system_instruction=VERIFIER_SYSTEM,
            user_content=prompt,
            response_schema_id=VERIFICATION_VERDICTS_SCHEMA,
        ),
        request_id=request_id,
    )
    verdicts = []
    for i, item in enumerate(response.parsed_json["issues"], start=1):
        issue = Issue(
            rule_id=str(item["issue"]),
            context_snippet=str(item["context"]),
            recommendation=str(item["recommendation"]),
            origin="teacher",
            pass_index=round_index,
            uid=f"v{round_index}.{i}",
        )
        verdicts.append(Verdict(
            issue=issue,
            is_valid=bool(item["isValid"]),
            justification=str(item["recommendation"]),
        ))
    return verdicts


# --------------------------------------------------------------------------
# Orchestration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class OrchestratorConfig:
    teacher: ModelSpec
    student: ModelSpec
    max_rounds: int = DEFAULT_MAX_ROUNDS
    jaccard_threshold: float = DEFAULT_JACCARD_THRESHOLD
    template_id: str = "default"

    def routing_policy(self) -> RoutingPolicy:
        return RoutingPolicy(teacher=self.teacher, student=self.student)


class ReviewSink(Protocol):
    def enqueue_conflict(self, content_id: str, issue: Issue,
                         teacher_position: Verdict | None = None,
                         student_position: Issue | None = None,
                         content: str | None = None) -> str: ...


class _Audit:
    def __init__(self) -> None:
        self.events: list[AuditEvent] = []

    def add(self, kind: str, **detail: Any) -> None:
        self.events.append(AuditEvent(
            seq=len(self.events) + 1,
            kind=kind,
            detail=detail,
            at=datetime.now(timezone.utc).isoformat(),
        ))


class Orchestrator:
    """Executes QC runs against a model client and optional review queue."""

    def __init__(
        self,
        client: ModelClient,
        review_queue: ReviewSink | None = None,
        template_dir: str | None = None,
    ):
        self.client = client
        self.review_queue = review_queue
        self.template_dir = template_dir

    # -- helpers -------------------------------------------------------------

    def _detect_with_retry(self, spec: ModelSpec, prompt: str, content: str,
                           pass_index: int, label: str, content_id: str,
                           ) -> tuple[list[Issue] | None, list[dict[str, Any]], list[str]]:
        """One detection pass with a single retry on contract violations.

        Runs on a worker thread, so audit events and request ids are returned
        for the caller to merge in a fixed order instead of being appended to
        shared state.
        """
        events: list[dict[str, Any]] = []
        request_ids: list[str] = []
        for attempt in (1, 2):
            rid = f"{content_id}.{label}.detect.{pass_index}" + ("" if attempt == 1 else ".retry")
            request_ids.append(rid)
            try:
                issues = detect_issues(self.client, spec, prompt, content,
                                       pass_index=pass_index, request_id=rid)
            except PASS_FAILURES as exc:
                events.append(dict(kind="model_call", role=label, pass_index=pass_index,
                                   request_id=rid, outcome="pass_failed",
                                   error=str(exc)))
                continue
            events.append(dict(kind="model_call", role=label, pass_index=pass_index,
                               request_id=rid, outcome="ok", issues=len(issues)))
            return issues, events, request_ids
        return None, events, request_ids

    def _postprocess(self, issues: list[Issue], base: RuleBase,
                     in_scope: set[str], content: str) -> list[Issue]:
        out = []
        for issue in issues:
            issue = _anchor(issue, content)
            rule = base.get(issue.rule_id)
            if rule is not None and rule.amended_recommendation is not None:
                issue = replace(issue, recommendation=rule.amended_recommendation)
            if issue.rule_id not in in_scope:
                issue = replace(issue, out_of_scope=True)
            out.append(issue)
        return out

    # -- main entry ------------------------------------------------------------

    def run_qc(
        self,
        content: str,
        ctx: ContentContext,
        base: RuleBase,
        config: OrchestratorConfig,
        content_id: str | None = None,
    ) -> QCReport:
        if not content or not content.strip():
            raise ValueError("content must be non-empty")
        content_id = content_id or hashlib.sha256(content.encode("utf-8")).hexdigest()[:12]
        threshold = config.jaccard_threshold
        audit = _Audit()
        request_ids: list[str] = []

        fset: FilteredRuleSet = filter_rules(base, ctx)
        in_scope = set(fset.rule_ids())
        audit.add("filter_rules", rulebase_version=base.version,
                  rules=len(fset.rules))
        prompt = render_system_prompt(fset, config.template_id, self.template_dir)
        audit.add("render_prompt", template_id=config.template_id, chars=len(prompt))

        # Teacher and student detection run concurrently; results are merged
        # in fixed order so the report stays deterministic.
        with ThreadPoolExecutor(max_workers=2) as pool:
            teacher_future = pool.submit(
                self._detect_with_retry, config.teacher, prompt, content, 1,
                "teacher", content_id)
            student_future = pool.submit(
                self._detect_with_retry, config.student, prompt, content, 1,
                "student", content_id)
            teacher_issues, t_events, t_rids = teacher_future.result()
            student_issues, s_events, s_rids = student_future.result()
        for event in t_events + s_events:
            audit.add(**event)
        request_ids.extend(t_rids + s_rids)

        finals: list[FinalIssue] = []
        rejected: list[Verdict] = []
        unresolved: list[Issue] = []
        fates: dict[str, str] = {}

        if teacher_issues is None and student_issues is None:
            audit.add("degraded", cause="both detection passes failed")
            conflicts: list[Issue] = []
            agreed: list[Issue] = []
        elif teacher_issues is None or student_issues is None:
            surviving = teacher_issues if teacher_issues is not None else student_issues
            surviving = self._postprocess(surviving, base, in_scope, content)
            audit.add("degraded", cause="single-headed run",
                      surviving="teacher" if teacher_issues is not None else "student")
            agreed = []
            conflicts = list(surviving)
        else:
            teacher_issues = self._postprocess(teacher_issues, base, in_scope, content)
            student_issues = self._postprocess(student_issues, base, in_scope, content)
            consensus = diff_issues(teacher_issues, student_issues, threshold)
            audit.add("diff",
                      agreed=[i.uid for i in consensus.agreed],
                      teacher_only=[i.uid for i in consensus.teacher_only],
                      student_only=[i.uid for i in consensus.student_only],
                      absorbed={i.uid: list(uids) for i, uids in consensus.consolidated})
            agreed = consensus.agreed
            for issue, absorbed in consensus.consolidated:
                fates[issue.uid] = "agreed"
                for uid in absorbed:
                    fates[uid] = "agreed"
            conflicts = consensus.teacher_only + consensus.student_only

        for issue in agreed:
            finals.append(FinalIssue(issue=issue, resolution="agreed"))

        # Rules a human marked always-valid skip verification entirely.
        auto_validated = [c for c in conflicts
                          if (r := base.get(c.rule_id)) is not None and r.always_valid]
        if auto_validated:
            conflicts = [c for c in conflicts if c not in auto_validated]
            for issue in auto_validated:
                finals.append(FinalIssue(issue=issue, resolution="auto_validated"))
                fates[issue.uid] = "auto_validated"
            audit.add("auto_validate", uids=[i.uid for i in auto_validated])

        all_prior = list(agreed) + list(conflicts)
        round_no = 0
        while conflicts and round_no < config.max_rounds:
            round_no += 1
            vprompt = build_verification_prompt(conflicts, content, prompt)
            rid = f"{content_id}.verify.{round_no}"
            request_ids.append(rid)
            try:
                verdicts = verify_issues(self.client, config.teacher, vprompt,
                                         round_index=round_no, request_id=rid)
            except PASS_FAILURES as exc:
                audit.add("model_call", role="verifier", pass_index=round_no,
                          request_id=rid, outcome="pass_failed", error=str(exc))
                for issue in conflicts:
                    unresolved.append(issue)
                    fates[issue.uid] = "unresolved"
                audit.add("verification_failed", round=round_no,
                          unresolved=[i.uid for i in conflicts])
                conflicts = []
                break
            audit.add("model_call", role="verifier", pass_index=round_no,
                      request_id=rid, outcome="ok", verdicts=len(verdicts))
            verdicts = [
                replace(v, issue=self._postprocess([v.issue], base, in_scope, content)[0])
                for v in verdicts
            ]

            # Assign each conflict to the first verdict whose snippet covers it.
            coverage: dict[int, list[Issue]] = {i: [] for i in range(len(verdicts))}
            uncovered: list[Issue] = []
            for conflict in conflicts:
                for v_idx, verdict in enumerate(verdicts):
                    if jaccard(verdict.issue.context_snippet,
                               conflict.context_snippet) >= threshold:
                        coverage[v_idx].append(conflict)
                        break
                else:
                    uncovered.append(conflict)

            new_issues: list[Issue] = []
            for v_idx, verdict in enumerate(verdicts):
                covered = coverage[v_idx]
                covered_uids = [c.uid for c in covered]
                is_new = not any(issues_match(verdict.issue, prior, threshold)
                                 for prior in all_prior)
                audit.add("verdict", round=round_no, uid=verdict.issue.uid,
                          rule_id=verdict.issue.rule_id, is_valid=verdict.is_valid,
                          covered_uids=covered_uids, new=is_new,
                          justification=verdict.justification)
                if len(covered_uids) > 1:
                    audit.add("consolidation", round=round_no,
                              merged_into=verdict.issue.uid, absorbed=covered_uids)
                if verdict.is_valid:
                    finals.append(FinalIssue(issue=verdict.issue, resolution="verified",
                                             verdict=verdict))
                    for uid in covered_uids:
                        fates[uid] = "validated"
                    if is_new:
                        new_issues.append(verdict.issue)
                else:
                    rejected.append(verdict)
                    for uid in covered_uids:
                        fates[uid] = "rejected"
            for issue in uncovered:
                unresolved.append(issue)
                fates[issue.uid] = "unresolved"
                audit.add("uncovered_conflict", round=round_no, uid=issue.uid)

            all_prior.extend(v.issue for v in verdicts)
            conflicts = []
            if new_issues and round_no < config.max_rounds:
                audit.add("new_issues", round=round_no,
                          uids=[i.uid for i in new_issues])
                cc_issues, cc_events, cc_rids = self._detect_with_retry(
                    config.student, prompt, content, round_no + 1,
                    "student", content_id)
                for event in cc_events:
                    audit.add(**event)
                request_ids.extend(cc_rids)
                if cc_issues is None:
                    audit.add("cross_check_failed", round=round_no)
                else:
                    cc_issues = self._postprocess(cc_issues, base, in_scope, content)
                    confirmations, next_conflicts = [], []
                    current_finals = [f.issue for f in finals]
                    for issue in cc_issues:
                        if any(issues_match(issue, f, threshold) for f in current_finals):
                            confirmations.append(issue)
                            fates[issue.uid] = "agreed"
                        else:
                            next_conflicts.append(issue)
                    audit.add("cross_check", round=round_no,
                              confirmed=[i.uid for i in confirmations],
                              contested=[i.uid for i in next_conflicts])
                    all_prior.extend(cc_issues)
                    conflicts = next_conflicts

        # Round budget exhausted: whatever is still contested goes to review.
        for issue in conflicts:
            unresolved.append(issue)
            fates[issue.uid] = "unresolved"
            audit.add("round_budget_exhausted", uid=issue.uid)

        # Unanchored issues are hallucination signals: always human-reviewed,
        # on top of whatever classification they already carry.
        review_items: list[tuple[Issue, Verdict | None]] = [(i, None) for i in unresolved]
        for final in finals:
            if final.issue.unanchored:
                review_items.append((final.issue, final.verdict))
        for verdict in rejected:
            if verdict.issue.unanchored:
                review_items.append((verdict.issue, verdict))

        review_item_ids: list[str] = []
        if self.review_queue is not None:
            for issue, verdict in review_items:
                item_id = self.review_queue.enqueue_conflict(
                    content_id, issue,
                    teacher_position=verdict,
                    student_position=issue if issue.origin == "student" else None,
                    content=content,
                )
                review_item_ids.append(item_id)
                audit.add("enqueue", uid=issue.uid, item_id=item_id)

        return QCReport(
            content_id=content_id,
            context=ctx,
            rulebase_version=base.version,
            filtered_rule_ids=tuple(fset.rule_ids()),
            final_issues=finals,
            rejected=rejected,
            unresolved_for_review=unresolved,
            review_item_ids=review_item_ids,
            issue_fates=fates,
            audit=audit.events,
            usage_request_ids=request_ids,
        )
