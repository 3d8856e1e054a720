"""Hierarchical rule selection and detection-prompt rendering.

Rules are narrowed level by level in the fixed order
ip -> country -> use_case -> topic -> subtask. A rule survives a level when
it is untagged at that level (global), when the query omits that level, or
when its tags contain the query value (case-insensitive, NFC-normalized).
Every call produces a five-entry trace recording counts and exclusions per
level, so any selection is auditable after the fact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .errors import UnknownTemplateError
from .rulebase import (
    TAXONOMY_LEVELS,
    ContextSuppression,
    Polarity,
    Rule,
    RuleBase,
    RuleStatus,
    nfc,
)


def _norm(value: str) -> str:
    return nfc(value).casefold()


@dataclass(frozen=True)
class ContentContext:
    """Query describing the content being checked. Absent fields do not
    narrow at their level."""

    ip: str | None = None
    country: str | None = None
    use_case: str | None = None
    topic: str | None = None
    subtasks: frozenset[str] = frozenset()
    content_type: str | None = None

    def value_at(self, level: str) -> Any:
        return {
            "ip": self.ip,
            "country": self.country,
            "use_case": self.use_case,
            "topic": self.topic,
            "subtask": self.subtasks,
        }[level]

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for key in ("ip", "country", "use_case", "topic", "content_type"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        if self.subtasks:
            out["subtasks"] = sorted(self.subtasks)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "ContentContext":
        data = data or {}
        subtasks = data.get("subtasks") or ()
        if isinstance(subtasks, str):
            subtasks = [subtasks]
        return cls(
            ip=data.get("ip"),
            country=data.get("country"),
            use_case=data.get("use_case"),
            topic=data.get("topic"),
            subtasks=frozenset(subtasks),
            content_type=data.get("content_type"),
        )

    def scope_dict(self) -> dict[str, Any]:
        """The suppression-scope view of this context (taxonomy levels only)."""
        out: dict[str, Any] = {}
        for level in ("ip", "country", "use_case", "topic"):
            value = getattr(self, level)
            if value is not None:
                out[level] = value
        if self.subtasks:
            out["subtask"] = tuple(sorted(self.subtasks))
        return out


@dataclass(frozen=True)
class RuleBlockTrace:
    level: str
    query_value: Any
    rules_in: int
    rules_out: int
    excluded_rule_ids: tuple[str, ...]


@dataclass(frozen=True)
class FilteredRuleSet:
    rules: tuple[Rule, ...]
    trace: tuple[RuleBlockTrace, ...]
    context: ContentContext
    rulebase_version: int

    def rule_ids(self) -> list[str]:
        return [r.rule_id for r in self.rules]

    def to_dict(self) -> dict[str, Any]:
        return {
            "rulebase_version": self.rulebase_version,
            "context": self.context.to_dict(),
            "rules": [r.to_dict() for r in self.rules],
            "trace": [
                {
                    "level": t.level,
                    "query_value": list(t.query_value) if isinstance(t.query_value, tuple)
                    else t.query_value,
                    "rules_in": t.rules_in,
                    "rules_out": t.rules_out,
                    "excluded_rule_ids": list(t.excluded_rule_ids),
                }
                for t in self.trace
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)


def _survives_level(rule: Rule, level: str, query: Any) -> bool:
    tags = rule.taxonomy.at_level(level)
    if not tags:
        return True
    if level == "subtask":
        if not query:
            return True
        wanted = {_norm(v) for v in query}
        return bool(wanted & {_norm(t) for t in tags})
    if query is None:
        return True
    return _norm(query) in {_norm(t) for t in tags}


def suppression_matches(suppression: ContextSuppression, ctx: ContentContext) -> bool:
    """A scoped suppression applies only when every scope field matches the
    context explicitly; an absent context field never matches a scoped field.
    An empty scope matches everywhere."""
    for level, scope_value in suppression.scope:
        if level == "subtask":
            wanted = {_norm(v) for v in scope_value}
            if not ctx.subtasks or not wanted <= {_norm(v) for v in ctx.subtasks}:
                return False
        else:
            ctx_value = ctx.value_at(level)
            if ctx_value is None or _norm(ctx_value) != _norm(scope_value):
                return False
    return True


def filter_rules(base: RuleBase, ctx: ContentContext) -> FilteredRuleSet:
    """Select the applicable rules for `ctx` with a per-level trace.

    Globally suppressed rules and rules with a matching scoped suppression
    are dropped before level 1 (they do not appear in the trace counts).
    """
    suppressed_ids = {
        s.rule_id for s in base.suppressions if suppression_matches(s, ctx)
    }
    survivors = [
        r for r in base.all_rules()
        if r.status is not RuleStatus.SUPPRESSED and r.rule_id not in suppressed_ids
    ]
    trace: list[RuleBlockTrace] = []
    for level in TAXONOMY_LEVELS:
        query = ctx.value_at(level)
        if level == "subtask":
            query_value = tuple(sorted(query)) if query else None
        else:
            query_value = query
        rules_in = len(survivors)
        kept, excluded = [], []
        for rule in survivors:
            (kept if _survives_level(rule, level, query) else excluded).append(rule)
        trace.append(RuleBlockTrace(
            level=level,
            query_value=query_value,
            rules_in=rules_in,
            rules_out=len(kept),
            excluded_rule_ids=tuple(sorted(r.rule_id for r in excluded)),
        ))
        survivors = kept
    ordered = sorted(survivors, key=lambda r: (r.lrbtc_module, r.rule_id))
    return FilteredRuleSet(
        rules=tuple(ordered),
        trace=tuple(trace),
        context=ctx,
        rulebase_version=base.version,
    )


# --------------------------------------------------------------------------
# Prompt rendering
# --------------------------------------------------------------------------

ROLE_BLOCK = (
    "You are a meticulous content reviewer for regulated communications. "
    "Check the user's text against every quality-control rule listed below, "
    "and report each violation you find."
)

OUTPUT_FORMAT_BLOCK = (
    "Respond with a JSON object. The object must have a single key \"issues\" "
    "whose value is an array of objects, one per violation. Each object must "
    "carry exactly these keys:\n"
    "1. \"issue\": the rule ID of the violated rule (required).\n"
    "2. \"context\": the exact text snippet from the user's content where the "
    "violation occurs.\n"
    "3. \"recommendation\": a clear suggestion for fixing the violation.\n"
    "If no issues are found, return \"issues\": []."
)

PLACEHOLDERS = ("{{role}}", "{{do_rules}}", "{{prohibit_rules}}", "{{output_format}}")


def _default_template_dir() -> Path:
    return Path(str(resources.files("contentqc").joinpath("templates")))


def _render_rule_lines(rules: list[Rule]) -> str:
    if not rules:
        return "(no rules at this level)"
    return "\n".join(f"- {r.rule_id} {r.text}" for r in rules)


def render_system_prompt(
    fset: FilteredRuleSet,
    template_id: str = "default",
    template_dir: str | Path | None = None,
) -> str:
    """Render the detection system prompt from a template file.

    Templates are plain text with the placeholders {{role}}, {{do_rules}},
    {{prohibit_rules}} and {{output_format}}; `template_id` resolves to
    `<template_id>.txt` inside `template_dir` (falling back to the packaged
    templates).
    """
    candidates = []
    if template_dir is not None:
        candidates.append(Path(template_dir) / f"{template_id}.txt")
    candidates.append(_default_template_dir() / f"{template_id}.txt")
    for path in candidates:
        if path.is_file():
            template = path.read_text(encoding="utf-8")
            break
    else:
        raise UnknownTemplateError(f"no template named {template_id!r}")
    do_rules = [r for r in fset.rules if r.polarity is Polarity.DO]
    prohibit_rules = [r for r in fset.rules if r.polarity is Polarity.PROHIBIT]
    return (
        template
        .replace("{{role}}", ROLE_BLOCK)
        .replace("{{do_rules}}", _render_rule_lines(do_rules))
        .replace("{{prohibit_rules}}", _render_rule_lines(prohibit_rules))
        .replace("{{output_format}}", OUTPUT_FORMAT_BLOCK)
    )
