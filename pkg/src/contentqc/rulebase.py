"""Parsing and indexing of extracted rule documents.

A rule document is the JSON produced by the extraction step: document info
plus sections, each section carrying verbatim "what to do" and "what to
prohibit" rule texts. This module turns those documents into :class:`Rule`
records with stable, deterministic ids and keeps them in an immutable,
versioned :class:`RuleBase`.

Rule texts are stored verbatim as parsed: the only normalization applied is
NFC unicode normalization and a surrounding-whitespace trim. Nothing here
rephrases or rewrites rule content.
"""

from __future__ import annotations

import json
import re
import threading
import unicodedata
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import DuplicateIdError, JsonError, SchemaError

LRBTC_MODULES = ("L", "R", "B", "T", "C")

TAXONOMY_LEVELS = ("ip", "country", "use_case", "topic", "subtask")


def nfc(text: str) -> str:
    return unicodedata.normalize("NFC", text)


def slugify(title: str) -> str:
    """Lowercase a document title and collapse non-alphanumerics to '-'."""
    slug = re.sub(r"[^a-z0-9]+", "-", nfc(title).lower()).strip("-")
    return slug or "doc"


class Polarity(str, Enum):
    DO = "do"
    PROHIBIT = "prohibit"


class RuleStatus(str, Enum):
    ACTIVE = "active"
    SUPPRESSED = "suppressed"
    HUMAN_OVERRIDDEN = "human_overridden"


# --------------------------------------------------------------------------
# Parsed document types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DocumentInfo:
    title: str
    content_about: str = ""
    other_comments: str = ""


@dataclass(frozen=True)
class RuleSection:
    title: str
    content_about: str = ""
    what_to_do: tuple[str, ...] = ()
    what_to_prohibit: tuple[str, ...] = ()
    other_comments: str | None = None


@dataclass(frozen=True)
class RuleDocument:
    document_info: DocumentInfo
    sections: tuple[RuleSection, ...]


def _expect_str(obj: Mapping[str, Any], key: str, where: str, *, required: bool,
                default: str = "") -> str:
    if key not in obj:
        if required:
            raise SchemaError(f"{where}: missing required key '{key}'")
        return default
    value = obj[key]
    if not isinstance(value, str):
        raise SchemaError(f"{where}: key '{key}' must be a string")
    return nfc(value)


def _parse_rule_list(obj: Mapping[str, Any], key: str, where: str) -> tuple[str, ...]:
    raw = obj.get(key, [])
    if not isinstance(raw, list):
        raise SchemaError(f"{where}: key '{key}' must be a list")
    items: list[str] = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, str):
            raise SchemaError(f"{where}: {key}[{i}] must be a string")
        text = nfc(entry).strip()
        if not text:
            raise SchemaError(f"{where}: {key}[{i}] is empty after trimming")
        items.append(text)
    return tuple(items)


def parse_rule_document(raw_json: str) -> RuleDocument:
    """Parse extraction JSON into a :class:`RuleDocument`.

    Unknown extra keys are ignored; missing required keys raise
    :class:`SchemaError`; non-JSON input raises :class:`JsonError`.
    """
    try:
        data = json.loads(raw_json)
    except (json.JSONDecodeError, TypeError) as exc:
        raise JsonError(f"rule document is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise SchemaError("rule document must be a JSON object")
    if "documentInfo" not in data:
        raise SchemaError("missing required key 'documentInfo'")
    if "sections" not in data:
        raise SchemaError("missing required key 'sections'")
    info_raw = data["documentInfo"]
    if not isinstance(info_raw, dict):
        raise SchemaError("'documentInfo' must be an object")
    title = _expect_str(info_raw, "title", "documentInfo", required=True)
    if not title.strip():
        raise SchemaError("documentInfo.title must be non-empty")
    info = DocumentInfo(
        title=title,
        content_about=_expect_str(info_raw, "content_about", "documentInfo", required=False),
        other_comments=_expect_str(info_raw, "other_comments", "documentInfo", required=False),
    )
    sections_raw = data["sections"]
    if not isinstance(sections_raw, list):
        raise SchemaError("'sections' must be a list")
    sections: list[RuleSection] = []
    for i, sec in enumerate(sections_raw):
        where = f"sections[{i}]"
        if not isinstance(sec, dict):
            raise SchemaError(f"{where}: must be an object")
        sec_title = _expect_str(sec, "title", where, required=True)
        other = sec.get("other_comments")
        if other is not None and not isinstance(other, str):
            raise SchemaError(f"{where}: key 'other_comments' must be a string")
        sections.append(RuleSection(
            title=sec_title,
            content_about=_expect_str(sec, "content_about", where, required=False),
            what_to_do=_parse_rule_list(sec, "what_to_do", where),
            what_to_prohibit=_parse_rule_list(sec, "what_to_prohibit", where),
            other_comments=nfc(other) if other is not None else None,
        ))
    return RuleDocument(document_info=info, sections=tuple(sections))


def serialize_rule_document(doc: RuleDocument) -> str:
    """Render a :class:`RuleDocument` back to its wire JSON shape."""
    payload: dict[str, Any] = {
        "documentInfo": {
            "title": doc.document_info.title,
            "content_about": doc.document_info.content_about,
            "other_comments": doc.document_info.other_comments,
        },
        "sections": [],
    }
    for sec in doc.sections:
        entry: dict[str, Any] = {
            "title": sec.title,
            "content_about": sec.content_about,
            "what_to_do": list(sec.what_to_do),
            "what_to_prohibit": list(sec.what_to_prohibit),
        }
        if sec.other_comments is not None:
            entry["other_comments"] = sec.other_comments
        payload["sections"].append(entry)
    return json.dumps(payload, ensure_ascii=False, indent=2)


# --------------------------------------------------------------------------
# Rules and taxonomy
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TaxonomyTags:
    """Per-level scope tags. An empty set at a level means the rule is
    global at that level (matches every value)."""

    ip: frozenset[str] = frozenset()
    countries: frozenset[str] = frozenset()
    use_cases: frozenset[str] = frozenset()
    topics: frozenset[str] = frozenset()
    subtasks: frozenset[str] = frozenset()

    def at_level(self, level: str) -> frozenset[str]:
        return {
            "ip": self.ip,
            "country": self.countries,
            "use_case": self.use_cases,
            "topic": self.topics,
            "subtask": self.subtasks,
        }[level]

    def to_dict(self) -> dict[str, list[str]]:
        out = {}
        for key, values in (("ip", self.ip), ("countries", self.countries),
                            ("use_cases", self.use_cases), ("topics", self.topics),
                            ("subtasks", self.subtasks)):
            if values:
                out[key] = sorted(values)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None) -> "TaxonomyTags":
        data = data or {}
        def as_set(key: str) -> frozenset[str]:
            raw = data.get(key) or ()
            if isinstance(raw, str):
                raw = [raw]
            return frozenset(nfc(v) for v in raw)
        return cls(
            ip=as_set("ip"),
            countries=as_set("countries"),
            use_cases=as_set("use_cases"),
            topics=as_set("topics"),
            subtasks=as_set("subtasks"),
        )


@dataclass(frozen=True)
class RuleSource:
    document_title: str
    section_title: str
    ordinal: int


@dataclass(frozen=True)
class Rule:
    """One verbatim rule with its taxonomy tags and lifecycle status.

    `always_valid` and `amended_recommendation` are human-feedback
    annotations; the rule text itself is never edited.
    """

    rule_id: str
    text: str
    polarity: Polarity
    lrbtc_module: str = "L"
    taxonomy: TaxonomyTags = field(default_factory=TaxonomyTags)
    source: RuleSource | None = None
    status: RuleStatus = RuleStatus.ACTIVE
    always_valid: bool = False
    amended_recommendation: str | None = None

    def __post_init__(self) -> None:
        if self.lrbtc_module not in LRBTC_MODULES:
            raise ValueError(f"unknown LRBTC module {self.lrbtc_module!r}")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "rule_id": self.rule_id,
            "text": self.text,
            "polarity": self.polarity.value,
            "lrbtc_module": self.lrbtc_module,
            "taxonomy": self.taxonomy.to_dict(),
            "status": self.status.value,
        }
        if self.source is not None:
            out["source"] = {
                "document_title": self.source.document_title,
                "section_title": self.source.section_title,
                "ordinal": self.source.ordinal,
            }
        if self.always_valid:
            out["always_valid"] = True
        if self.amended_recommendation is not None:
            out["amended_recommendation"] = self.amended_recommendation
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Rule":
        source = None
        if "source" in data and data["source"] is not None:
            src = data["source"]
            source = RuleSource(src["document_title"], src["section_title"], src["ordinal"])
        return cls(
            rule_id=data["rule_id"],
            text=data["text"],
            polarity=Polarity(data["polarity"]),
            lrbtc_module=data.get("lrbtc_module", "L"),
            taxonomy=TaxonomyTags.from_dict(data.get("taxonomy")),
            source=source,
            status=RuleStatus(data.get("status", "active")),
            always_valid=bool(data.get("always_valid", False)),
            amended_recommendation=data.get("amended_recommendation"),
        )


def index_rules(
    doc: RuleDocument,
    default_tags: TaxonomyTags | None = None,
    module_assignment: Mapping[str, str] | None = None,
    section_tags: Mapping[str, TaxonomyTags] | None = None,
) -> list[Rule]:
    """Produce one :class:`Rule` per do/prohibit item, with deterministic ids.

    Ids follow ``<doc-slug>.<section-ordinal>.<D|P>.<item-ordinal>``; sections
    without a module assignment default to module L. `section_tags` overrides
    `default_tags` per section title.
    """
    default_tags = default_tags or TaxonomyTags()
    module_assignment = module_assignment or {}
    section_tags = section_tags or {}
    doc_slug = slugify(doc.document_info.title)
    rules: list[Rule] = []
    seen: set[str] = set()
    for s_idx, section in enumerate(doc.sections, start=1):
        module = module_assignment.get(section.title, "L")
        tags = section_tags.get(section.title, default_tags)
        for marker, polarity, texts in (
            ("D", Polarity.DO, section.what_to_do),
            ("P", Polarity.PROHIBIT, section.what_to_prohibit),
        ):
            for i_idx, text in enumerate(texts, start=1):
                rule_id = f"{doc_slug}.{s_idx}.{marker}.{i_idx}"
                if rule_id in seen:
                    raise DuplicateIdError(f"rule id collision: {rule_id}")
                seen.add(rule_id)
                rules.append(Rule(
                    rule_id=rule_id,
                    text=text,
                    polarity=polarity,
                    lrbtc_module=module,
                    taxonomy=tags,
                    source=RuleSource(
                        document_title=doc.document_info.title,
                        section_title=section.title,
                        ordinal=i_idx,
                    ),
                ))
    return rules


# --------------------------------------------------------------------------
# Rule base
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ContextSuppression:
    """Scoped suppression: the rule is dropped for contexts matching `scope`.

    `scope` is a tuple of (level, value) pairs; subtask scope values are
    tuples of strings. Matching semantics live in the waterfall module.
    """

    rule_id: str
    scope: tuple[tuple[str, Any], ...]
    note: str = ""

    @classmethod
    def make(cls, rule_id: str, scope: Mapping[str, Any], note: str = "") -> "ContextSuppression":
        items = []
        for key in TAXONOMY_LEVELS:
            if key in scope and scope[key]:
                value = scope[key]
                if isinstance(value, (set, frozenset, list)):
                    value = tuple(sorted(value))
                items.append((key, value))
        return cls(rule_id=rule_id, scope=tuple(items), note=note)

    def scope_dict(self) -> dict[str, Any]:
        return dict(self.scope)


class RuleBase:
    """Immutable, versioned collection of rules.

    Mutating operations (`upsert`, `with_rule`, `with_suppression`) return a
    new RuleBase with the version incremented; existing snapshots are never
    modified, so they are safe to share across threads.
    """

    def __init__(self, rules: Iterable[Rule] = (), version: int = 0,
                 suppressions: Iterable[ContextSuppression] = ()) -> None:
        self._rules: dict[str, Rule] = {}
        for rule in rules:
            self._rules[rule.rule_id] = rule
        self._version = version
        self._suppressions = tuple(suppressions)
        self._level_index: dict[str, dict[str, set[str]]] = {}
        self._global_index: dict[str, set[str]] = {}
        self._build_indexes()

    def _build_indexes(self) -> None:
        for level in TAXONOMY_LEVELS:
            by_value: dict[str, set[str]] = {}
            global_ids: set[str] = set()
            for rule in self._rules.values():
                tags = rule.taxonomy.at_level(level)
                if not tags:
                    global_ids.add(rule.rule_id)
                else:
                    for tag in tags:
                        by_value.setdefault(nfc(tag).casefold(), set()).add(rule.rule_id)
            self._level_index[level] = by_value
            self._global_index[level] = global_ids

    # -- read side ---------------------------------------------------------

    @property
    def version(self) -> int:
        return self._version

    @property
    def suppressions(self) -> tuple[ContextSuppression, ...]:
        return self._suppressions

    def __len__(self) -> int:
        return len(self._rules)

    def __contains__(self, rule_id: str) -> bool:
        return rule_id in self._rules

    def all_rules(self) -> list[Rule]:
        return list(self._rules.values())

    def get(self, rule_id: str) -> Rule | None:
        return self._rules.get(rule_id)

    def ids_at_level(self, level: str, value: str) -> set[str]:
        """Ids of rules matching `value` at `level` (tagged with it or global)."""
        tagged = self._level_index[level].get(nfc(value).casefold(), set())
        return tagged | self._global_index[level]

    def global_ids_at_level(self, level: str) -> set[str]:
        return set(self._global_index[level])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RuleBase):
            return NotImplemented
        return (self._rules == other._rules
                and self._version == other._version
                and self._suppressions == other._suppressions)

    # -- write side (copy-on-write) ----------------------------------------

    def upsert(self, rules: Iterable[Rule]) -> "RuleBase":
        merged = dict(self._rules)
        for rule in rules:
            merged[rule.rule_id] = rule
        return RuleBase(merged.values(), self._version + 1, self._suppressions)

    def with_rule(self, rule: Rule) -> "RuleBase":
        return self.upsert([rule])

    def with_suppression(self, suppression: ContextSuppression) -> "RuleBase":
        return RuleBase(self._rules.values(), self._version + 1,
                        self._suppressions + (suppression,))


def upsert_rules(base: RuleBase, rules: Iterable[Rule]) -> RuleBase:
    """Insert or replace rules by id; bumps the version once per call."""
    return base.upsert(rules)


def lookup(base: RuleBase, rule_id: str) -> Rule | None:
    """Fetch a rule by id, or None when absent. Never raises."""
    return base.get(rule_id)


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------

def rulebase_to_dict(base: RuleBase) -> dict[str, Any]:
    return {
        "schema_version": 1,
        "version": base.version,
        "rules": [r.to_dict() for r in base.all_rules()],
        "suppressions": [
            {"rule_id": s.rule_id, "scope": s.scope_dict(), "note": s.note}
            for s in base.suppressions
        ],
    }


def rulebase_from_dict(data: Mapping[str, Any]) -> RuleBase:
    rules = [Rule.from_dict(r) for r in data.get("rules", [])]
    suppressions = [
        ContextSuppression.make(s["rule_id"], s.get("scope", {}), s.get("note", ""))
        for s in data.get("suppressions", [])
    ]
    return RuleBase(rules, int(data.get("version", 0)), suppressions)


def save_rulebase(base: RuleBase, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(rulebase_to_dict(base), ensure_ascii=False, indent=2),
                   encoding="utf-8")
    tmp.replace(path)


def load_rulebase(path: str | Path) -> RuleBase:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise JsonError(f"rule base file is not valid JSON: {exc}") from exc
    return rulebase_from_dict(data)


class RuleBaseStore:
    """Thread-safe holder for the current rule base snapshot.

    Readers take snapshots via `get()`; writers replace the snapshot through
    `swap()`/`apply()`, serialized by a lock. Optionally persists every new
    version to disk.
    """

    def __init__(self, base: RuleBase | None = None, path: str | Path | None = None):
        self._lock = threading.Lock()
        self._path = Path(path) if path else None
        if base is None and self._path and self._path.exists():
            base = load_rulebase(self._path)
        self._base = base if base is not None else RuleBase()

    def get(self) -> RuleBase:
        with self._lock:
            return self._base

    def swap(self, base: RuleBase) -> None:
        with self._lock:
            self._base = base
            if self._path:
                save_rulebase(base, self._path)

    def apply(self, fn) -> RuleBase:
        """Atomically replace the snapshot with fn(current)."""
        with self._lock:
            self._base = fn(self._base)
            if self._path:
                save_rulebase(self._base, self._path)
            return self._base
