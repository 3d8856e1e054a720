"""contentqc: rule-indexed content quality control.

Ingests rule-extraction JSON into a versioned rule base, selects applicable
rules by waterfall filtering, runs a student/teacher dual-model verification
loop over content, routes unresolved conflicts to a human review queue, and
scores detection quality with agreement and classification metrics.
"""

from . import errors
from .hitl import DecisionVerdict, FeedbackAction, HumanDecision, KnowledgeUpdate, ReviewQueue
from .modelclient import (
    ChatRequest,
    ChatResponse,
    MockBackend,
    ModelClient,
    ModelSpec,
    PricingTable,
    RoleHint,
    Usage,
    UsageLog,
    estimate_cost,
    extract_json,
    route,
    usage_summary,
)
from .orchestrator import (
    ConsensusReport,
    Issue,
    Orchestrator,
    OrchestratorConfig,
    QCReport,
    Verdict,
    build_verification_prompt,
    detect_issues,
    diff_issues,
    verify_issues,
)
from .rulebase import (
    Rule,
    RuleBase,
    RuleBaseStore,
    RuleDocument,
    TaxonomyTags,
    index_rules,
    lookup,
    parse_rule_document,
    serialize_rule_document,
    upsert_rules,
)
from .waterfall import ContentContext, FilteredRuleSet, filter_rules, render_system_prompt

__version__ = "0.1.0"

__all__ = [
    "ChatRequest",
    "ChatResponse",
    "ConsensusReport",
    "ContentContext",
    "DecisionVerdict",
    "FeedbackAction",
    "FilteredRuleSet",
    "HumanDecision",
    "Issue",
    "KnowledgeUpdate",
    "MockBackend",
    "ModelClient",
    "ModelSpec",
    "Orchestrator",
    "OrchestratorConfig",
    "PricingTable",
    "QCReport",
    "ReviewQueue",
    "RoleHint",
    "Rule",
    "RuleBase",
    "RuleBaseStore",
    "RuleDocument",
    "TaxonomyTags",
    "Usage",
    "UsageLog",
    "Verdict",
    "build_verification_prompt",
    "detect_issues",
    "diff_issues",
    "errors",
    "estimate_cost",
    "extract_json",
    "filter_rules",
    "index_rules",
    "lookup",
    "parse_rule_document",
    "render_system_prompt",
    "route",
    "serialize_rule_document",
    "upsert_rules",
    "usage_summary",
    "verify_issues",
]
