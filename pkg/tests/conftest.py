import json

import pytest

from contentqc.modelclient import MockBackend, ModelClient, ModelSpec, RoleHint, UsageLog
from contentqc.rulebase import Rule, Polarity, RuleBase, TaxonomyTags

# Exact wire-format skeleton for the extraction JSON contract.
SKELETON_JSON = json.dumps({
    "documentInfo": {
        "title": "Document Title Here",
        "content_about": "A brief description of this document.",
        "other_comments": "Any other general comments about the document.",
    },
    "sections": [
        {
            "title": "Title of the Rule Section",
            "content_about": "Description of this rule section.",
            "what_to_do": ["Rule 1 of what to do.", "Rule 2..."],
            "what_to_prohibit": ["Rule 1 of what to avoid.", "Rule 2..."],
            "other_comments": "Optional comments for this specific section.",
        }
    ],
})

# Synthetic style-guide document shaped like a spelling rule book:
# one do-section and one prohibited-terms section.
STYLE_GUIDE_JSON = json.dumps({
    "documentInfo": {
        "title": "House Style Guide",
        "content_about": "Spelling and terminology standards.",
        "other_comments": "Applies to all external communications.",
    },
    "sections": [
        {
            "title": "Spelling",
            "content_about": "Preferred spellings.",
            "what_to_do": [
                "Use UK English spelling throughout.",
                "Write numbers one to nine as words.",
                "Check product names against the approved list.",
            ],
            "what_to_prohibit": [],
        },
        {
            "title": "Prohibited terms",
            "content_about": "Terms that must never appear.",
            "what_to_do": [],
            "what_to_prohibit": [
                "Never describe any product as cheap.",
                "Do not promise guaranteed outcomes.",
            ],
        },
    ],
})


def make_rule(rule_id, text="rule text", polarity=Polarity.DO, module="L",
              countries=(), subtasks=(), topics=(), ips=(), use_cases=(), **kwargs):
    return Rule(
        rule_id=rule_id,
        text=text,
        polarity=polarity,
        lrbtc_module=module,
        taxonomy=TaxonomyTags(
            ip=frozenset(ips),
            countries=frozenset(countries),
            use_cases=frozenset(use_cases),
            topics=frozenset(topics),
            subtasks=frozenset(subtasks),
        ),
        **kwargs,
    )


@pytest.fixture
def skeleton_json():
    return SKELETON_JSON


@pytest.fixture
def style_guide_json():
    return STYLE_GUIDE_JSON


@pytest.fixture
def country_base():
    """10 rules: 3 tagged country UK, 2 tagged US, 5 untagged."""
    rules = (
        [make_rule(f"uk.{i}", countries={"UK"}) for i in range(1, 4)]
        + [make_rule(f"us.{i}", countries={"US"}) for i in range(1, 3)]
        + [make_rule(f"global.{i}") for i in range(1, 6)]
    )
    return RuleBase(rules, version=1)


TEACHER = ModelSpec(provider="mock", model_name="teacher-pro", role_hint=RoleHint.TEACHER)
STUDENT = ModelSpec(provider="mock", model_name="student-flash", role_hint=RoleHint.STUDENT)


def make_client(backend: MockBackend, pricing=None) -> ModelClient:
    return ModelClient({"mock": backend}, pricing=pricing, usage_log=UsageLog())


def issues_payload(*items) -> str:
    return json.dumps({"issues": list(items)})


def issue_item(rule_id, context, recommendation="fix it"):
    return {"issue": rule_id, "context": context, "recommendation": recommendation}


def verdict_item(rule_id, context, recommendation, is_valid):
    return {"issue": rule_id, "context": context,
            "recommendation": recommendation, "isValid": is_valid}


# ---------------------------------------------------------------------------
# Acceptance reporting: one PASS/FAIL line per criterion at session end.
# ---------------------------------------------------------------------------

_acceptance_results: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        _acceptance_results.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, outcome in _acceptance_results:
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{status}] {name}")
