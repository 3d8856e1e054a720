"""Acceptance criteria, one test per criterion, each with a runtime budget.

Each test prints into the terminal summary as a PASS/FAIL line (see
conftest). Expected values come from independent oracles in tests/oracles.py
or from hand arithmetic; none are produced by the code paths under test.
"""

import itertools
import json
import random
import string
import time
import unicodedata

import pytest

from contentqc.errors import AlreadyDecided, DegenerateMarginals, ZeroVariance
from contentqc.evalharness import (
    ConfusionCounts,
    ErrorSpan,
    LabeledSample,
    PredictionRecord,
    bias_mae,
    classification_metrics,
    per_class_recall,
    spearman,
    weighted_kappa,
)
from contentqc.hitl import (
    DecisionVerdict,
    FeedbackAction,
    HumanDecision,
    KnowledgeUpdate,
    ReviewQueue,
)
from contentqc.modelclient import (
    MockBackend,
    ModelSpec,
    PricingTable,
    Rate,
    Usage,
    UsageRecord,
    estimate_cost,
    usage_summary,
)
from contentqc.orchestrator import (
    VERIFIER_SYSTEM,
    Issue,
    Orchestrator,
    OrchestratorConfig,
    build_verification_prompt,
)
from contentqc.rulebase import (
    RuleBase,
    RuleBaseStore,
    index_rules,
    parse_rule_document,
    serialize_rule_document,
    upsert_rules,
)
from contentqc.waterfall import ContentContext, filter_rules, render_system_prompt

from .conftest import (
    STUDENT,
    TEACHER,
    issue_item,
    issues_payload,
    make_client,
    make_rule,
    verdict_item,
)
from .oracles import kappa_bruteforce, waterfall_bruteforce


class Budget:
    """Context manager asserting a wall-clock budget for one criterion."""

    def __init__(self, seconds: float):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            elapsed = time.perf_counter() - self.start
            assert elapsed < self.seconds, (
                f"criterion exceeded its runtime budget: {elapsed:.2f}s "
                f">= {self.seconds}s")
        return False


# ---------------------------------------------------------------------------
# Criterion 1: metrics formula fidelity
# ---------------------------------------------------------------------------

def test_metrics_formula_recall_exact():
    with Budget(1.0):
        for fp, tn in [(0, 0), (30, 10), (5, 35), (17, 3)]:
            metrics = classification_metrics(ConfusionCounts(tp=78, fp=fp, tn=tn, fn=2))
            assert metrics["recall"] == 0.975


def test_metrics_formula_f1_pinned_tolerance():
    """f1(P=0.721, R=0.975) must equal 0.830 within ±0.0005 as pinned.

    The harmonic mean of exactly (0.721, 0.975) is 0.82898, which misses the
    pinned tolerance by ~0.0005: an F1 of 0.830 is consistent only with
    unrounded precision (such as 78/108 = 0.7222). The check is asserted as
    pinned rather than loosened, so this test is expected to fail.
    """
    with Budget(1.0):
        p, r = 0.721, 0.975
        f1 = 2 * p * r / (p + r)
        assert abs(f1 - 0.830) <= 0.0005, (
            f"f1({p}, {r}) = {f1:.6f}; |{f1:.6f} - 0.830| = "
            f"{abs(f1 - 0.830):.6f} > 0.0005 (unattainable as pinned; "
            "0.830 is reachable only from unrounded precision, e.g. "
            "tp=78, fp=30 gives P=0.7222 and f1=0.8298)")


# ---------------------------------------------------------------------------
# Criterion 2: kappa oracle equivalence (exhaustive sweep)
# ---------------------------------------------------------------------------

def test_kappa_oracle_equivalence_exhaustive():
    with Budget(60.0):
        checked = 0
        for n in range(2, 6):
            vectors = list(itertools.product((1, 2, 3), repeat=n))
            for a in vectors:
                for b in vectors:
                    expected = kappa_bruteforce(list(a), list(b), 3)
                    if expected is None:
                        with pytest.raises(DegenerateMarginals):
                            weighted_kappa(list(a), list(b), 3)
                    else:
                        got = weighted_kappa(list(a), list(b), 3)
                        assert abs(got - expected) <= 1e-9, (a, b, got, expected)
                    checked += 1
        assert checked == sum(9 ** n for n in range(2, 6))


# ---------------------------------------------------------------------------
# Criterion 3: agreement metric properties on randomized vectors
# ---------------------------------------------------------------------------

def test_agreement_metric_properties_randomized():
    with Budget(10.0):
        rng = random.Random(2026)
        for _ in range(1000):
            n = rng.randint(2, 25)
            k = rng.randint(2, 5)
            a = [rng.randint(1, k) for _ in range(n)]
            b = [rng.randint(1, k) for _ in range(n)]
            try:
                kappa = weighted_kappa(a, b, k)
                assert -1.0 - 1e-9 <= kappa <= 1.0 + 1e-9
            except DegenerateMarginals:
                pass
            try:
                rho = spearman(a, b)
                assert -1.0 - 1e-9 <= rho <= 1.0 + 1e-9
                # strictly monotone transforms leave rho unchanged
                transformed = [x ** 3 + 0.5 * x for x in a]
                assert spearman(transformed, b) == pytest.approx(rho, abs=1e-9)
            except ZeroVariance:
                pass
            result = bias_mae([float(x) for x in a], [float(y) for y in b])
            assert abs(result["bias"]) <= result["mae"] + 1e-12


# ---------------------------------------------------------------------------
# Criterion 4: per-class recall fixture
# ---------------------------------------------------------------------------

def test_per_class_recall_fixture():
    with Budget(1.0):
        plan = [
            ("Misspelling", 200, 185, 92.50),
            ("ToSplitToMerge", 100, 65, 65.00),
            ("Punctuation", 60, 25, 41.67),
            ("Grammar", 100, 25, 25.00),
            ("InformalNonword", 40, 5, 12.50),
        ]
        golds, preds = [], []
        for cls, gt, detected, _ in plan:
            for i in range(gt):
                sid = f"{cls}-{i}"
                span = ErrorSpan(0, 10, cls)
                golds.append(LabeledSample(sample_id=sid, text="x" * 20,
                                           gold_label="violation",
                                           error_annotations=(span,)))
                hits = (ErrorSpan(5, 12, cls),) if i < detected else ()
                preds.append(PredictionRecord(sample_id=sid,
                                              predicted_label="violation",
                                              detected_errors=hits))
        recalls = {r.error_class: r for r in per_class_recall(golds, preds)}
        for cls, gt, detected, expected_pct in plan:
            entry = recalls[cls]
            assert (entry.gt_count, entry.detected_count) == (gt, detected)
            assert round(entry.recall * 100, 2) == expected_pct


# ---------------------------------------------------------------------------
# Criterion 5: waterfall equals brute-force predicate oracle
# ---------------------------------------------------------------------------

def _synthetic_base(rng: random.Random, n_rules: int = 50) -> RuleBase:
    pools = {
        "ips": ["acme", "globex", "initech"],
        "countries": ["UK", "US", "DE", "JP", "FR"],
        "use_cases": ["email", "website", "claim", "leaflet"],
        "topics": ["oncology", "cardio", "neuro", "derma"],
        "subtasks": ["grammar", "spelling", "citation", "format"],
    }
    rules = []
    for i in range(n_rules):
        kwargs = {}
        for field, pool in pools.items():
            if rng.random() < 0.45:
                kwargs[field] = frozenset(rng.sample(pool, rng.randint(1, 2)))
        rules.append(make_rule(f"r.{i:02d}", module=rng.choice("LRBTC"), **kwargs))
    return RuleBase(rules, version=1)


def _random_ctx(rng: random.Random) -> ContentContext:
    def maybe(pool):
        return rng.choice(pool) if rng.random() < 0.6 else None
    subtasks = (frozenset(rng.sample(["grammar", "spelling", "citation", "format"],
                                     rng.randint(1, 2)))
                if rng.random() < 0.5 else frozenset())
    return ContentContext(
        ip=maybe(["acme", "globex", "initech", "umbrella"]),
        country=maybe(["UK", "US", "DE", "JP", "XX"]),
        use_case=maybe(["email", "website", "claim", "none-such"]),
        topic=maybe(["oncology", "cardio", "neuro", "unknown"]),
        subtasks=subtasks,
    )


def test_waterfall_matches_bruteforce_oracle():
    with Budget(5.0):
        rng = random.Random(99)
        base = _synthetic_base(rng, 50)
        for _ in range(200):
            ctx = _random_ctx(rng)
            fset = filter_rules(base, ctx)
            assert set(fset.rule_ids()) == waterfall_bruteforce(base, ctx)
            assert len(fset.trace) == 5
            for prev, nxt in zip(fset.trace, fset.trace[1:]):
                assert prev.rules_out == nxt.rules_in
            assert fset.trace[-1].rules_out == len(fset.rules)


# ---------------------------------------------------------------------------
# Criterion 6: orchestration end-to-end determinism and invariants
# ---------------------------------------------------------------------------

CONTENT = "The results ocured quickly and the cheap option was chosen."


def _qc_base() -> RuleBase:
    return RuleBase([
        make_rule("1.3", text="Use the approved spelling for every term."),
        make_rule("2.1", text="Never describe any product as cheap.", module="R"),
    ], version=1)


def _scenario_clean():
    return issues_payload(), issues_payload(), [], []


def _scenario_validated():
    teacher = issues_payload(issue_item("1.3", "ocured", "write occurred"))
    student = issues_payload(issue_item("1.3", "ocured", "write occurred"),
                             issue_item("2.1", "cheap option", "drop cheap"))
    conflict = Issue(rule_id="2.1", context_snippet="cheap option",
                     recommendation="drop cheap", origin="student")
    verify = issues_payload(verdict_item("2.1", "cheap option", "valid violation", True))
    return teacher, student, [verify], [[conflict]]


def _scenario_rejected():
    student = issues_payload(issue_item("2.1", "cheap option", "drop cheap"))
    conflict = Issue(rule_id="2.1", context_snippet="cheap option",
                     recommendation="drop cheap", origin="student")
    verify = issues_payload(
        verdict_item("2.1", "cheap option", "quoted text, not a claim", False))
    return issues_payload(), student, [verify], [[conflict]]


def _run_scenario(scenario) -> "QCReport":
    teacher, student, verifies, conflict_rounds = scenario()
    base = _qc_base()
    prompt = render_system_prompt(filter_rules(base, ContentContext()))
    backend = MockBackend()
    backend.script(prompt, CONTENT, teacher, model_name="teacher-pro")
    backend.script(prompt, CONTENT, student, model_name="student-flash")
    for conflicts, payload in zip(conflict_rounds, verifies):
        vprompt = build_verification_prompt(list(conflicts), CONTENT, prompt)
        backend.script(VERIFIER_SYSTEM, vprompt, payload, model_name="teacher-pro")
    orch = Orchestrator(make_client(backend), review_queue=ReviewQueue())
    return orch.run_qc(CONTENT, ContentContext(), base,
                       OrchestratorConfig(teacher=TEACHER, student=STUDENT))


def _detection_uids(report) -> set[str]:
    uids = set()
    for event in report.audit:
        detail = event.detail
        if (event.kind == "model_call" and detail.get("outcome") == "ok"
                and detail.get("role") in ("teacher", "student")):
            prefix = detail["role"][0]
            uids |= {f"{prefix}{detail['pass_index']}.{i}"
                     for i in range(1, detail["issues"] + 1)}
    return uids


def _assert_invariants(report) -> None:
    # partition of the diff outcome
    diff_events = [e for e in report.audit if e.kind == "diff"]
    for event in diff_events:
        agreed = len(event.detail["agreed"])
        t_only = len(event.detail["teacher_only"])
        s_only = len(event.detail["student_only"])
        absorbed = sum(len(v) for v in event.detail["absorbed"].values())
        total_teacher = agreed + t_only
        total_student = absorbed + s_only
        assert agreed + t_only + s_only == total_teacher + total_student - agreed
    # no silent drops: every detection-pass issue has exactly one fate
    assert set(report.issue_fates) == _detection_uids(report)
    allowed = {"agreed", "validated", "auto_validated", "rejected", "unresolved"}
    assert set(report.issue_fates.values()) <= allowed
    # unresolved issues were all enqueued
    assert len(report.review_item_ids) >= len(report.unresolved_for_review)


def test_orchestration_end_to_end_deterministic():
    with Budget(10.0):
        for scenario in (_scenario_clean, _scenario_validated, _scenario_rejected):
            serialized = set()
            for _ in range(10):
                report = _run_scenario(scenario)
                _assert_invariants(report)
                serialized.add(report.canonical_json())
            assert len(serialized) == 1, "reports differ across repeated runs"


# ---------------------------------------------------------------------------
# Criterion 7: HITL event sourcing
# ---------------------------------------------------------------------------

def test_hitl_event_sourcing_replay():
    with Budget(5.0):
        store = RuleBaseStore(RuleBase(
            [make_rule("1.3", countries={"UK", "US"}), make_rule("2.1")], version=1))
        queue = ReviewQueue(rulebase_store=store)

        item_ids = []
        for i in range(20):
            issue = Issue(rule_id="1.3" if i % 2 else "2.1",
                          context_snippet=f"snippet number {i}",
                          recommendation="fix", origin="student", uid=f"s1.{i}")
            item_ids.append(queue.enqueue_conflict(f"content-{i % 4}", issue))
        assert len(set(item_ids)) == 20
        assert len(queue.list_pending()) == 20

        for i in range(9):
            verdict = (DecisionVerdict.ACCEPT_VIOLATION if i % 2 == 0
                       else DecisionVerdict.REJECT_FLAG)
            queue.decide(item_ids[i], HumanDecision(
                verdict=verdict, justification=f"decision {i}", reviewer_id="rev"))

        # decision 10 carries a knowledge update that flips a filter result
        before = filter_rules(store.get(), ContentContext(country="US"))
        assert "1.3" in before.rule_ids()
        queue.decide(item_ids[9], HumanDecision(
            verdict=DecisionVerdict.REJECT_FLAG,
            justification="rule does not apply to US material",
            reviewer_id="rev",
            knowledge_update=KnowledgeUpdate(
                rule_id="1.3", action=FeedbackAction.SUPPRESS_IN_CONTEXT,
                scope=ContentContext(country="US"))))
        after = filter_rules(store.get(), ContentContext(country="US"))
        assert "1.3" not in after.rule_ids()
        assert "1.3" in filter_rules(store.get(), ContentContext(country="UK")).rule_ids()

        # duplicate decide is rejected
        with pytest.raises(AlreadyDecided):
            queue.decide(item_ids[0], HumanDecision(
                verdict=DecisionVerdict.ACCEPT_VIOLATION,
                justification="second opinion", reviewer_id="rev2"))

        assert len(queue.list_pending()) == 10
        events = queue.export_audit()
        assert sum(1 for e in events if e["type"] == "enqueued") == 20
        assert sum(1 for e in events if e["type"] == "decided") == 10
        rebuilt = ReviewQueue.replay(events)
        assert rebuilt.state_fingerprint() == queue.state_fingerprint()


# ---------------------------------------------------------------------------
# Criterion 8: cost accounting
# ---------------------------------------------------------------------------

def test_cost_accounting_pinned_rows():
    with Budget(2.0):
        rows = [
            ("gemini-2.5-pro", 2400, 1.4125, 3.39),
            ("claude", 11000, 0.3191, 3.51),
            ("gemini-2.5-flash", 1900, 0.3368, 0.64),
        ]
        pricing = PricingTable()
        for model, _, rate, _ in rows:
            pricing.set("live", model, Rate(cents_per_1k=rate))
        for model, tokens, _, expected in rows:
            spec = ModelSpec(provider="live", model_name=model)
            cost = estimate_cost(Usage(tokens, 0), pricing, spec)
            assert abs(cost - expected) <= 0.005, (model, cost, expected)

        records = []
        for i in range(2000):
            records.append(UsageRecord(
                request_id=f"r{i}", provider="live", model_name="gemini-2.5-pro",
                usage=Usage(6150, 0), cost_cents=2.045,
                latency_ms=2010 if i % 2 == 0 else 1900,
                timestamp="2026-01-01T00:00:00+00:00"))
        summary = usage_summary(records)
        assert summary["total_tokens"] == 12_300_000
        assert summary["total_requests"] == 2000
        assert summary["tokens_per_request"] == 6150


# ---------------------------------------------------------------------------
# Criterion 9: rule-document round-trip on fuzzed documents
# ---------------------------------------------------------------------------

def _fuzz_document(rng: random.Random) -> dict:
    alphabet = string.ascii_letters + string.digits + " .,;:!?'\"-()/&"
    unicode_extras = "éüßñøこんにちは法规"

    def text(min_len=1, max_len=40, pad=False):
        n = rng.randint(min_len, max_len)
        chars = [rng.choice(alphabet + unicode_extras) for _ in range(n)]
        body = "".join(chars).strip() or "x"
        if pad and rng.random() < 0.5:
            return f"  {body} \t"
        return body

    sections = []
    for _ in range(rng.randint(0, 5)):
        sections.append({
            "title": text(1, 20),
            "content_about": text(0, 30) if rng.random() < 0.7 else "",
            "what_to_do": [text(pad=True) for _ in range(rng.randint(0, 6))],
            "what_to_prohibit": [text(pad=True) for _ in range(rng.randint(0, 6))],
            **({"other_comments": text(0, 20)} if rng.random() < 0.5 else {}),
        })
    return {
        "documentInfo": {
            "title": text(1, 30),
            "content_about": text(0, 40),
            "other_comments": text(0, 40),
        },
        "sections": sections,
    }


def test_rule_document_roundtrip_fuzzed():
    with Budget(10.0):
        rng = random.Random(424242)
        for _ in range(100):
            raw_doc = _fuzz_document(rng)
            raw_json = json.dumps(raw_doc, ensure_ascii=False)
            doc = parse_rule_document(raw_json)
            # fixpoint: serialize -> parse is the identity on parsed documents
            assert parse_rule_document(serialize_rule_document(doc)) == doc
            rules = index_rules(doc)
            expected_count = sum(
                len(s["what_to_do"]) + len(s["what_to_prohibit"])
                for s in raw_doc["sections"])
            assert len(rules) == expected_count
            # verbatim: every rule text appears in the source, modulo
            # surrounding whitespace and NFC normalization
            source_texts = {
                unicodedata.normalize("NFC", t).strip()
                for s in raw_doc["sections"]
                for t in s["what_to_do"] + s["what_to_prohibit"]
            }
            for rule in rules:
                assert rule.text in source_texts
            # determinism of id assignment
            assert [r.rule_id for r in rules] == [r.rule_id for r in index_rules(doc)]
            # ingest round-trip keeps the base consistent
            base = upsert_rules(RuleBase(), rules)
            assert len(base) == len({r.rule_id for r in rules})
