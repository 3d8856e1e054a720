import json
import time

import pytest
from click.testing import CliRunner
from fastapi.testclient import TestClient

from contentqc.api import create_app
from contentqc.cli import main as cli_main
from contentqc.config import load_config
from contentqc.engine import Engine
from contentqc.modelclient import MockBackend
from contentqc.orchestrator import VERIFIER_SYSTEM, Issue, build_verification_prompt
from contentqc.rulebase import RuleBase, load_rulebase, save_rulebase, upsert_rules
from contentqc.waterfall import ContentContext, filter_rules, render_system_prompt

from .conftest import (
    STYLE_GUIDE_JSON,
    issue_item,
    issues_payload,
    make_rule,
    verdict_item,
)

CONTENT = "The results ocured quickly and the cheap option was chosen."


def write_config(tmp_path, **overrides) -> str:
    """Materialize a working config directory: empty mock script, empty
    rule base, pricing, and the INI pointing at them."""
    (tmp_path / "script.json").write_text(json.dumps({"responses": []}))
    save_rulebase(RuleBase(), tmp_path / "rulebase.json")
    (tmp_path / "pricing.json").write_text(json.dumps({
        "models": [
            {"provider": "mock", "model_name": "teacher-pro", "cents_per_1k": 1.4125},
            {"provider": "mock", "model_name": "student-flash", "cents_per_1k": 0.3368},
        ]
    }))
    lines = [
        "[service]",
        "listen = 127.0.0.1:8099",
        "max_concurrent_runs = 2",
        "",
        "[paths]",
        "rulebase = rulebase.json",
        "pricing = pricing.json",
        "usage_log = usage.jsonl",
        "review_log = review.jsonl",
        "reports_dir = reports",
        "",
        "[backend]",
        "mode = mock",
        "mock_script = script.json",
        "",
        "[models]",
        "teacher_provider = mock",
        "teacher_model = teacher-pro",
        "student_provider = mock",
        "student_model = student-flash",
    ]
    for key, value in overrides.items():
        lines.append(f"{key} = {value}")
    config_path = tmp_path / "qc.ini"
    config_path.write_text("\n".join(lines), encoding="utf-8")
    return str(config_path)


@pytest.fixture
def engine(tmp_path):
    eng = Engine(load_config(write_config(tmp_path)))
    yield eng
    eng.shutdown()


@pytest.fixture
def client(engine):
    return TestClient(create_app(engine))


def _mock(engine) -> MockBackend:
    return engine.client.backend("mock")


def _seed_country_rules(engine):
    rules = ([make_rule(f"uk.{i}", countries={"UK"}) for i in range(1, 4)]
             + [make_rule(f"us.{i}", countries={"US"}) for i in range(1, 3)]
             + [make_rule(f"global.{i}") for i in range(1, 6)])
    engine.rulebase_store.apply(lambda base: upsert_rules(base, rules))


def _script_run(engine, teacher_payload, student_payload, verify_payloads=(),
                conflicts_per_round=(), content=CONTENT, ctx=ContentContext()):
    prompt = render_system_prompt(filter_rules(engine.rulebase_store.get(), ctx))
    backend = _mock(engine)
    backend.script(prompt, content, teacher_payload, model_name="teacher-pro")
    backend.script(prompt, content, student_payload, model_name="student-flash")
    for conflicts, payload in zip(conflicts_per_round, verify_payloads):
        vprompt = build_verification_prompt(list(conflicts), content, prompt)
        backend.script(VERIFIER_SYSTEM, vprompt, payload, model_name="teacher-pro")


def _poll_report(client, report_id, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        response = client.get(f"/qc/report/{report_id}")
        assert response.status_code == 200
        body = response.json()
        if body["status"] == "complete":
            return body["report"]
        time.sleep(0.02)
    raise AssertionError("report did not complete in time")


class TestRulesEndpoints:
    def test_ingest_returns_ids(self, client):
        response = client.post("/rules/ingest", json={
            "document": json.loads(STYLE_GUIDE_JSON),
            "default_tags": {"countries": ["UK"]},
            "module_map": {"Prohibited terms": "R"},
        })
        assert response.status_code == 200
        body = response.json()
        assert len(body["rule_ids"]) == 5
        assert body["rulebase_version"] == 1

    def test_reingest_same_ids_version_bump(self, client):
        payload = {"document": json.loads(STYLE_GUIDE_JSON)}
        first = client.post("/rules/ingest", json=payload).json()
        second = client.post("/rules/ingest", json=payload).json()
        assert first["rule_ids"] == second["rule_ids"]
        assert second["rulebase_version"] == first["rulebase_version"] + 1

    def test_ingest_bad_schema(self, client):
        response = client.post("/rules/ingest", json={"document": {"sections": []}})
        assert response.status_code == 400
        assert response.json()["code"] == "schema_error"

    def test_rules_no_params_returns_all(self, client, engine):
        _seed_country_rules(engine)
        body = client.get("/rules").json()
        assert len(body["rules"]) == 10
        assert len(body["trace"]) == 5

    def test_rules_country_filter(self, client, engine):
        _seed_country_rules(engine)
        body = client.get("/rules", params={"country": "UK"}).json()
        assert len(body["rules"]) == 8

    def test_rules_unknown_country_globals_only(self, client, engine):
        _seed_country_rules(engine)
        body = client.get("/rules", params={"country": "XX"}).json()
        assert sorted(r["rule_id"] for r in body["rules"]) == \
            [f"global.{i}" for i in range(1, 6)]


class TestQCEndpoints:
    def test_run_returns_202_and_report(self, client, engine):
        _seed_country_rules(engine)
        _script_run(engine, issues_payload(), issues_payload())
        response = client.post("/qc/run", json={"content": CONTENT, "context": {}})
        assert response.status_code == 202
        report = _poll_report(client, response.json()["report_id"])
        assert report["final_issues"] == []

    def test_scripted_scenario_report(self, client, engine):
        engine.rulebase_store.apply(lambda base: upsert_rules(base, [
            make_rule("1.3"), make_rule("2.1", module="R")]))
        teacher = issues_payload(issue_item("1.3", "ocured", "write occurred"))
        student = issues_payload(issue_item("1.3", "ocured", "write occurred"),
                                 issue_item("2.1", "cheap option", "drop cheap"))
        conflict = Issue(rule_id="2.1", context_snippet="cheap option",
                         recommendation="drop cheap", origin="student")
        verify = issues_payload(verdict_item("2.1", "cheap option", "valid", True))
        _script_run(engine, teacher, student, [verify], [[conflict]])
        response = client.post("/qc/run", json={"content": CONTENT, "context": {}})
        report = _poll_report(client, response.json()["report_id"])
        assert [f["resolution"] for f in report["final_issues"]] == ["agreed", "verified"]

    def test_empty_content_400(self, client):
        response = client.post("/qc/run", json={"content": "   ", "context": {}})
        assert response.status_code == 400

    def test_missing_content_400(self, client):
        response = client.post("/qc/run", json={"context": {}})
        assert response.status_code == 400
        assert response.json()["code"] == "schema_error"

    def test_unknown_report_404(self, client):
        response = client.get("/qc/report/doesnotexist")
        assert response.status_code == 404
        assert response.json()["code"] == "not_found"


def _run_leaving_review_item(client, engine):
    """Scripted run whose verification output is garbled, leaving the lone
    conflict unresolved and enqueued."""
    engine.rulebase_store.apply(lambda base: upsert_rules(base, [
        make_rule("1.3", countries={"UK", "US"}), make_rule("2.1", module="R")]))
    student = issues_payload(issue_item("1.3", "cheap option", "reword"))
    conflict = Issue(rule_id="1.3", context_snippet="cheap option",
                     recommendation="reword", origin="student")
    _script_run(engine, issues_payload(), student, ["garbled"], [[conflict]])
    response = client.post("/qc/run", json={"content": CONTENT, "context": {}})
    report = _poll_report(client, response.json()["report_id"])
    assert report["review_item_ids"]
    return report["review_item_ids"][0]


class TestReviewEndpoints:
    def test_pending_roundtrip(self, client, engine):
        item_id = _run_leaving_review_item(client, engine)
        pending = client.get("/review/pending").json()
        assert [item["item_id"] for item in pending] == [item_id]

    def test_decide_and_409_on_second(self, client, engine):
        item_id = _run_leaving_review_item(client, engine)
        body = {"verdict": "accept_violation", "justification": "true violation",
                "reviewer_id": "rev-9"}
        first = client.post(f"/review/{item_id}/decision", json=body)
        assert first.status_code == 200
        assert first.json()["status"] == "accepted"
        assert client.get("/review/pending").json() == []
        second = client.post(f"/review/{item_id}/decision", json=body)
        assert second.status_code == 409

    def test_empty_justification_400(self, client, engine):
        item_id = _run_leaving_review_item(client, engine)
        response = client.post(f"/review/{item_id}/decision", json={
            "verdict": "reject_flag", "justification": "   "})
        assert response.status_code == 400
        assert response.json()["code"] == "empty_justification"

    def test_unknown_item_404(self, client):
        response = client.post("/review/ri-000404/decision", json={
            "verdict": "reject_flag", "justification": "x"})
        assert response.status_code == 404

    def test_decision_with_knowledge_update_suppresses_rule(self, client, engine):
        item_id = _run_leaving_review_item(client, engine)
        before = client.get("/rules", params={"country": "US"}).json()
        assert "1.3" in [r["rule_id"] for r in before["rules"]]
        response = client.post(f"/review/{item_id}/decision", json={
            "verdict": "reject_flag",
            "justification": "US campaigns are exempt",
            "reviewer_id": "rev-2",
            "knowledge_update": {
                "rule_id": "1.3",
                "action": "suppress_in_context",
                "scope": {"country": "US"},
            },
        })
        assert response.status_code == 200
        after = client.get("/rules", params={"country": "US"}).json()
        assert "1.3" not in [r["rule_id"] for r in after["rules"]]
        uk = client.get("/rules", params={"country": "UK"}).json()
        assert "1.3" in [r["rule_id"] for r in uk["rules"]]


class TestCli:
    def _ingest(self, runner, config_path, tmp_path, sidecar=None):
        doc = tmp_path / "doc.json"
        doc.write_text(STYLE_GUIDE_JSON, encoding="utf-8")
        args = ["ingest-rules", "--config", config_path, "--document", str(doc), "--json"]
        if sidecar:
            sidecar_path = tmp_path / "sidecar.json"
            sidecar_path.write_text(json.dumps(sidecar))
            args += ["--sidecar", str(sidecar_path)]
        result = runner.invoke(cli_main, args)
        assert result.exit_code == 0, result.output
        return json.loads(result.output)

    def test_ingest_and_rules(self, tmp_path):
        runner = CliRunner()
        config_path = write_config(tmp_path)
        body = self._ingest(runner, config_path, tmp_path,
                            sidecar={"default_tags": {"countries": ["UK"]},
                                     "module_map": {"Prohibited terms": "R"}})
        assert len(body["rule_ids"]) == 5
        result = runner.invoke(cli_main, ["rules", "--config", config_path, "--json"])
        assert result.exit_code == 0
        fset = json.loads(result.output)
        assert len(fset["rules"]) == 5
        result = runner.invoke(cli_main,
                               ["rules", "--config", config_path, "--country", "US",
                                "--json"])
        assert json.loads(result.output)["rules"] == []

    def test_run_clean_content(self, tmp_path):
        runner = CliRunner()
        config_path = write_config(tmp_path)
        self._ingest(runner, config_path, tmp_path)
        base = load_rulebase(tmp_path / "rulebase.json")
        prompt = render_system_prompt(filter_rules(base, ContentContext()))
        script = {"responses": [
            {"system": prompt, "user": CONTENT, "text": '{"issues": []}'},
        ]}
        (tmp_path / "script.json").write_text(json.dumps(script))
        content_file = tmp_path / "content.txt"
        content_file.write_text(CONTENT, encoding="utf-8")
        result = runner.invoke(cli_main, [
            "run", "--config", config_path, "--content", str(content_file), "--json"])
        assert result.exit_code == 0, result.output
        report = json.loads(result.output)["report"]
        assert report["final_issues"] == []
        # usage got logged for both detection passes
        usage = runner.invoke(cli_main, ["usage", "--config", config_path, "--json"])
        assert json.loads(usage.output)["total_requests"] == 2

    def test_eval_command(self, tmp_path):
        gold = tmp_path / "gold.jsonl"
        pred = tmp_path / "pred.jsonl"
        gold.write_text("\n".join(json.dumps(r) for r in [
            {"sample_id": "a", "label": "violation", "score": 4, "system_id": "s"},
            {"sample_id": "b", "label": "compliant", "score": 5, "system_id": "s"},
            {"sample_id": "c", "label": "violation", "score": 1, "system_id": "s"},
        ]))
        pred.write_text("\n".join(json.dumps(r) for r in [
            {"sample_id": "a", "label": "violation", "score": 4},
            {"sample_id": "b", "label": "compliant", "score": 4},
            {"sample_id": "c", "label": "violation", "score": 2},
        ]))
        runner = CliRunner()
        result = runner.invoke(cli_main, ["eval", "--gold", str(gold),
                                          "--pred", str(pred), "--json"])
        assert result.exit_code == 0, result.output
        report = json.loads(result.output)
        assert report["metrics"]["recall"] == 1.0
        assert "agreement" in report

    def test_eval_strict_flags_undefined(self, tmp_path):
        gold = tmp_path / "gold.jsonl"
        pred = tmp_path / "pred.jsonl"
        gold.write_text(json.dumps(
            {"sample_id": "a", "label": "compliant", "system_id": "s"}))
        pred.write_text(json.dumps({"sample_id": "a", "label": "compliant"}))
        runner = CliRunner()
        assert runner.invoke(cli_main, ["eval", "--gold", str(gold), "--pred",
                                        str(pred)]).exit_code == 0
        strict = runner.invoke(cli_main, ["eval", "--gold", str(gold), "--pred",
                                          str(pred), "--strict"])
        assert strict.exit_code == 2

    def test_usage_table_fields(self, tmp_path):
        log = tmp_path / "usage.jsonl"
        rows = [{"request_id": f"r{i}", "provider": "mock", "model_name": "m",
                 "prompt_tokens": 6000, "completion_tokens": 150,
                 "total_tokens": 6150, "cost_cents": 2.045, "latency_ms": 2010,
                 "timestamp": "2026-01-01T00:00:00+00:00"} for i in range(4)]
        log.write_text("\n".join(json.dumps(r) for r in rows))
        runner = CliRunner()
        result = runner.invoke(cli_main, ["usage", "--log", str(log)])
        assert result.exit_code == 0
        for label in ("Total tokens", "Total requests", "Latency (P50)",
                      "Cost / request", "Tokens / request"):
            assert label in result.output
        as_json = json.loads(runner.invoke(
            cli_main, ["usage", "--log", str(log), "--json"]).output)
        assert as_json["tokens_per_request"] == 6150
        assert as_json["p50_latency_ms"] == 2010

    def test_review_list_empty(self, tmp_path):
        runner = CliRunner()
        config_path = write_config(tmp_path)
        result = runner.invoke(cli_main, ["review", "list", "--config", config_path])
        assert result.exit_code == 0
        assert "empty" in result.output


class TestCliReviewFlow:
    def _prepare_review_item(self, tmp_path, config_path):
        """Run the pipeline headlessly so one conflict lands in the queue."""
        cfg = load_config(config_path)
        engine = Engine(cfg)
        engine.rulebase_store.apply(lambda base: upsert_rules(base, [
            make_rule("1.3", countries={"UK", "US"})]))
        student = issues_payload(issue_item("1.3", "cheap option", "reword"))
        conflict = Issue(rule_id="1.3", context_snippet="cheap option",
                         recommendation="reword", origin="student")
        _script_run(engine, issues_payload(), student, ["garbled"], [[conflict]])
        _, report = engine.run_qc_sync(CONTENT, ContentContext())
        engine.shutdown()
        assert report.review_item_ids
        return report.review_item_ids[0]

    def test_full_hitl_loop_via_cli(self, tmp_path):
        runner = CliRunner()
        config_path = write_config(tmp_path)
        item_id = self._prepare_review_item(tmp_path, config_path)

        listed = runner.invoke(cli_main, ["review", "list", "--config", config_path,
                                          "--json"])
        assert item_id in listed.output

        decided = runner.invoke(cli_main, [
            "review", "decide", "--config", config_path, item_id,
            "--verdict", "reject-flag",
            "--justification", "US campaigns are exempt",
            "--reviewer", "cli-rev",
            "--suppress-in-context", "--country", "US",
            "--json"])
        assert decided.exit_code == 0, decided.output
        assert json.loads(decided.output)["status"] == "rejected"

        rules_us = runner.invoke(cli_main, ["rules", "--config", config_path,
                                            "--country", "US", "--json"])
        assert "1.3" not in [r["rule_id"]
                             for r in json.loads(rules_us.output)["rules"]]
        rules_uk = runner.invoke(cli_main, ["rules", "--config", config_path,
                                            "--country", "UK", "--json"])
        assert "1.3" in [r["rule_id"] for r in json.loads(rules_uk.output)["rules"]]

        again = runner.invoke(cli_main, [
            "review", "decide", "--config", config_path, item_id,
            "--verdict", "accept-violation", "--justification", "retry"])
        assert again.exit_code == 1

    def test_api_and_cli_decisions_identical_in_audit(self, tmp_path):
        """A decision made over HTTP and one made via the CLI leave
        indistinguishable event payloads (modulo ids and timestamps)."""
        runner = CliRunner()
        config_path = write_config(tmp_path)
        cfg = load_config(config_path)
        engine = Engine(cfg)
        engine.rulebase_store.apply(lambda base: upsert_rules(base, [make_rule("1.3")]))
        issue = Issue(rule_id="1.3", context_snippet="snippet one",
                      recommendation="r", origin="student", uid="s1.1")
        other = Issue(rule_id="1.3", context_snippet="snippet two",
                      recommendation="r", origin="student", uid="s1.2")
        api_item = engine.review_queue.enqueue_conflict("c1", issue)
        cli_item = engine.review_queue.enqueue_conflict("c1", other)

        api = TestClient(create_app(engine))
        response = api.post(f"/review/{api_item}/decision", json={
            "verdict": "accept_violation", "justification": "same words",
            "reviewer_id": "rev"})
        assert response.status_code == 200
        engine.shutdown()

        decided = runner.invoke(cli_main, [
            "review", "decide", "--config", config_path, cli_item,
            "--verdict", "accept-violation", "--justification", "same words",
            "--reviewer", "rev"])
        assert decided.exit_code == 0, decided.output

        events = ReviewQueueEvents(config_path)
        api_event, cli_event = events.decisions(api_item, cli_item)
        assert api_event == cli_event


class ReviewQueueEvents:
    def __init__(self, config_path):
        cfg = load_config(config_path)
        self.rows = [json.loads(line)
                     for line in cfg.review_log_path.read_text().splitlines()
                     if line.strip()]

    def decisions(self, *item_ids):
        out = []
        for item_id in item_ids:
            event = next(r for r in self.rows
                         if r["type"] == "decided" and r["item_id"] == item_id)
            event = dict(event)
            event.pop("at")
            event.pop("seq")
            event.pop("item_id")
            out.append(event)
        return out
