"""Command-line surface: every API capability, headless.

`qc run | ingest-rules | rules | eval | review list | review decide | usage
| serve`. Table output by default, machine-readable JSON with --json.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import evalharness
from .config import ServiceConfig, load_config
from .engine import Engine, load_sidecar
from .errors import ContentQCError
from .hitl import DecisionVerdict, FeedbackAction, HumanDecision, KnowledgeUpdate
from .modelclient import UsageLog, usage_summary
from .waterfall import ContentContext


def _context_options(fn):
    for option in reversed([
        click.option("--ip", default=None, help="Organization / IP scope."),
        click.option("--country", default=None),
        click.option("--use-case", "use_case", default=None),
        click.option("--topic", default=None),
        click.option("--subtask", "subtasks", multiple=True,
                     help="May be given multiple times."),
        click.option("--content-type", "content_type", default=None),
    ]):
        fn = option(fn)
    return fn


def _build_context(ip, country, use_case, topic, subtasks, content_type) -> ContentContext:
    return ContentContext(ip=ip, country=country, use_case=use_case, topic=topic,
                          subtasks=frozenset(subtasks), content_type=content_type)


def _engine(config_path: str) -> Engine:
    return Engine(load_config(config_path))


def _fail(exc: Exception) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(1)


def _table(rows: list[list[str]], headers: list[str]) -> str:
    widths = [max(len(str(r[i])) for r in [headers] + rows) for i in range(len(headers))]
    def fmt(row):
        return "  ".join(str(cell).ljust(w) for cell, w in zip(row, widths)).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(row) for row in rows)
    return "\n".join(lines)


@click.group()
def main() -> None:
    """Content quality-control engine."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--host", default=None)
@click.option("--port", default=None, type=int)
def serve(config_path: str, host: str | None, port: int | None) -> None:
    """Start the HTTP service."""
    import uvicorn

    from .api import create_app

    cfg = load_config(config_path)
    engine = Engine(cfg)
    uvicorn.run(create_app(engine),
                host=host or cfg.listen_host,
                port=port or cfg.listen_port)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--content", "content_path", required=True,
              help="Path to the content file, or '-' for stdin.")
@_context_options
@click.option("--json", "as_json", is_flag=True)
def run(config_path: str, content_path: str, as_json: bool, **ctx_kwargs) -> None:
    """Run the full QC pipeline on one content item."""
    content = (sys.stdin.read() if content_path == "-"
               else Path(content_path).read_text(encoding="utf-8"))
    engine = _engine(config_path)
    try:
        report_id, report = engine.run_qc_sync(content, _build_context(**ctx_kwargs))
    except ContentQCError as exc:
        _fail(exc)
    if as_json:
        click.echo(json.dumps({"report_id": report_id, "report": report.to_dict()},
                              ensure_ascii=False, indent=2))
        return
    click.echo(f"report {report_id}  content {report.content_id}  "
               f"rules {len(report.filtered_rule_ids)}")
    if not report.final_issues:
        click.echo("no issues found")
    else:
        rows = [[f.issue.rule_id, f.resolution, f.issue.context_snippet[:40],
                 f.issue.recommendation[:50]] for f in report.final_issues]
        click.echo(_table(rows, ["rule", "resolution", "context", "recommendation"]))
    if report.unresolved_for_review:
        click.echo(f"{len(report.unresolved_for_review)} issue(s) queued for review: "
                   + ", ".join(report.review_item_ids))


@main.command("ingest-rules")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--document", "document_path", required=True, type=click.Path(exists=True))
@click.option("--sidecar", "sidecar_path", default=None, type=click.Path(exists=True),
              help="JSON with default_tags / module_map / section_tags.")
@click.option("--json", "as_json", is_flag=True)
def ingest_rules(config_path: str, document_path: str, sidecar_path: str | None,
                 as_json: bool) -> None:
    """Parse a rule-extraction document and index its rules."""
    engine = _engine(config_path)
    sidecar = load_sidecar(sidecar_path) if sidecar_path else {}
    try:
        rule_ids, version = engine.ingest_document(
            Path(document_path).read_text(encoding="utf-8"),
            sidecar.get("default_tags"),
            sidecar.get("module_map"),
            sidecar.get("section_tags"),
        )
    except ContentQCError as exc:
        _fail(exc)
    if as_json:
        click.echo(json.dumps({"rule_ids": rule_ids, "rulebase_version": version}))
    else:
        click.echo(f"ingested {len(rule_ids)} rules (rule base v{version})")
        for rule_id in rule_ids:
            click.echo(f"  {rule_id}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@_context_options
@click.option("--json", "as_json", is_flag=True)
def rules(config_path: str, as_json: bool, **ctx_kwargs) -> None:
    """Show the filtered rule set for a context, with the waterfall trace."""
    engine = _engine(config_path)
    fset = engine.filtered_rules(_build_context(**ctx_kwargs))
    if as_json:
        click.echo(json.dumps(fset.to_dict(), ensure_ascii=False, indent=2))
        return
    rows = [[r.rule_id, r.lrbtc_module, r.polarity.value, r.text[:60]]
            for r in fset.rules]
    click.echo(_table(rows, ["rule", "module", "polarity", "text"]) if rows
               else "no rules match")
    click.echo("\ntrace:")
    for t in fset.trace:
        click.echo(f"  {t.level:<9} in={t.rules_in:<4} out={t.rules_out:<4} "
                   f"query={t.query_value!r}")


@main.command("eval")
@click.option("--gold", "gold_path", required=True, type=click.Path(exists=True))
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True))
@click.option("--format", "fixture_format", type=click.Choice(["aireg", "cspelling"]),
              default="aireg")
@click.option("--scale", default=5, help="Ordinal score scale for agreement stats.")
@click.option("--strict", is_flag=True,
              help="Exit nonzero when any core metric is undefined.")
@click.option("--json", "as_json", is_flag=True)
def eval_cmd(gold_path: str, pred_path: str, fixture_format: str, scale: int,
             strict: bool, as_json: bool) -> None:
    """Score predictions against gold labels."""
    loader = (evalharness.load_aireg_fixture if fixture_format == "aireg"
              else evalharness.load_cspelling_fixture)
    try:
        golds = loader(gold_path)
        preds = evalharness.load_predictions(pred_path)
        report = evalharness.evaluate(golds, preds, score_scale=scale)
    except ContentQCError as exc:
        _fail(exc)
    if as_json:
        click.echo(json.dumps(report, ensure_ascii=False, indent=2))
    else:
        c = report["confusion"]
        click.echo(f"samples {report['n_samples']}  "
                   f"tp={c['tp']} fp={c['fp']} tn={c['tn']} fn={c['fn']}")
        rows = [[name, "undefined" if value is None else f"{value:.4f}"]
                for name, value in report["metrics"].items()]
        click.echo(_table(rows, ["metric", "value"]))
        if "agreement" in report:
            a = report["agreement"]
            click.echo(f"\nagreement (n={a['n_scored']}): "
                       f"kappa_qw={_fmt(a['kappa_qw'])} rho={_fmt(a['spearman_rho'])} "
                       f"bias={a['bias']:+.4f} mae={a['mae']:.4f}")
        if "per_class_recall" in report:
            rows = [[r["error_class"], r["gt_count"], r["detected_count"],
                     "undefined" if r["recall"] is None else f"{100 * r['recall']:.2f}%"]
                    for r in report["per_class_recall"]]
            click.echo("\n" + _table(rows, ["class", "gt", "detected", "recall"]))
    if strict and evalharness.has_undefined_core_metric(report):
        sys.exit(2)


def _fmt(value: float | None) -> str:
    return "undefined" if value is None else f"{value:.4f}"


@main.group()
def review() -> None:
    """Human review queue."""


@review.command("list")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--content-id", default=None)
@click.option("--rule-id", default=None)
@click.option("--json", "as_json", is_flag=True)
def review_list(config_path: str, content_id: str | None, rule_id: str | None,
                as_json: bool) -> None:
    """List pending review items."""
    engine = _engine(config_path)
    items = engine.review_queue.list_pending(content_id, rule_id)
    if as_json:
        click.echo(json.dumps([i.to_dict() for i in items], ensure_ascii=False, indent=2))
        return
    if not items:
        click.echo("review queue is empty")
        return
    rows = [[i.item_id, i.content_id, i.issue.rule_id,
             i.issue.context_snippet[:40], i.created_at] for i in items]
    click.echo(_table(rows, ["item", "content", "rule", "context", "created"]))


@review.command("decide")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.argument("item_id")
@click.option("--verdict", required=True,
              type=click.Choice(["accept-violation", "reject-flag"]))
@click.option("--justification", required=True)
@click.option("--reviewer", "reviewer_id", default="cli")
@click.option("--suppress-in-context", "suppress", is_flag=True,
              help="Suppress the rule for the item's context levels given below.")
@click.option("--mark-always-valid", "always_valid", is_flag=True)
@click.option("--amend-recommendation", "amend", default=None)
@_context_options
@click.option("--json", "as_json", is_flag=True)
def review_decide(config_path: str, item_id: str, verdict: str, justification: str,
                  reviewer_id: str, suppress: bool, always_valid: bool,
                  amend: str | None, as_json: bool, **ctx_kwargs) -> None:
    """Decide one review item, optionally attaching a knowledge update."""
    engine = _engine(config_path)
    update = None
    if suppress or always_valid or amend is not None:
        try:
            item = engine.review_queue.get(item_id)
        except ContentQCError as exc:
            _fail(exc)
        if suppress:
            action, scope = FeedbackAction.SUPPRESS_IN_CONTEXT, _build_context(**ctx_kwargs)
        elif always_valid:
            action, scope = FeedbackAction.MARK_ALWAYS_VALID, None
        else:
            action, scope = FeedbackAction.AMEND_RECOMMENDATION, None
        update = KnowledgeUpdate(rule_id=item.issue.rule_id, action=action,
                                 scope=scope, recommendation=amend)
    decision = HumanDecision(
        verdict=DecisionVerdict(verdict.replace("-", "_")),
        justification=justification,
        reviewer_id=reviewer_id,
        knowledge_update=update,
    )
    try:
        item = engine.review_queue.decide(item_id, decision)
    except ContentQCError as exc:
        _fail(exc)
    if as_json:
        click.echo(json.dumps(item.to_dict(), ensure_ascii=False, indent=2))
    else:
        click.echo(f"{item.item_id} -> {item.status.value}")


@main.command()
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--log", "log_path", default=None, type=click.Path(exists=True),
              help="Read a usage JSON-lines file directly instead of the config.")
@click.option("--json", "as_json", is_flag=True)
def usage(config_path: str | None, log_path: str | None, as_json: bool) -> None:
    """Token, latency and cost summary of the usage log."""
    if log_path:
        records = UsageLog.read_file(log_path)
    elif config_path:
        cfg = load_config(config_path)
        if not cfg.usage_log_path or not cfg.usage_log_path.exists():
            _fail(FileNotFoundError("no usage log recorded yet"))
        records = UsageLog.read_file(cfg.usage_log_path)
    else:
        _fail(ValueError("pass --config or --log"))
    summary = usage_summary(records)
    if as_json:
        click.echo(json.dumps(summary))
        return
    rows = [
        ["Total tokens", f"{summary['total_tokens']:,}"],
        ["Total requests", f"{summary['total_requests']:,}"],
        ["Latency (P50)", f"{summary['p50_latency_ms']} ms"],
        ["Cost / request", f"{summary['cost_per_request']:.4f} cents"],
        ["Tokens / request", f"{summary['tokens_per_request']:,.0f}"],
    ]
    click.echo(_table(rows, ["metric", "value"]))


if __name__ == "__main__":
    main()
