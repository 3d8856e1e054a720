"""Regenerate the demo rule base and mock script.

The mock backend answers by request fingerprint (hash of system + user text),
so the scripted responses must be built against the exact prompt the engine
renders for this rule base. Run this after editing rule-document.json,
sidecar.json or content.txt:

    python demo/build_demo.py
"""

import json
from pathlib import Path

from contentqc.engine import load_sidecar
from contentqc.orchestrator import VERIFIER_SYSTEM, Issue, build_verification_prompt
from contentqc.rulebase import (
    RuleBase,
    TaxonomyTags,
    index_rules,
    parse_rule_document,
    save_rulebase,
    upsert_rules,
)
from contentqc.waterfall import ContentContext, filter_rules, render_system_prompt

HERE = Path(__file__).parent


def main() -> None:
    sidecar = load_sidecar(HERE / "sidecar.json")
    doc = parse_rule_document((HERE / "rule-document.json").read_text(encoding="utf-8"))
    rules = index_rules(
        doc,
        default_tags=TaxonomyTags.from_dict(sidecar["default_tags"]),
        module_assignment=sidecar["module_map"],
        section_tags={title: TaxonomyTags.from_dict(tags)
                      for title, tags in (sidecar["section_tags"] or {}).items()},
    )
    base = upsert_rules(RuleBase(), rules)
    save_rulebase(base, HERE / "rulebase.json")

    content = (HERE / "content.txt").read_text(encoding="utf-8")
    prompt = render_system_prompt(filter_rules(base, ContentContext()))
    by_text = {r.text: r.rule_id for r in rules}
    cheap_id = by_text["Never describe any product as cheap."]
    guarantee_id = by_text["Do not promise guaranteed outcomes."]

    teacher_issues = [{
        "issue": cheap_id,
        "context": "looks cheap",
        "recommendation": "Describe the sign's value without the word 'cheap'.",
    }]
    student_issues = teacher_issues + [{
        "issue": guarantee_id,
        "context": "guaranteed results within two weeks",
        "recommendation": "Remove the outcome guarantee or qualify it.",
    }]
    conflict = Issue(
        rule_id=guarantee_id,
        context_snippet="guaranteed results within two weeks",
        recommendation="Remove the outcome guarantee or qualify it.",
        origin="student",
    )
    vprompt = build_verification_prompt([conflict], content, prompt)
    verdict = [{
        "issue": guarantee_id,
        "context": "guaranteed results within two weeks",
        "recommendation": "Valid violation: the copy promises a guaranteed outcome.",
        "isValid": True,
    }]

    script = {"responses": [
        {"system": prompt, "user": content, "model": "teacher-pro",
         "text": json.dumps({"issues": teacher_issues}), "latency_ms": 1800},
        {"system": prompt, "user": content, "model": "student-flash",
         "text": json.dumps({"issues": student_issues}), "latency_ms": 700},
        {"system": VERIFIER_SYSTEM, "user": vprompt, "model": "teacher-pro",
         "text": json.dumps({"issues": verdict}), "latency_ms": 2100},
    ]}
    (HERE / "script.json").write_text(json.dumps(script, indent=2, ensure_ascii=False),
                                      encoding="utf-8")
    print(f"rule base: {len(rules)} rules (v{base.version})")
    print("script.json regenerated")


if __name__ == "__main__":
    main()
