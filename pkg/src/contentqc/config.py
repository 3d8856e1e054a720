"""Service configuration: one flat INI file, secrets via environment only."""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

from .modelclient import ModelSpec, RoleHint
from .orchestrator import OrchestratorConfig


@dataclass
class ServiceConfig:
    listen_host: str = "127.0.0.1"
    listen_port: int = 8080
    max_concurrent_runs: int = 4

    rulebase_path: Path | None = None
    template_dir: Path | None = None
    pricing_path: Path | None = None
    usage_log_path: Path | None = None
    review_log_path: Path | None = None
    reports_dir: Path | None = None
    ui_dir: Path | None = None

    backend_mode: str = "mock"  # mock | live | replay
    mock_script_path: Path | None = None
    replay_path: Path | None = None
    live_base_url: str | None = None
    api_key_env: str = "QC_API_KEY"
    request_timeout_s: float = 60.0

    orchestrator: OrchestratorConfig = field(default_factory=lambda: OrchestratorConfig(
        teacher=ModelSpec(provider="mock", model_name="teacher-pro",
                          role_hint=RoleHint.TEACHER),
        student=ModelSpec(provider="mock", model_name="student-flash",
                          role_hint=RoleHint.STUDENT),
    ))


def _path(raw: str | None, base: Path) -> Path | None:
    if not raw:
        return None
    p = Path(raw)
    return p if p.is_absolute() else base / p


def load_config(path: str | Path) -> ServiceConfig:
    """Parse and validate a service config file.

    Referenced input paths must exist at startup; live mode additionally
    requires the API key environment variable to be set.
    """
    path = Path(path)
    parser = configparser.ConfigParser()
    if not parser.read(path, encoding="utf-8"):
        raise FileNotFoundError(f"config file not found: {path}")
    base = path.parent
    cfg = ServiceConfig()

    if parser.has_section("service"):
        listen = parser.get("service", "listen", fallback=None)
        if listen:
            host, _, port = listen.rpartition(":")
            cfg.listen_host = host or "127.0.0.1"
            cfg.listen_port = int(port)
        cfg.max_concurrent_runs = parser.getint("service", "max_concurrent_runs",
                                                fallback=cfg.max_concurrent_runs)

    if parser.has_section("paths"):
        get = lambda key: _path(parser.get("paths", key, fallback=None), base)
        cfg.rulebase_path = get("rulebase")
        cfg.template_dir = get("template_dir")
        cfg.pricing_path = get("pricing")
        cfg.usage_log_path = get("usage_log")
        cfg.review_log_path = get("review_log")
        cfg.reports_dir = get("reports_dir")
        cfg.ui_dir = get("ui_dir")

    if parser.has_section("backend"):
        cfg.backend_mode = parser.get("backend", "mode", fallback="mock")
        cfg.mock_script_path = _path(parser.get("backend", "mock_script", fallback=None), base)
        cfg.replay_path = _path(parser.get("backend", "replay_log", fallback=None), base)
        cfg.live_base_url = parser.get("backend", "live_base_url", fallback=None)
        cfg.api_key_env = parser.get("backend", "api_key_env", fallback="QC_API_KEY")
        cfg.request_timeout_s = parser.getfloat("backend", "timeout_s", fallback=60.0)

    teacher = cfg.orchestrator.teacher
    student = cfg.orchestrator.student
    if parser.has_section("models"):
        def spec(role: str, default: ModelSpec, hint: RoleHint) -> ModelSpec:
            provider = parser.get("models", f"{role}_provider", fallback=default.provider)
            model = parser.get("models", f"{role}_model", fallback=default.model_name)
            temperature = parser.getfloat("models", f"{role}_temperature", fallback=None)
            return ModelSpec(provider=provider, model_name=model, role_hint=hint,
                             temperature=temperature)
        teacher = spec("teacher", teacher, RoleHint.TEACHER)
        student = spec("student", student, RoleHint.STUDENT)

    max_rounds = cfg.orchestrator.max_rounds
    jaccard = cfg.orchestrator.jaccard_threshold
    template_id = cfg.orchestrator.template_id
    if parser.has_section("orchestrator"):
        max_rounds = parser.getint("orchestrator", "max_rounds", fallback=max_rounds)
        jaccard = parser.getfloat("orchestrator", "jaccard_threshold", fallback=jaccard)
        template_id = parser.get("orchestrator", "template_id", fallback=template_id)
    cfg.orchestrator = OrchestratorConfig(
        teacher=teacher, student=student, max_rounds=max_rounds,
        jaccard_threshold=jaccard, template_id=template_id)

    _validate(cfg)
    return cfg


def _validate(cfg: ServiceConfig) -> None:
    for name, p in (("rulebase", cfg.rulebase_path),
                    ("template_dir", cfg.template_dir),
                    ("pricing", cfg.pricing_path),
                    ("mock_script", cfg.mock_script_path),
                    ("replay_log", cfg.replay_path)):
        if p is not None and not p.exists():
            raise FileNotFoundError(f"configured {name} path does not exist: {p}")
    if cfg.backend_mode == "live":
        if not cfg.live_base_url:
            raise ValueError("live backend mode requires live_base_url")
        if not os.environ.get(cfg.api_key_env):
            raise ValueError(f"live backend mode requires env var {cfg.api_key_env}")
    elif cfg.backend_mode == "mock":
        if cfg.mock_script_path is None:
            raise ValueError("mock backend mode requires mock_script")
    elif cfg.backend_mode == "replay":
        if cfg.replay_path is None:
            raise ValueError("replay backend mode requires replay_log")
    else:
        raise ValueError(f"unknown backend mode {cfg.backend_mode!r}")
