"""Run configuration: one declarative JSON file, validated strictly.

Unknown keys are rejected at every level so typos fail fast instead of
silently running with defaults. Command-line overrides (``--override a.b=v``)
are applied to the raw dict before validation, so flags win.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .dkt import TrainConfig
from .llmprobe import ProbeConfig
from .synth import GenerativeSpec


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass
class DataConfig:
    raw_path: str
    delimiter: str = ","
    encoding: str = "utf-8"
    columns: Dict[str, str] = field(default_factory=dict)


@dataclass
class ProbeSection:
    probe: ProbeConfig
    tag: str = "llm"
    mastery_students: List[str] = field(default_factory=list)
    stability_check: bool = False


@dataclass
class EvalSection:
    tags: List[str] = field(default_factory=lambda: ["dkt"])
    threshold: float = 0.5
    stage_macro: bool = False
    coherence_all_skills: bool = False
    heatmap_students: List[str] = field(default_factory=list)


@dataclass
class RunConfig:
    workspace: str
    seed: int = 0
    determinism: bool = False
    ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    data: Optional[DataConfig] = None
    dkt: TrainConfig = field(default_factory=TrainConfig)
    probe: Optional[ProbeSection] = None
    synth: Optional[GenerativeSpec] = None
    evaluate: EvalSection = field(default_factory=EvalSection)
    raw: dict = field(default_factory=dict)

    def config_hash(self) -> str:
        payload = json.dumps(self.raw, sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()


def _require_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _typed(section: dict, key: str, kind, default, where: str):
    if key not in section:
        if default is _REQUIRED:
            raise ConfigError(f"missing required key {key!r} in {where}")
        return default
    value = section[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is not None and not isinstance(value, kind):
        raise ConfigError(f"{where}.{key}: expected {kind.__name__}, got {type(value).__name__}")
    return value


_REQUIRED = object()


def parse_override(expr: str) -> Tuple[List[str], Any]:
    """Parse ``a.b.c=value`` where value is a JSON literal when possible."""
    if "=" not in expr:
        raise ConfigError(f"override must look like path=value, got {expr!r}")
    path, raw_value = expr.split("=", 1)
    keys = [k for k in path.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"empty override path in {expr!r}")
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    return keys, value


def apply_override(raw: dict, keys: List[str], value: Any) -> None:
    node = raw
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {'.'.join(keys)} crosses a non-object value")
    node[keys[-1]] = value


def build_config(raw: dict) -> RunConfig:
    _require_keys(
        raw,
        {"workspace", "seed", "determinism", "ratios", "data", "dkt", "probe", "synth", "evaluate"},
        "config",
    )
    workspace = _typed(raw, "workspace", str, _REQUIRED, "config")
    seed = _typed(raw, "seed", int, 0, "config")
    determinism = _typed(raw, "determinism", bool, False, "config")
    ratios = raw.get("ratios", [0.8, 0.1, 0.1])
    if not (isinstance(ratios, list) and len(ratios) == 3):
        raise ConfigError("config.ratios must be a 3-element list")
    ratios = tuple(float(r) for r in ratios)
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"config.ratios must sum to 1, got {ratios}")

    data = None
    if "data" in raw:
        section = raw["data"]
        _require_keys(section, {"raw_path", "delimiter", "encoding", "columns"}, "config.data")
        columns = _typed(section, "columns", dict, {}, "config.data")
        data = DataConfig(
            raw_path=_typed(section, "raw_path", str, _REQUIRED, "config.data"),
            delimiter=_typed(section, "delimiter", str, ",", "config.data"),
            encoding=_typed(section, "encoding", str, "utf-8", "config.data"),
            columns={str(k): str(v) for k, v in columns.items()},
        )

    dkt_section = raw.get("dkt", {})
    allowed_dkt = {
        "embedding_dim", "hidden_dim", "learning_rate", "batch_size",
        "max_t", "clip_norm", "patience", "max_epochs",
    }
    _require_keys(dkt_section, allowed_dkt, "config.dkt")
    dkt_cfg = TrainConfig(
        embedding_dim=_typed(dkt_section, "embedding_dim", int, 64, "config.dkt"),
        hidden_dim=_typed(dkt_section, "hidden_dim", int, 128, "config.dkt"),
        learning_rate=_typed(dkt_section, "learning_rate", float, 1e-3, "config.dkt"),
        batch_size=_typed(dkt_section, "batch_size", int, 32, "config.dkt"),
        max_t=_typed(dkt_section, "max_t", int, 200, "config.dkt"),
        clip_norm=_typed(dkt_section, "clip_norm", float, 5.0, "config.dkt"),
        patience=_typed(dkt_section, "patience", int, 3, "config.dkt"),
        max_epochs=_typed(dkt_section, "max_epochs", int, 100, "config.dkt"),
        seed=seed,
    )

    probe = None
    if "probe" in raw:
        section = raw["probe"]
        allowed = {
            "endpoint", "model", "timeout", "max_retries", "backoff", "max_concurrent",
            "logprob_depth", "history_limit", "tag", "cache", "mastery_students",
            "stability_check",
        }
        _require_keys(section, allowed, "config.probe")
        max_concurrent = _typed(section, "max_concurrent", int, 4, "config.probe")
        if determinism:
            max_concurrent = 1
        probe_cfg = ProbeConfig(
            endpoint=_typed(section, "endpoint", str, _REQUIRED, "config.probe"),
            model=_typed(section, "model", str, _REQUIRED, "config.probe"),
            timeout=_typed(section, "timeout", float, 60.0, "config.probe"),
            max_retries=_typed(section, "max_retries", int, 3, "config.probe"),
            backoff=_typed(section, "backoff", float, 0.5, "config.probe"),
            max_concurrent=max_concurrent,
            logprob_depth=_typed(section, "logprob_depth", int, 20, "config.probe"),
            history_limit=_typed(section, "history_limit", int, 100, "config.probe"),
            cache_dir=str(Path(workspace) / "probe_cache")
            if _typed(section, "cache", bool, True, "config.probe")
            else None,
        )
        probe = ProbeSection(
            probe=probe_cfg,
            tag=_typed(section, "tag", str, "llm", "config.probe"),
            mastery_students=[str(s) for s in section.get("mastery_students", [])],
            stability_check=_typed(section, "stability_check", bool, False, "config.probe"),
        )

    synth = None
    if "synth" in raw:
        section = raw["synth"]
        allowed = {
            "k", "p_init", "p_learn", "p_guess", "p_slip", "n_students",
            "mean_length", "min_length",
        }
        _require_keys(section, allowed, "config.synth")
        try:
            synth = GenerativeSpec(
                k=_typed(section, "k", int, _REQUIRED, "config.synth"),
                p_init=section.get("p_init", 0.3),
                p_learn=section.get("p_learn", 0.15),
                p_guess=section.get("p_guess", 0.2),
                p_slip=section.get("p_slip", 0.1),
                n_students=_typed(section, "n_students", int, _REQUIRED, "config.synth"),
                mean_length=_typed(section, "mean_length", float, 40.0, "config.synth"),
                min_length=_typed(section, "min_length", int, 4, "config.synth"),
                seed=seed,
            )
        except ValueError as exc:
            raise ConfigError(f"config.synth: {exc}") from exc

    eval_section = raw.get("evaluate", {})
    allowed_eval = {"tags", "threshold", "stage_macro", "coherence_all_skills", "heatmap_students"}
    _require_keys(eval_section, allowed_eval, "config.evaluate")
    evaluate = EvalSection(
        tags=[str(t) for t in eval_section.get("tags", ["dkt"])],
        threshold=_typed(eval_section, "threshold", float, 0.5, "config.evaluate"),
        stage_macro=_typed(eval_section, "stage_macro", bool, False, "config.evaluate"),
        coherence_all_skills=_typed(
            eval_section, "coherence_all_skills", bool, False, "config.evaluate"
        ),
        heatmap_students=[str(s) for s in eval_section.get("heatmap_students", [])],
    )

    return RunConfig(
        workspace=workspace,
        seed=seed,
        determinism=determinism,
        ratios=ratios,
        data=data,
        dkt=dkt_cfg,
        probe=probe,
        synth=synth,
        evaluate=evaluate,
        raw=raw,
    )


def load_config(path: str | Path, overrides: List[str] | None = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    for expr in overrides or []:
        keys, value = parse_override(expr)
        apply_override(raw, keys, value)
    return build_config(raw)
