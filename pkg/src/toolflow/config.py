"""Layered configuration: defaults, file overrides, flag overrides.

The file format is flat `section.key = value` lines, UTF-8, with `#` comments.
Precedence is flags > file > defaults; the resolved config is snapshotted into
every report and corpus output.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .errors import TypeMismatch, UnknownKey


@dataclass
class Config:
    # generation backend
    backend_kind: str = "replay"  # replay | live
    backend_base_url_env: str = "TOOLFLOW_API_BASE"
    backend_api_key_env: str = "TOOLFLOW_API_KEY"
    backend_model_env: str = "TOOLFLOW_MODEL"
    replay_store: str = ""
    # retrieval
    retrieval_k: int = 3
    retrieval_backend: str = "hashed-tf"
    retrieval_dimension: int = 512
    # sandbox
    sandbox_wall_time: float = 30.0
    sandbox_memory: int = 1024 * 1024 * 1024
    sandbox_output_cap: int = 64 * 1024
    sandbox_runner: str = ""
    # grading
    grading_rel_tol: float = 1e-2
    grading_abs_tol: float = 1e-6
    # corpus budgets
    corpus_max_iters: int = 3
    corpus_n_samples: int = 5
    corpus_temperature: float = 0.6
    corpus_top_p: float = 0.95
    # parallelism
    parallelism_workers: int = 4
    parallelism_inflight_cap: int = 8
    # randomness
    seed: int = 0

    def snapshot(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# file/flag keys use dotted sections; dataclass fields use underscores
def _field_for_key(key: str) -> str:
    return key.replace(".", "_")


def _key_for_field(name: str) -> str:
    return name.replace("_", ".", 1) if "_" in name else name


_FIELD_TYPES = {f.name: f.type for f in fields(Config)}


def _coerce(key: str, raw: str) -> Any:
    name = _field_for_key(key)
    ftype = _FIELD_TYPES[name]
    text = raw.strip()
    try:
        if ftype in ("int", int):
            return int(text)
        if ftype in ("float", float):
            return float(text)
        return text
    except ValueError as exc:
        raise TypeMismatch(f"{key}: cannot parse {raw!r} as {ftype}") from exc


def parse_config_file(path: str | Path, strict: bool = True) -> dict[str, Any]:
    """Parse `key = value` lines into an override mapping (coerced values)."""
    overrides: dict[str, Any] = {}
    for lineno, line in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, raw = stripped.partition("=")
        if not sep:
            raise TypeMismatch(f"{path}:{lineno}: expected 'key = value'")
        key = key.strip()
        if _field_for_key(key) not in _FIELD_TYPES:
            if strict:
                raise UnknownKey(f"{path}:{lineno}: unknown config key {key!r}")
            continue
        overrides[key] = _coerce(key, raw)
    return overrides


def parse_flag_overrides(pairs: list[str]) -> dict[str, Any]:
    """Parse --set key=value flags into an override mapping."""
    overrides: dict[str, Any] = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep:
            raise TypeMismatch(f"--set {pair!r}: expected key=value")
        key = key.strip()
        if _field_for_key(key) not in _FIELD_TYPES:
            raise UnknownKey(f"--set: unknown config key {key!r}")
        overrides[key] = _coerce(key, raw)
    return overrides


def resolve_config(
    file_overrides: dict[str, Any] | None = None,
    flag_overrides: dict[str, Any] | None = None,
) -> Config:
    """Apply overrides on top of defaults with flags > file > defaults."""
    config = Config()
    for overrides in (file_overrides or {}, flag_overrides or {}):
        for key, value in overrides.items():
            setattr(config, _field_for_key(key), value)
    return config


def render_config(config: Config) -> str:
    """Emit the resolved config in the file format; re-parses to an equal Config."""
    lines = []
    for f in fields(Config):
        lines.append(f"{_key_for_field(f.name)} = {getattr(config, f.name)}")
    return "\n".join(lines) + "\n"
