"""Run configuration: defaults, key=value config files, flag merging, fingerprint."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .errors import HisektError


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved pipeline configuration; every field except ``data`` has a default."""

    data: str = ""
    cache_dir: str = "cache"
    out_dir: str = "out"
    n_walks: int = 100
    walk_len: int = 20
    top_k: int = 10
    top_s: int = 3
    c: float = 2.0
    window: int = 20
    pair_sample: int = 10_000
    pair_source: str = "random"  # random | paths
    seed: int = 7
    runs: int = 1
    score_backend: str = "formula"  # formula | llm
    llm_backend: str = "mock"  # mock | http
    llm_endpoint: str = ""
    llm_model: str = "mock"
    llm_timeout: float = 30.0
    llm_max_retries: int = 3
    llm_max_in_flight: int = 8
    retrieval_mode: str = "similar"  # similar | random
    path_select: str = "top"  # top | random | lowest
    mask_simu: bool = False
    mask_irt: bool = False
    variants: tuple[str, ...] = ()


_FIELD_NAMES = {f.name for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw, current):
    """Coerce a raw file/flag value to the type of the dataclass field."""
    if isinstance(raw, str):
        raw = raw.strip()
    if name == "variants":
        if isinstance(raw, str):
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        return tuple(raw)
    if isinstance(current, bool):
        if isinstance(raw, bool):
            return raw
        if str(raw).lower() in ("true", "1", "yes"):
            return True
        if str(raw).lower() in ("false", "0", "no"):
            return False
        raise HisektError(f"config field {name!r}: expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return str(raw)


def load_config_file(path: str | Path) -> dict:
    """Parse a flat ``key = value`` config file; ``#`` starts a comment."""
    values: dict = {}
    defaults = RunConfig()
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise HisektError(f"{path}:{line_no}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_NAMES:
            raise HisektError(f"{path}:{line_no}: unknown config key {key!r}")
        raw = raw.strip("\"'")
        values[key] = _coerce(key, raw, getattr(defaults, key))
    return values


def resolve_config(file_values: Mapping | None = None, overrides: Mapping | None = None) -> RunConfig:
    """Defaults, then config file, then explicit flag overrides (flags win)."""
    defaults = RunConfig()
    merged = {}
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            if key not in _FIELD_NAMES:
                raise HisektError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, value, getattr(defaults, key))
    cfg = dataclasses.replace(defaults, **merged)
    if not cfg.data:
        raise HisektError("config is missing the input data path (set data= or --data)")
    return cfg


def fingerprint(cfg: RunConfig) -> str:
    """Stable hash of the fully resolved configuration."""
    payload = dataclasses.asdict(cfg)
    payload["variants"] = list(payload["variants"])
    canonical = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(canonical).hexdigest()[:16]
