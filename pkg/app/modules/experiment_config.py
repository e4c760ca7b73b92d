"""
Experiment Config Files
YAML documents ↔ ExperimentConfig, with field-level diagnostics.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Optional, Union

import yaml
from pydantic import ValidationError

from app.models import ExperimentConfig

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Raised when a config document fails to parse or validate; holds one diagnostic per field."""

    def __init__(self, diagnostics: list[str], source: str = "<config>"):
        self.diagnostics = diagnostics
        self.source = source
        super().__init__(f"{source}: " + "; ".join(diagnostics))


def _diagnostics(error: ValidationError) -> list[str]:
    out = []
    for err in error.errors():
        loc = ".".join(str(part) for part in err["loc"]) or "<root>"
        out.append(f"{loc}: {err['msg']}")
    return out


def parse_config(document: Union[str, dict, None], source: str = "<config>") -> ExperimentConfig:
    if isinstance(document, str):
        try:
            document = yaml.safe_load(document)
        except yaml.YAMLError as e:
            raise ConfigError([f"<yaml>: {e}"], source) from e
    if document is None:
        document = {}
    if not isinstance(document, dict):
        raise ConfigError([f"<root>: expected a mapping, got {type(document).__name__}"], source)
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(_diagnostics(e), source) from e


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError([f"<file>: {e}"], str(path)) from e
    config = parse_config(text, source=str(path))
    logger.debug("Loaded config %s (env=%s, algo=%s)", path, config.env.name.value, config.algo.value)
    return config


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)


def save_config(config: ExperimentConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(config), encoding="utf-8")
    return path


def apply_overrides(
    config: ExperimentConfig,
    seed: Optional[int] = None,
    workers: Optional[int] = None,
    remote_workers: Optional[int] = None,
    output_dir: Optional[str] = None,
) -> ExperimentConfig:
    """CLI flags win over file values; the result is re-validated."""
    data: dict[str, Any] = config.model_dump(mode="json")
    if seed is not None:
        data["seeds"] = [seed]
    if workers is not None:
        data["workers"] = workers
    if remote_workers is not None:
        data["remote_workers"] = remote_workers
    if output_dir is not None:
        data["output_dir"] = output_dir
    return parse_config(data, source="<overrides>")
