# Copyright (c) 2025 Harrold Holdings GmbH
# Licensed under the Apache License, Version 2.0
# See LICENSE file in the project root for full license information.

"""
Configuration loading for image-debate runs.

The config file is YAML (JSON files load through the same parser). Values
from the environment override the file; CLI flags override both.
"""

import copy
import hashlib
import json
import logging
import os
import uuid
from dataclasses import dataclass
from datetime import UTC, datetime
from pathlib import Path
from typing import Any

import yaml
from dotenv import load_dotenv

from .backends import BackendConfigError, BackendSpec
from .debate import DebateConfig
from .exp1_harness import DEFAULT_SUMMARIZE_TOOL
from .particle_oracle import ParticleOptions
from .prompting import FinalObjective, PromptError, PromptTemplateSet

logger = logging.getLogger("image_debate.config")

BACKEND_ROLES = ("responder", "reviewer", "analyst", "critic")

DEFAULTS: dict[str, Any] = {
    "backends": {},
    "prompts": {},
    "debate": {},
    "exp1": {"summarize_tool": DEFAULT_SUMMARIZE_TOOL, "max_workers": 1, "ground_truth": None},
    "oracle": {},
    "secrets": {"backend": "env"},
    "logging": {"level": "INFO", "file": None},
    "output_dir": "runs",
}


class ConfigError(Exception):
    """Configuration file is unreadable or invalid."""


def load_config(config_path: str | Path | None = None) -> dict[str, Any]:
    """
    Load configuration from a YAML or JSON file.

    Args:
        config_path: Path to config file. If None, looks for config.yaml
                    in the project root (missing file means defaults).

    Returns:
        Configuration dictionary with defaults filled in.

    Raises:
        ConfigError: If an explicitly given file is missing or does not parse
    """
    load_dotenv()

    explicit = config_path is not None
    if config_path is None:
        config_path = Path(__file__).parent.parent / "config.yaml"

    try:
        with open(config_path, encoding="utf-8") as f:
            loaded = yaml.safe_load(f) or {}
    except FileNotFoundError as e:
        if explicit:
            raise ConfigError(f"Config file not found: {config_path}") from e
        logger.warning(f"Config file not found: {config_path}, using defaults")
        loaded = {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Config file {config_path} does not parse: {e}") from e

    if not isinstance(loaded, dict):
        raise ConfigError(f"Config file {config_path} must contain a mapping at the top level")

    config = merge(DEFAULTS, loaded)

    # Override with environment variables
    if level := os.getenv("IMAGE_DEBATE_LOG_LEVEL"):
        config["logging"]["level"] = level
    if workers := os.getenv("IMAGE_DEBATE_MAX_WORKERS"):
        try:
            config["exp1"]["max_workers"] = int(workers)
        except ValueError as e:
            raise ConfigError(f"IMAGE_DEBATE_MAX_WORKERS must be an integer, got {workers!r}") from e
    if output_dir := os.getenv("IMAGE_DEBATE_OUTPUT_DIR"):
        config["output_dir"] = output_dir

    return config


def merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    """Recursively merge `override` into a copy of `base`."""
    result = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(result.get(key), dict):
            result[key] = merge(result[key], value)
        else:
            result[key] = copy.deepcopy(value)
    return result


def config_digest(config: dict[str, Any]) -> str:
    """SHA-256 of the canonical (sorted-key) JSON rendering of the resolved config."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def generate_run_id() -> str:
    """
    Generate a unique run ID.

    Returns:
        "<UTC timestamp>_<8 hex chars>"
    """
    timestamp = datetime.now(UTC).strftime("%Y%m%d_%H%M%S")
    unique_id = uuid.uuid4().hex[:8]
    return f"{timestamp}_{unique_id}"


@dataclass(frozen=True)
class RunSettings:
    """Typed view over a resolved config mapping."""

    templates: PromptTemplateSet
    objective: FinalObjective
    debate: DebateConfig
    oracle: ParticleOptions
    backends: dict[str, BackendSpec]
    summarize_tool: str
    max_workers: int
    ground_truth: str | None
    secrets_backend: str
    output_dir: str

    @classmethod
    def from_config(cls, config: dict[str, Any]) -> "RunSettings":
        """
        Build typed settings.

        Raises:
            ConfigError: If any section is invalid
        """
        try:
            prompts = dict(config.get("prompts") or {})
            objective = FinalObjective.from_dict(prompts.pop("objective", None))
            backends = {}
            for role, spec in (config.get("backends") or {}).items():
                if role not in BACKEND_ROLES:
                    raise ConfigError(f"Unknown backend role '{role}' (expected one of {', '.join(BACKEND_ROLES)})")
                backends[role] = BackendSpec.from_dict(spec)
            exp1 = config.get("exp1") or {}
            return cls(
                templates=PromptTemplateSet.from_dict(prompts),
                objective=objective,
                debate=DebateConfig.from_dict(config.get("debate")),
                oracle=ParticleOptions.from_dict(config.get("oracle")),
                backends=backends,
                summarize_tool=exp1.get("summarize_tool", DEFAULT_SUMMARIZE_TOOL),
                max_workers=int(exp1.get("max_workers", 1)),
                ground_truth=exp1.get("ground_truth"),
                secrets_backend=(config.get("secrets") or {}).get("backend", "env"),
                output_dir=str(config.get("output_dir", "runs")),
            )
        except ConfigError:
            raise
        except (BackendConfigError, PromptError, ValueError, TypeError, KeyError) as e:
            raise ConfigError(f"Invalid configuration: {e}") from e

    def backend(self, role: str) -> BackendSpec:
        """
        Spec for a backend role.

        Raises:
            ConfigError: If the role is not configured
        """
        if role not in self.backends:
            raise ConfigError(f"No backend configured for role '{role}'")
        return self.backends[role]
