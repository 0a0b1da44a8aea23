# Copyright (c) 2025 Harrold Holdings GmbH
# Licensed under the Apache License, Version 2.0
# See LICENSE file in the project root for full license information.

"""
API key lookup for HTTP chat backends.

Keys are read, never written: the environment (and a .env file loaded by
the config layer) comes first, the OS keyring second when selected.

Usage:
    from src.key_manager import KeyManager

    km = KeyManager("auto")
    key = km.get_secret("DEBATE_REVIEWER_API_KEY")
"""

import logging
import os
from abc import ABC, abstractmethod
from typing import Literal

logger = logging.getLogger("image_debate.key_manager")

KeySource = Literal["keyring", "env", "auto"]


class KeyBackend(ABC):
    """A read-only source of API keys."""

    name: str

    @abstractmethod
    def get_secret(self, key_name: str) -> str | None:
        """Look up a key by its env-var name; None when absent."""


class EnvironmentBackend(KeyBackend):
    """Process environment. Empty values count as unset."""

    name = "env"

    def get_secret(self, key_name: str) -> str | None:
        return os.environ.get(key_name) or None


class KeyringBackend(KeyBackend):
    """
    OS keyring (macOS Keychain, Windows Credential Manager, Secret Service).

    Entries live under the service "image-debate" with the env-var name as
    the user name, so `keyring set image-debate DEBATE_REVIEWER_API_KEY`
    stores a key the backends can find.
    """

    name = "keyring"
    SERVICE_NAME = "image-debate"

    def __init__(self):
        try:
            import keyring
        except ImportError as e:
            raise ImportError("keyring package required for keyring key lookup. Install with: pip install keyring") from e
        self._keyring = keyring

    def get_secret(self, key_name: str) -> str | None:
        return self._keyring.get_password(self.SERVICE_NAME, key_name) or None


class KeyManager:
    """
    Ordered key lookup: the environment, then the keyring when selected.

    "auto" selects the keyring only when it is installed and has a usable
    backend.
    """

    def __init__(self, backend: KeySource = "env"):
        """
        Args:
            backend: "env", "keyring" or "auto"

        Raises:
            ValueError: If the backend name is unknown
        """
        if backend == "auto":
            backend = "keyring" if self._keyring_usable() else "env"

        self._sources: list[KeyBackend] = [EnvironmentBackend()]
        if backend == "keyring":
            self._sources.append(KeyringBackend())
        elif backend != "env":
            raise ValueError(f"Unknown backend: {backend}")

        self._backend_type = backend

    @staticmethod
    def _keyring_usable() -> bool:
        try:
            import keyring

            keyring.get_keyring()
            return True
        except Exception:
            return False

    @property
    def backend_type(self) -> str:
        """The selected backend ("env" or "keyring")."""
        return self._backend_type

    def get_secret(self, key_name: str) -> str | None:
        """
        Resolve a key.

        Args:
            key_name: Environment variable name (also the keyring entry name)

        Returns:
            The key, or None if no source has it
        """
        for source in self._sources:
            value = source.get_secret(key_name)
            if value is not None:
                logger.debug(f"Resolved {key_name} from {source.name}")
                return value
        return None
