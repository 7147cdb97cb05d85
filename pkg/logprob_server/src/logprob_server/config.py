"""Startup settings for the sidecar."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ServerConfig:
    """Everything the server needs to come up.

    ``model`` is a local path or hub identifier for a causal language
    model with token log-probabilities. It is loaded exactly once when
    the app is created. ``max_batch_size`` bounds how many requests may
    be admitted concurrently; extra requests are refused as busy rather
    than queued without limit. ``auth_token``, when set, switches on
    bearer authentication for every route.
    """

    model: str
    device: str = "cpu"
    max_batch_size: int = 8
    port: int = 8000
    auth_token: str | None = None

    def __post_init__(self) -> None:
        if not self.model:
            raise ValueError("model identifier must be non-empty")
        if self.max_batch_size < 1:
            raise ValueError("max_batch_size must be >= 1")
        if not 0 <= self.port <= 65535:
            raise ValueError(f"port {self.port} out of range")
