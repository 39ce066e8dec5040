"""Adapter configuration from arguments or environment variables."""

from __future__ import annotations

import os
from dataclasses import dataclass


@dataclass(frozen=True)
class AdapterConfig:
    """`stub_mode` is forced on whenever no checkpoint is configured."""

    checkpoint: str | None = None
    device: str = "cpu"
    port: int = 8008
    stub_mode: bool = True

    def __post_init__(self):
        if self.checkpoint is None and not self.stub_mode:
            object.__setattr__(self, "stub_mode", True)

    @classmethod
    def from_env(cls) -> "AdapterConfig":
        checkpoint = os.environ.get("ADAPTER_CHECKPOINT") or None
        stub_env = os.environ.get("ADAPTER_STUB", "").lower()
        stub = checkpoint is None or stub_env in ("1", "true", "yes")
        return cls(
            checkpoint=checkpoint,
            device=os.environ.get("ADAPTER_DEVICE", "cpu"),
            port=int(os.environ.get("ADAPTER_PORT", "8008")),
            stub_mode=stub,
        )
