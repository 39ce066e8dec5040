"""Run the adapter: `python -m medsam_adapter` or the `medsam-adapter` script.

Environment variables ADAPTER_PORT, ADAPTER_CHECKPOINT, ADAPTER_STUB, and
ADAPTER_DEVICE provide defaults; flags override.
"""

from __future__ import annotations

import argparse

import uvicorn

from .app import create_app
from .config import AdapterConfig


def main() -> None:
    env = AdapterConfig.from_env()
    parser = argparse.ArgumentParser(prog="medsam-adapter")
    parser.add_argument("--port", type=int, default=env.port)
    parser.add_argument("--checkpoint", default=env.checkpoint, help="MedSAM .pth path (omit for stub mode)")
    parser.add_argument("--device", default=env.device)
    parser.add_argument("--stub", action="store_true", default=env.stub_mode, help="serve the stub model")
    args = parser.parse_args()
    cfg = AdapterConfig(
        checkpoint=args.checkpoint,
        device=args.device,
        port=args.port,
        stub_mode=args.stub or args.checkpoint is None,
    )
    uvicorn.run(create_app(cfg), host="0.0.0.0", port=cfg.port, log_level="info")


if __name__ == "__main__":
    main()
