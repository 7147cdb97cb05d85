"""Command-line launcher: ``logprob-server --model <path-or-id>``."""

from __future__ import annotations

import argparse
import os

import uvicorn

from .app import create_app
from .config import ServerConfig


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(
        prog="logprob-server",
        description="Serve conditional log-probabilities, beam-search "
        "generation, and embeddings of a causal language model over HTTP.",
    )
    parser.add_argument("--model", required=True, help="local path or hub identifier")
    parser.add_argument("--device", default="cpu", help="torch device (default: cpu)")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8000)
    parser.add_argument(
        "--max-batch-size",
        type=int,
        default=8,
        help="concurrent requests admitted before the server answers 503",
    )
    parser.add_argument(
        "--auth-token",
        default=os.environ.get("LOGPROB_SERVER_TOKEN"),
        help="bearer token required on every route "
        "(default: $LOGPROB_SERVER_TOKEN; unset disables auth)",
    )
    args = parser.parse_args(argv)

    config = ServerConfig(
        model=args.model,
        device=args.device,
        max_batch_size=args.max_batch_size,
        port=args.port,
        auth_token=args.auth_token,
    )
    app = create_app(config)
    uvicorn.run(app, host=args.host, port=config.port)


if __name__ == "__main__":
    main()
