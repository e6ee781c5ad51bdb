"""Serve the bridge: `splatbridge --mode mock --operator grayscale --port 8831`."""

from __future__ import annotations

import argparse
import json
import sys

import uvicorn

from .service import BridgeConfig, create_app


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatbridge")
    parser.add_argument("--mode", choices=("mock", "real"), default="mock")
    parser.add_argument("--operator", default="grayscale",
                        help="mock-mode edit operator")
    parser.add_argument("--param", action="append", metavar="KEY=VALUE",
                        help="operator parameter (repeatable)")
    parser.add_argument("--model-id", default="timbrooks/instruct-pix2pix")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--max-batch", type=int, default=16)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8831)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    params = {}
    for item in args.param or []:
        if "=" not in item:
            print(f"error: --param expects KEY=VALUE, got '{item}'", file=sys.stderr)
            return 2
        key, value = item.split("=", 1)
        try:
            params[key.strip()] = json.loads(value.strip())
        except json.JSONDecodeError:
            params[key.strip()] = value.strip()
    try:
        config = BridgeConfig(
            mode=args.mode,
            operator=args.operator,
            operator_params=params,
            model_id=args.model_id,
            device=args.device,
            max_batch=args.max_batch,
        )
        app = create_app(config)
    except Exception as exc:  # noqa: BLE001 - startup errors are user-facing
        print(f"error: {exc}", file=sys.stderr)
        return 2
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


if __name__ == "__main__":
    sys.exit(main())
