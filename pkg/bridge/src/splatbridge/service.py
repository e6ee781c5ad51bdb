"""FastAPI service for the edit/guidance wire protocol.

Endpoints:
  GET  /v1/health    -> {"mode": ..., "ok": true}
  POST /v1/edit      -> edited PNGs, request order preserved
  POST /v1/guidance  -> image-space guidance gradients as raw f32 planes

Mock mode answers both endpoints from the configured procedural operator
and the analytic point-mass residual; it needs no model weights. Real mode
hosts an instruction-conditioned latent diffusion editor (loaded lazily;
see `real.py`) and maps its composed noise residual into image space before
it crosses the wire, so clients stay free of latent-space details.

Errors are always JSON: non-200 with {"error": "..."}; malformed requests
come back 400 with the offending field path in the message.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import ops
from .codecs import CodecError, decode_f32, decode_png, encode_f32, encode_png


@dataclass
class BridgeConfig:
    mode: str = "mock"                   # mock | real
    operator: str = "grayscale"          # mock-mode edit semantics
    operator_params: dict = dc_field(default_factory=dict)
    model_id: str = "timbrooks/instruct-pix2pix"
    device: str = "cpu"
    s_image_default: float = 1.2
    s_text_default: float = 8.5
    max_batch: int = 16
    request_timeout: float = 60.0

    def __post_init__(self):
        if self.mode not in ("mock", "real"):
            raise ValueError(f"BridgeConfig: mode must be 'mock' or 'real', got '{self.mode}'")
        if self.mode == "mock" and self.operator not in ops.OPERATOR_KINDS:
            raise ValueError(
                f"BridgeConfig: unknown mock operator '{self.operator}' "
                f"(choose from {', '.join(ops.OPERATOR_KINDS)})"
            )


class EditRequest(BaseModel):
    images: list[str]
    instruction: str
    s_I: float
    s_T: float
    seed: int


class GuidanceRequest(BaseModel):
    rendered: list[str]
    originals: list[str]
    instruction: str
    s_I: float
    s_T: float
    t: float
    seed: int


class ApiError(Exception):
    def __init__(self, status: int, message: str):
        self.status = status
        self.message = message


def _format_validation_error(exc: RequestValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err.get("loc", ()) if p != "body")
        parts.append(f"{loc}: {err.get('msg', 'invalid')}")
    return "; ".join(parts) or "malformed request"


def create_app(config: BridgeConfig | None = None) -> FastAPI:
    config = config or BridgeConfig()
    app = FastAPI(title="splatbridge", version="0.1.0")
    backend = None
    if config.mode == "real":
        from .real import load_real_editor

        backend = load_real_editor(config)

    @app.exception_handler(ApiError)
    async def api_error_handler(_req: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status, content={"error": exc.message})

    @app.exception_handler(RequestValidationError)
    async def validation_handler(_req: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"error": _format_validation_error(exc)})

    @app.exception_handler(Exception)
    async def fallback_handler(_req: Request, exc: Exception):
        return JSONResponse(status_code=500, content={"error": str(exc)})

    @app.get("/v1/health")
    async def health():
        return {"mode": config.mode, "ok": True}

    @app.post("/v1/edit")
    async def edit(body: EditRequest):
        if not body.images:
            raise ApiError(400, "images: must contain at least one image")
        if len(body.images) > config.max_batch:
            raise ApiError(400, f"images: batch {len(body.images)} exceeds max {config.max_batch}")
        try:
            decoded = [
                decode_png(data, f"images[{i}]") for i, data in enumerate(body.images)
            ]
        except CodecError as exc:
            raise ApiError(400, str(exc)) from exc
        try:
            if config.mode == "mock":
                edited = [
                    ops.apply_operator(config.operator, config.operator_params, img)
                    for img in decoded
                ]
            else:
                edited = backend.edit(decoded, body.instruction, body.s_I, body.s_T, body.seed)
        except ValueError as exc:
            raise ApiError(400, str(exc)) from exc
        return {"images": [encode_png(img) for img in edited]}

    @app.post("/v1/guidance")
    async def guidance(body: GuidanceRequest):
        if not body.rendered:
            raise ApiError(400, "rendered: must contain at least one image")
        if len(body.rendered) != len(body.originals):
            raise ApiError(
                400,
                f"rendered: got {len(body.rendered)} entries but originals has "
                f"{len(body.originals)}",
            )
        if len(body.rendered) > config.max_batch:
            raise ApiError(400, f"rendered: batch exceeds max {config.max_batch}")
        if not (0.0 < body.t < 1.0):
            raise ApiError(400, f"t: {body.t} must lie strictly inside (0, 1)")
        try:
            originals = [
                decode_png(data, f"originals[{i}]") for i, data in enumerate(body.originals)
            ]
            rendered = [
                decode_f32(data, originals[i].shape, f"rendered[{i}]")
                for i, data in enumerate(body.rendered)
            ]
        except CodecError as exc:
            raise ApiError(400, str(exc)) from exc
        try:
            if config.mode == "mock":
                grads = []
                for img, orig in zip(rendered, originals):
                    target = ops.apply_operator(
                        config.operator, config.operator_params, orig
                    )
                    grads.append(ops.oracle_residual(img, target, body.t))
            else:
                grads = backend.guidance(
                    rendered, originals, body.instruction, body.s_I, body.s_T,
                    body.t, body.seed,
                )
        except ValueError as exc:
            raise ApiError(400, str(exc)) from exc
        return {"grad_images": [encode_f32(np.asarray(g)) for g in grads]}

    return app
