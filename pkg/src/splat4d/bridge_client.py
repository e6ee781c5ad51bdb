"""HTTP client for the external edit/guidance service.

Wire protocol (JSON bodies):
  POST /v1/edit      {images: [b64 PNG], instruction, s_I, s_T, seed}
                     -> {images: [b64 PNG]} in request order
  POST /v1/guidance  {rendered: [b64 raw f32 HxWx3 LE], originals: [b64 PNG],
                      instruction, s_I, s_T, t, seed}
                     -> {grad_images: [b64 raw f32 HxWx3]}
Failures return non-200 with {error}; the client retries twice, then raises
GuidanceError carrying the endpoint and last status.
"""

from __future__ import annotations

import base64
import io

import numpy as np
import requests
from PIL import Image

from .errors import GuidanceError

RETRIES = 2  # additional attempts after the first failure
DEFAULT_TIMEOUT = 30.0


def encode_png_b64(img: np.ndarray) -> str:
    byte = np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255)
    buf = io.BytesIO()
    Image.fromarray(byte.astype(np.uint8), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png_b64(data: str) -> np.ndarray:
    raw = base64.b64decode(data)
    with Image.open(io.BytesIO(raw)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def encode_f32_b64(arr: np.ndarray) -> str:
    return base64.b64encode(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()
    ).decode("ascii")


def decode_f32_b64(data: str, shape: tuple[int, ...]) -> np.ndarray:
    raw = base64.b64decode(data)
    count = int(np.prod(shape))
    if len(raw) != count * 4:
        raise GuidanceError(
            f"raw f32 payload has {len(raw)} bytes, expected {count * 4} for shape {shape}"
        )
    return np.frombuffer(raw, dtype="<f4", count=count).astype(np.float64).reshape(shape)


def _post(url: str, endpoint: str, payload: dict, timeout: float) -> dict:
    full = url.rstrip("/") + endpoint
    last_status = None
    last_err = None
    for _attempt in range(1 + RETRIES):
        try:
            resp = requests.post(full, json=payload, timeout=timeout)
        except requests.RequestException as exc:
            last_err = str(exc)
            continue
        if resp.status_code == 200:
            return resp.json()
        last_status = resp.status_code
        try:
            last_err = resp.json().get("error", resp.text)
        except ValueError:
            last_err = resp.text
    raise GuidanceError(
        f"{endpoint} failed after {1 + RETRIES} attempts: {last_err}",
        endpoint=full,
        status=last_status,
    )


def post_edit(
    url: str,
    images: list[np.ndarray],
    instruction: str,
    s_image: float,
    s_text: float,
    seed: int,
    timeout: float = DEFAULT_TIMEOUT,
) -> list[np.ndarray]:
    payload = {
        "images": [encode_png_b64(img) for img in images],
        "instruction": instruction,
        "s_I": s_image,
        "s_T": s_text,
        "seed": seed,
    }
    body = _post(url, "/v1/edit", payload, timeout)
    if "images" not in body or len(body["images"]) != len(images):
        raise GuidanceError(
            f"/v1/edit returned {len(body.get('images', []))} images for {len(images)} inputs",
            endpoint=url.rstrip("/") + "/v1/edit",
        )
    out = [decode_png_b64(s) for s in body["images"]]
    for got, src in zip(out, images):
        if got.shape != src.shape:
            raise GuidanceError(
                f"/v1/edit returned shape {got.shape}, expected {src.shape}",
                endpoint=url.rstrip("/") + "/v1/edit",
            )
    return out


def post_guidance(
    url: str,
    rendered: list[np.ndarray],
    originals: list[np.ndarray],
    instruction: str,
    s_image: float,
    s_text: float,
    t: float,
    seed: int,
    timeout: float = DEFAULT_TIMEOUT,
) -> list[np.ndarray]:
    payload = {
        "rendered": [encode_f32_b64(img) for img in rendered],
        "originals": [encode_png_b64(img) for img in originals],
        "instruction": instruction,
        "s_I": s_image,
        "s_T": s_text,
        "t": t,
        "seed": seed,
    }
    body = _post(url, "/v1/guidance", payload, timeout)
    if "grad_images" not in body or len(body["grad_images"]) != len(rendered):
        raise GuidanceError(
            f"/v1/guidance returned {len(body.get('grad_images', []))} grads "
            f"for {len(rendered)} renders",
            endpoint=url.rstrip("/") + "/v1/guidance",
        )
    return [
        decode_f32_b64(s, img.shape) for s, img in zip(body["grad_images"], rendered)
    ]
