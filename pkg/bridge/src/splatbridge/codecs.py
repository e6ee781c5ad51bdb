"""Wire payload codecs: base64 PNG images and raw little-endian float32 planes."""

from __future__ import annotations

import base64
import binascii
import io

import numpy as np
from PIL import Image


class CodecError(ValueError):
    """Payload that cannot be decoded; message carries the field path."""


def decode_png(data: str, field: str) -> np.ndarray:
    try:
        raw = base64.b64decode(data, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise CodecError(f"{field}: invalid base64: {exc}") from exc
    try:
        with Image.open(io.BytesIO(raw)) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except Exception as exc:  # noqa: BLE001 - any decode failure is a client error
        raise CodecError(f"{field}: not a decodable PNG: {exc}") from exc
    return arr / 255.0


def encode_png(img: np.ndarray) -> str:
    byte = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(byte, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_f32(data: str, shape: tuple[int, ...], field: str) -> np.ndarray:
    try:
        raw = base64.b64decode(data, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise CodecError(f"{field}: invalid base64: {exc}") from exc
    count = int(np.prod(shape))
    if len(raw) != count * 4:
        raise CodecError(
            f"{field}: raw f32 payload has {len(raw)} bytes, expected {count * 4} "
            f"for shape {tuple(shape)}"
        )
    return np.frombuffer(raw, dtype="<f4", count=count).astype(np.float64).reshape(shape)


def encode_f32(arr: np.ndarray) -> str:
    return base64.b64encode(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()
    ).decode("ascii")
