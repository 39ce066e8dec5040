"""FastAPI application implementing the segmentation wire protocol.

  POST /v1/segment
    request:  {"width": int, "height": int,
               "pixels_b64": base64 little-endian float32 row-major in [0,1],
               "box": [x0, y0, x1, y1]}          # half-open pixel box
    response: {"mask_b64": base64 row-major uint8 (0/255), "confidence": float}
  GET /v1/health -> {"status": "ok", "model": str}

Schema violations return 400 with an error string naming the offending
field; inference failures return 500.
"""

from __future__ import annotations

import base64
import binascii

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .config import AdapterConfig
from .model import build_model


class SchemaError(Exception):
    pass


def _require_int(body: dict, field: str, minimum: int = 1) -> int:
    if field not in body:
        raise SchemaError(f"missing field '{field}'")
    value = body[field]
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(f"field '{field}' must be an integer")
    if value < minimum:
        raise SchemaError(f"field '{field}' must be >= {minimum}")
    return value


def _parse_request(body: object) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    if not isinstance(body, dict):
        raise SchemaError("request body must be a JSON object")
    width = _require_int(body, "width")
    height = _require_int(body, "height")
    if "pixels_b64" not in body:
        raise SchemaError("missing field 'pixels_b64'")
    if not isinstance(body["pixels_b64"], str):
        raise SchemaError("field 'pixels_b64' must be a base64 string")
    try:
        raw = base64.b64decode(body["pixels_b64"], validate=True)
    except (binascii.Error, ValueError) as e:
        raise SchemaError(f"field 'pixels_b64' is not valid base64: {e}") from e
    if len(raw) != 4 * width * height:
        raise SchemaError(
            f"field 'pixels_b64' decodes to {len(raw)} bytes, expected {4 * width * height} "
            "(little-endian float32, row-major)"
        )
    pixels = np.frombuffer(raw, dtype="<f4").reshape(height, width).astype(np.float32)
    if not np.all(np.isfinite(pixels)):
        raise SchemaError("field 'pixels_b64' contains non-finite values")
    if "box" not in body:
        raise SchemaError("missing field 'box'")
    box = body["box"]
    if (
        not isinstance(box, list)
        or len(box) != 4
        or any(isinstance(v, bool) or not isinstance(v, int) for v in box)
    ):
        raise SchemaError("field 'box' must be a list of 4 integers [x0, y0, x1, y1]")
    x0, y0, x1, y1 = box
    if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
        raise SchemaError("field 'box' must satisfy 0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height")
    return pixels, (x0, y0, x1, y1)


def create_app(cfg: AdapterConfig) -> FastAPI:
    app = FastAPI(title="medsam-adapter", docs_url=None, redoc_url=None)
    model = build_model(cfg.checkpoint, cfg.device, cfg.stub_mode)

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "model": model.name}

    @app.post("/v1/segment")
    async def segment(request: Request):
        try:
            body = await request.json()
        except Exception:
            return JSONResponse({"error": "request body is not valid JSON"}, status_code=400)
        try:
            pixels, box = _parse_request(body)
        except SchemaError as e:
            return JSONResponse({"error": str(e)}, status_code=400)
        try:
            mask, confidence = model.segment(pixels, box)
        except Exception as e:  # inference failure
            return JSONResponse({"error": f"inference failed: {e}"}, status_code=500)
        payload = np.where(mask, 255, 0).astype(np.uint8).tobytes()
        return {
            "mask_b64": base64.b64encode(payload).decode("ascii"),
            "confidence": confidence,
        }

    return app
