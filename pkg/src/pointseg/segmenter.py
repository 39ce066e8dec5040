"""Box-prompt segmentation backends: a synthetic oracle for closed-loop desk
runs and an HTTP client for a real model served behind the wire protocol.

Wire protocol (HTTP, JSON, UTF-8):
  POST /v1/segment
    request:  {"width": int, "height": int,
               "pixels_b64": base64 little-endian float32 row-major in [0,1],
               "box": [x0, y0, x1, y1]}          # half-open pixel box
    response: {"mask_b64": base64 row-major uint8 (0/255), "confidence": float}
  GET /v1/health -> {"status": "ok", "model": str}
"""

from __future__ import annotations

import base64
import time
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
import requests
from scipy import ndimage

from .errors import BackendError, DimensionMismatch
from .geometry import BBox, Image2D, Mask2D, clip_box, mask_intersect_box


@dataclass(frozen=True)
class SegmentRequest:
    image: Image2D
    box: BBox

    def __post_init__(self):
        if clip_box(self.box, self.image.width, self.image.height) != self.box:
            raise ValueError(f"box {self.box} not contained in the request image")


@dataclass(frozen=True)
class SegmentResponse:
    mask: Mask2D
    confidence: float = 1.0


class SegmenterBackend(Protocol):
    def segment(self, req: SegmentRequest) -> SegmentResponse: ...


def segment(backend: SegmenterBackend, req: SegmentRequest) -> SegmentResponse:
    """Dispatch to a backend and enforce the mask-dimension contract."""
    resp = backend.segment(req)
    if (resp.mask.width, resp.mask.height) != (req.image.width, req.image.height):
        raise DimensionMismatch(
            f"backend returned {resp.mask.width}x{resp.mask.height} mask for a "
            f"{req.image.width}x{req.image.height} image"
        )
    return resp


def _dice_bits(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (na + nb)


@dataclass(frozen=True)
class OracleConfig:
    """Noise model for the synthetic oracle: boundary pixels (and pixels up
    to a Chebyshev radius around them) flip with a fixed probability."""

    perturb_radius: int = 0
    perturb_rate: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.perturb_radius < 0 or not 0.0 <= self.perturb_rate <= 1.0:
            raise ValueError(f"invalid oracle config {self}")


def oracle_segment(cfg: OracleConfig, gt: Mask2D, req: SegmentRequest) -> SegmentResponse:
    """Ground truth clipped to the box, plus seeded boundary noise.

    The per-call RNG is derived from (rng_seed, box, image size) so identical
    requests always produce identical responses. Confidence is the Dice score
    between the noiseless and perturbed masks.
    """
    if (gt.width, gt.height) != (req.image.width, req.image.height):
        raise DimensionMismatch("oracle ground truth does not match the request image")
    base = mask_intersect_box(gt, req.box)
    if cfg.perturb_rate <= 0.0:
        return SegmentResponse(mask=base, confidence=1.0)
    bits = base.bits
    boundary = np.zeros_like(bits)
    boundary[:-1] |= bits[:-1] != bits[1:]
    boundary[1:] |= bits[1:] != bits[:-1]
    boundary[:, :-1] |= bits[:, :-1] != bits[:, 1:]
    boundary[:, 1:] |= bits[:, 1:] != bits[:, :-1]
    if cfg.perturb_radius > 0:
        size = 2 * cfg.perturb_radius + 1
        candidates = ndimage.binary_dilation(boundary, structure=np.ones((size, size), dtype=bool))
    else:
        candidates = boundary
    flat = np.flatnonzero(candidates)
    b = req.box
    seed = np.random.SeedSequence(
        [cfg.rng_seed, b.x0, b.y0, b.x1, b.y1, req.image.width, req.image.height]
    )
    rng = np.random.default_rng(seed)
    flips = flat[rng.random(flat.size) < cfg.perturb_rate]
    perturbed = bits.copy()
    perturbed.flat[flips] ^= True
    perturbed = mask_intersect_box(Mask2D(perturbed), req.box)
    return SegmentResponse(mask=perturbed, confidence=_dice_bits(bits, perturbed.bits))


class OracleBackend:
    """Synthetic stand-in for a box-prompt segmentation model."""

    def __init__(self, cfg: OracleConfig, gt: Mask2D):
        self.cfg = cfg
        self.gt = gt

    def segment(self, req: SegmentRequest) -> SegmentResponse:
        return oracle_segment(self.cfg, self.gt, req)


def encode_segment_request(req: SegmentRequest) -> dict:
    pixels = np.ascontiguousarray(req.image.pixels, dtype="<f4")
    return {
        "width": req.image.width,
        "height": req.image.height,
        "pixels_b64": base64.b64encode(pixels.tobytes()).decode("ascii"),
        "box": list(req.box.as_tuple()),
    }


def decode_segment_response(payload: object, width: int, height: int) -> SegmentResponse:
    if not isinstance(payload, dict) or "mask_b64" not in payload:
        raise BackendError("protocol", "response missing mask_b64")
    try:
        raw = base64.b64decode(payload["mask_b64"], validate=True)
    except Exception as e:
        raise BackendError("protocol", f"mask_b64 is not valid base64: {e}") from e
    if len(raw) != width * height:
        raise BackendError(
            "protocol", f"mask has {len(raw)} bytes, expected {width * height}"
        )
    bits = np.frombuffer(raw, dtype=np.uint8).reshape(height, width) > 0
    confidence = payload.get("confidence", 1.0)
    if not isinstance(confidence, (int, float)) or not 0.0 <= float(confidence) <= 1.0:
        raise BackendError("protocol", f"confidence {confidence!r} outside [0, 1]")
    return SegmentResponse(mask=Mask2D(bits), confidence=float(confidence))


class RemoteBackend:
    """HTTP client for the wire protocol. Requests are idempotent; transient
    failures (connect, timeout, non-200) are retried with backoff."""

    def __init__(
        self,
        endpoint: str,
        retries: int = 2,
        timeout: float = 10.0,
        backoff: float = 0.05,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.retries = retries
        self.timeout = timeout
        self.backoff = backoff
        self._sleep = sleep

    def segment(self, req: SegmentRequest) -> SegmentResponse:
        payload = encode_segment_request(req)
        url = f"{self.endpoint}/v1/segment"
        last: BackendError | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = requests.post(url, json=payload, timeout=self.timeout)
            except requests.exceptions.Timeout as e:
                last = BackendError("timeout", str(e))
            except requests.exceptions.ConnectionError as e:
                last = BackendError("connect", str(e))
            else:
                if resp.status_code != 200:
                    detail = resp.text[:200]
                    try:
                        detail = resp.json().get("error", detail)
                    except ValueError:
                        pass
                    last = BackendError("server", f"HTTP {resp.status_code}: {detail}")
                else:
                    try:
                        body = resp.json()
                    except ValueError as e:
                        raise BackendError("protocol", f"response is not JSON: {e}") from e
                    return decode_segment_response(body, req.image.width, req.image.height)
            if attempt < self.retries:
                self._sleep(self.backoff * (2**attempt))
        assert last is not None
        raise last

    def health(self) -> dict:
        try:
            resp = requests.get(f"{self.endpoint}/v1/health", timeout=self.timeout)
        except requests.exceptions.Timeout as e:
            raise BackendError("timeout", str(e)) from e
        except requests.exceptions.ConnectionError as e:
            raise BackendError("connect", str(e)) from e
        if resp.status_code != 200:
            raise BackendError("server", f"HTTP {resp.status_code}")
        try:
            return resp.json()
        except ValueError as e:
            raise BackendError("protocol", f"health response is not JSON: {e}") from e
