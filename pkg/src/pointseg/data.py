"""Dataset manifest, PGM raster I/O, and the synthetic phantom generator.

PGM support is binary P5 only (maxval 255 or 65535 on read; canonical
8-bit output). Manifests are JSON files next to the image/mask directories.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, FormatError, MissingFile
from .geometry import Image2D, Mask2D

_WHITESPACE = b" \t\n\r\x0b\x0c"


def _parse_pgm(data: bytes) -> tuple[int, int, int, np.ndarray]:
    """Parse binary P5 bytes into (width, height, maxval, samples)."""
    if data[:2] != b"P5":
        raise FormatError("magic", "not a binary PGM (P5) file")
    pos = 2
    tokens: list[int] = []
    while len(tokens) < 3:
        if pos >= len(data):
            raise FormatError("header", "unexpected end of header")
        c = data[pos : pos + 1]
        if c in b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
        elif c in _WHITESPACE:
            pos += 1
        elif c.isdigit():
            start = pos
            while pos < len(data) and data[pos : pos + 1].isdigit():
                pos += 1
            tokens.append(int(data[start:pos]))
        else:
            raise FormatError("header", f"unexpected byte {c!r} in header")
    width, height, maxval = tokens
    if width < 1 or height < 1:
        raise FormatError("header", f"bad dimensions {width}x{height}")
    if not 0 < maxval < 65536:
        raise FormatError("header", f"maxval {maxval} out of range")
    if pos >= len(data) or data[pos : pos + 1] not in _WHITESPACE:
        raise FormatError("header", "missing whitespace before raster")
    pos += 1
    count = width * height
    if maxval < 256:
        raw = data[pos : pos + count]
        if len(raw) < count:
            raise FormatError("truncated", f"expected {count} raster bytes, got {len(raw)}")
        samples = np.frombuffer(raw, dtype=np.uint8).astype(np.uint16)
    else:
        raw = data[pos : pos + 2 * count]
        if len(raw) < 2 * count:
            raise FormatError("truncated", f"expected {2 * count} raster bytes, got {len(raw)}")
        samples = np.frombuffer(raw, dtype=">u2").astype(np.uint16)
    return width, height, maxval, samples.reshape(height, width)


def read_pgm_image(data: bytes, spacing: float = 1.0) -> Image2D:
    """Decode a P5 PGM as an intensity image scaled to [0, 1]."""
    _, _, maxval, samples = _parse_pgm(data)
    return Image2D(samples.astype(np.float64) / maxval, spacing=spacing)


def read_pgm_mask(data: bytes) -> Mask2D:
    """Decode a P5 PGM as a binary mask (any sample > 0 is foreground)."""
    _, _, _, samples = _parse_pgm(data)
    return Mask2D(samples > 0)


def write_pgm(raster: Image2D | Mask2D) -> bytes:
    """Canonical P5 bytes: maxval 255, images quantized round-half-up."""
    if isinstance(raster, Mask2D):
        body = np.where(raster.bits, 255, 0).astype(np.uint8)
    else:
        q = np.floor(raster.pixels * 255.0 + 0.5)
        body = np.clip(q, 0, 255).astype(np.uint8)
    header = f"P5\n{body.shape[1]} {body.shape[0]}\n255\n".encode("ascii")
    return header + body.tobytes()


@dataclass(frozen=True)
class ManifestSample:
    id: str
    image_path: str
    mask_path: str
    class_id: int
    split: str


@dataclass
class DatasetManifest:
    version: int
    spacing_mm: float
    samples: list[ManifestSample]
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[ManifestSample]:
        return [s for s in self.samples if s.split == name]


def _manifest_dict(m: DatasetManifest) -> dict:
    return {
        "version": m.version,
        "spacing_mm": m.spacing_mm,
        "samples": [
            {
                "id": s.id,
                "image_path": s.image_path,
                "mask_path": s.mask_path,
                "class_id": s.class_id,
                "split": s.split,
            }
            for s in m.samples
        ],
    }


def save_manifest(m: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.write_text(json.dumps(_manifest_dict(m), indent=2, sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and validate a manifest; checks referenced files and raster
    dimension agreement eagerly."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError("header", f"manifest is not valid JSON: {e}") from e
    try:
        version = int(doc["version"])
        spacing = float(doc["spacing_mm"])
        raw_samples = doc["samples"]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError("header", f"manifest missing or malformed field: {e}") from e
    if version != 1:
        raise FormatError("header", f"unsupported manifest version {version}")
    if not spacing > 0:
        raise FormatError("header", f"spacing_mm must be positive, got {spacing}")
    samples = []
    seen: set[str] = set()
    for raw in raw_samples:
        try:
            s = ManifestSample(
                id=str(raw["id"]),
                image_path=str(raw["image_path"]),
                mask_path=str(raw["mask_path"]),
                class_id=int(raw["class_id"]),
                split=str(raw["split"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError("header", f"malformed sample entry: {e}") from e
        if s.id in seen:
            raise FormatError("header", f"duplicate sample id {s.id!r}")
        seen.add(s.id)
        if s.split not in ("train", "test"):
            raise FormatError("header", f"sample {s.id!r} has invalid split {s.split!r}")
        samples.append(s)
    manifest = DatasetManifest(version=version, spacing_mm=spacing, samples=samples, root=path.parent)
    for s in samples:
        img, mask = load_sample(manifest, s)
        if (img.width, img.height) != (mask.width, mask.height):
            raise DimensionMismatch(
                f"sample {s.id!r}: image {img.width}x{img.height} vs mask {mask.width}x{mask.height}"
            )
    return manifest


def load_sample(manifest: DatasetManifest, sample: ManifestSample) -> tuple[Image2D, Mask2D]:
    img_path = manifest.root / sample.image_path
    mask_path = manifest.root / sample.mask_path
    for p in (img_path, mask_path):
        if not p.is_file():
            raise MissingFile(str(p))
    img = read_pgm_image(img_path.read_bytes(), spacing=manifest.spacing_mm)
    mask = read_pgm_mask(mask_path.read_bytes())
    return img, mask


@dataclass(frozen=True)
class PhantomSpec:
    """Knobs for the synthetic blob-phantom generator.

    Default sizing produces structures substantially wider than the largest
    first-round box proposal, so single-pass segmentation is coverage-limited
    and iteration has measurable headroom.
    """

    count: int = 200
    width: int = 128
    height: int = 128
    blob_count: tuple[int, int] = (1, 3)
    radius: tuple[int, int] = (34, 56)
    contrast: float = 0.55
    noise_sigma: float = 0.03
    rng_seed: int = 42
    spacing_mm: float = 1.0

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ValueError("phantoms must be at least 16x16")
        if not (1 <= self.blob_count[0] <= self.blob_count[1]):
            raise ValueError("blob count range must be non-empty and positive")
        if not (1 <= self.radius[0] <= self.radius[1]):
            raise ValueError("radius range must be non-empty and positive")
        if 2 * self.radius[1] + 5 > min(self.width, self.height):
            raise ValueError("largest blob radius does not fit the image")


_BACKGROUND = 0.2
# Secondary blobs land within this Chebyshev offset of the first blob so a
# cluster stays connected-ish and reachable from its union tight-box center.
_CLUSTER_SPREAD = 30


def _render_phantom(spec: PhantomSpec, rng: np.random.Generator) -> tuple[Image2D, Mask2D]:
    h, w = spec.height, spec.width
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    image = np.full((h, w), _BACKGROUND)
    gt = np.zeros((h, w), dtype=bool)
    n_blobs = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
    first_center: tuple[int, int] | None = None
    for _ in range(n_blobs):
        rx = int(rng.integers(spec.radius[0], spec.radius[1] + 1))
        ry = int(rng.integers(spec.radius[0], spec.radius[1] + 1))
        lo_x, hi_x = rx + 2, w - rx - 3
        lo_y, hi_y = ry + 2, h - ry - 3
        if first_center is None:
            cx = int(rng.integers(lo_x, hi_x + 1))
            cy = int(rng.integers(lo_y, hi_y + 1))
            first_center = (cx, cy)
        else:
            cx = first_center[0] + int(rng.integers(-_CLUSTER_SPREAD, _CLUSTER_SPREAD + 1))
            cy = first_center[1] + int(rng.integers(-_CLUSTER_SPREAD, _CLUSTER_SPREAD + 1))
            cx = int(np.clip(cx, lo_x, hi_x))
            cy = int(np.clip(cy, lo_y, hi_y))
        inside = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
        image = image + spec.contrast * inside
        gt |= inside
    image = np.clip(image, 0.0, 1.0)
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=(h, w))
    image = np.clip(image, 0.0, 1.0)
    return Image2D(image, spacing=spec.spacing_mm), Mask2D(gt)


def gen_phantoms(spec: PhantomSpec, out_dir: str | Path) -> DatasetManifest:
    """Write `spec.count` image/mask PGM pairs plus manifest.json.

    Deterministic for a given spec; the first 80% of ids (in order) form the
    train split, the rest the test split.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.rng_seed)
    n_train = (spec.count * 4) // 5
    samples = []
    for i in range(spec.count):
        sid = f"phantom_{i:04d}"
        img, mask = _render_phantom(spec, rng)
        image_rel = f"images/{sid}.pgm"
        mask_rel = f"masks/{sid}.pgm"
        (out_dir / image_rel).write_bytes(write_pgm(img))
        (out_dir / mask_rel).write_bytes(write_pgm(mask))
        samples.append(
            ManifestSample(
                id=sid,
                image_path=image_rel,
                mask_path=mask_rel,
                class_id=1,
                split="train" if i < n_train else "test",
            )
        )
    manifest = DatasetManifest(version=1, spacing_mm=spec.spacing_mm, samples=samples, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
