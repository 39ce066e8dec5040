"""Segmentation metrics (Dice, Hausdorff in mm), dataset evaluation, and
overlay rendering."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import DatasetManifest, load_sample
from .errors import DimensionMismatch, FormatError
from .geometry import BBox, Image2D, Mask2D, box_iou, tight_box
from .pipeline import BackendFactory, IterationConfig, infer_iterative, point_from_mask
from .refiner import PrototypeBuffer, RefinerParams


def _check_dims(a: Mask2D, b: Mask2D) -> None:
    if (a.width, a.height) != (b.width, b.height):
        raise DimensionMismatch(f"{a.width}x{a.height} vs {b.width}x{b.height}")


def dice(a: Mask2D, b: Mask2D) -> float:
    """2|A∩B| / (|A|+|B|); 1.0 when both masks are empty."""
    _check_dims(a, b)
    na, nb = a.area, b.area
    if na == 0 and nb == 0:
        return 1.0
    inter = int((a.bits & b.bits).sum())
    return 2.0 * inter / (na + nb)


def _directed_distances(src: Mask2D, dst: Mask2D) -> np.ndarray:
    """Euclidean distance from every foreground pixel of src to the nearest
    foreground pixel of dst (exact, via the distance transform)."""
    dist_to_dst = ndimage.distance_transform_edt(~dst.bits)
    return dist_to_dst[src.bits]


def hausdorff_mm(a: Mask2D, b: Mask2D, spacing: float = 1.0) -> float:
    """Symmetric Hausdorff distance over pixel centers, scaled to mm.

    If either mask is empty the full image diagonal (in mm) is returned as a
    worst-case convention.
    """
    _check_dims(a, b)
    if a.area == 0 or b.area == 0:
        return math.hypot(a.width, a.height) * spacing
    hab = float(_directed_distances(a, b).max())
    hba = float(_directed_distances(b, a).max())
    return max(hab, hba) * spacing


def hd95_mm(a: Mask2D, b: Mask2D, spacing: float = 1.0) -> float:
    """95th percentile of the combined directed distances, scaled to mm."""
    _check_dims(a, b)
    if a.area == 0 or b.area == 0:
        return math.hypot(a.width, a.height) * spacing
    d = np.hstack([_directed_distances(a, b), _directed_distances(b, a)])
    return float(np.percentile(d, 95)) * spacing


@dataclass(frozen=True)
class SampleRow:
    id: str
    t: int
    dice: float
    hausdorff_mm: float
    box_iou_final: float
    rounds: int


@dataclass
class EvalReport:
    rows: list[SampleRow]
    aggregates: dict[int, dict[str, dict[str, float]]]
    spacing_mm: float
    hd_variant: str = "hd"

    def to_json_dict(self) -> dict:
        return {
            "schema_version": 1,
            "spacing_mm": self.spacing_mm,
            "hd_variant": self.hd_variant,
            "per_sample": [
                {
                    "id": r.id,
                    "T": r.t,
                    "dice": r.dice,
                    "hausdorff_mm": r.hausdorff_mm,
                    "box_iou_final": r.box_iou_final,
                    "rounds": r.rounds,
                }
                for r in self.rows
            ],
            "aggregates": {str(t): agg for t, agg in sorted(self.aggregates.items())},
        }

    def to_csv(self) -> str:
        lines = ["id,T,dice,hausdorff_mm,box_iou_final,rounds"]
        for r in self.rows:
            lines.append(
                f"{r.id},{r.t},{r.dice!r},{r.hausdorff_mm!r},{r.box_iou_final!r},{r.rounds}"
            )
        return "\n".join(lines) + "\n"

    def mean_dice(self, t: int) -> float:
        return self.aggregates[t]["dice"]["mean"]


def _aggregate(rows: list[SampleRow]) -> dict[int, dict[str, dict[str, float]]]:
    out: dict[int, dict[str, dict[str, float]]] = {}
    for t in sorted({r.t for r in rows}):
        sub = [r for r in rows if r.t == t]
        out[t] = {}
        for metric in ("dice", "hausdorff_mm", "box_iou_final"):
            vals = np.array([getattr(r, metric) for r in sub])
            out[t][metric] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=0))}
    return out


def evaluate(
    manifest: DatasetManifest,
    params: RefinerParams | None,
    buf: PrototypeBuffer | None,
    backend_factory: BackendFactory,
    t_values: list[int],
    base_cfg: IterationConfig,
    split: str = "test",
    jobs: int = 1,
    hd_variant: str = "hd",
) -> EvalReport:
    """Run the iterative loop per sample and T value; emits per-sample rows
    (merged in manifest order, independent of `jobs`) and per-T aggregates."""
    samples = manifest.split(split)
    if not samples:
        raise FormatError("header", f"no samples in split {split!r}")
    if hd_variant not in ("hd", "hd95"):
        raise ValueError(f"unknown hausdorff variant {hd_variant!r}")
    hd_fn = hausdorff_mm if hd_variant == "hd" else hd95_mm

    def eval_sample(sample) -> list[SampleRow]:
        img, gt = load_sample(manifest, sample)
        point = point_from_mask(gt, class_id=sample.class_id)
        gt_tight = tight_box(gt)
        backend = backend_factory(img, gt)
        rows = []
        for t in t_values:
            cfg = IterationConfig(
                rounds=t,
                seed_w=base_cfg.seed_w,
                seed_h=base_cfg.seed_h,
                scales=base_cfg.scales,
                class_id=sample.class_id,
                selector=base_cfg.selector,
            )
            mask, trace = infer_iterative(params, buf, backend, img, point, cfg, gt=gt)
            final_box = trace.records[-1].box
            rows.append(
                SampleRow(
                    id=sample.id,
                    t=t,
                    dice=dice(mask, gt),
                    hausdorff_mm=hd_fn(mask, gt, manifest.spacing_mm),
                    box_iou_final=box_iou(final_box, gt_tight),
                    rounds=len(trace.records),
                )
            )
        return rows

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_sample = list(pool.map(eval_sample, samples))
    else:
        per_sample = [eval_sample(s) for s in samples]
    rows = [row for rows_ in per_sample for row in rows_]
    return EvalReport(
        rows=rows,
        aggregates=_aggregate(rows),
        spacing_mm=manifest.spacing_mm,
        hd_variant=hd_variant,
    )


def write_report(report: EvalReport, json_path, csv_path) -> None:
    with open(json_path, "w") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(csv_path, "w") as fh:
        fh.write(report.to_csv())


_TINTS = {
    "gt": (0.0, 255.0, 0.0),
    "pred": (255.0, 0.0, 0.0),
    "both": (255.0, 255.0, 0.0),
}


def emit_overlay(img: Image2D, gt: Mask2D, pred: Mask2D) -> bytes:
    """P6 PPM: grayscale base; GT-only green, prediction-only red, agreement
    yellow. Tinted channels blend as base*0.6 + tint*0.4."""
    if (img.width, img.height) != (gt.width, gt.height):
        raise DimensionMismatch("overlay image vs gt")
    _check_dims(gt, pred)
    base = np.clip(np.floor(img.pixels * 255.0 + 0.5), 0, 255)
    rgb = np.repeat(base[:, :, None], 3, axis=2)
    regions = [
        (gt.bits & ~pred.bits, _TINTS["gt"]),
        (pred.bits & ~gt.bits, _TINTS["pred"]),
        (gt.bits & pred.bits, _TINTS["both"]),
    ]
    for sel, tint in regions:
        for ch, tv in enumerate(tint):
            rgb[sel, ch] = base[sel] * 0.6 + tv * 0.4
    out = np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8)
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + out.tobytes()
