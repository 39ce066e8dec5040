"""The T-round inference loop (propose boxes -> pick one -> segment -> feed
the tight box back) and training orchestration."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import EmptyMask, EmptyPrototype, PointOutOfBounds
from .geometry import BBox, Image2D, Mask2D, PointPrompt, box_iou, seed_box_from_point, tight_box
from .refiner import (
    DEFAULT_SCALES,
    PrototypeBuffer,
    RefinerParams,
    SgdState,
    TrainHyper,
    TrainSample,
    extract_features,
    init_params,
    instance_probabilities,
    make_proposal_bag,
    select_best_box,
    train_epoch,
)
from .segmenter import SegmentRequest, SegmenterBackend, segment

BackendFactory = Callable[[Image2D, Mask2D], SegmenterBackend]


@dataclass(frozen=True)
class IterationConfig:
    rounds: int = 5
    seed_w: int = 21
    seed_h: int = 21
    scales: tuple[float, ...] = DEFAULT_SCALES
    class_id: int = 1
    selector: str = "learned"

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("at least one round is required")
        if len(self.scales) < 1:
            raise ValueError("at least one proposal scale is required")
        if self.selector not in ("learned", "ideal"):
            raise ValueError(f"unknown selector {self.selector!r}")


@dataclass(frozen=True)
class RoundRecord:
    round: int
    box: BBox
    box_index: int
    scores: tuple[float, ...]  # per-proposal selection scores
    probs: tuple[tuple[float, ...], ...] | None  # (N, C), learned selector only
    mask_area: int
    mask_box: BBox | None
    dice: float | None = None
    box_iou_gt: float | None = None


@dataclass(frozen=True)
class IterationTrace:
    records: tuple[RoundRecord, ...]

    def to_json_dict(self) -> dict:
        return {
            "rounds": [
                {
                    "round": r.round,
                    "box": list(r.box.as_tuple()),
                    "box_index": r.box_index,
                    "scores": list(r.scores),
                    "probs": None if r.probs is None else [list(p) for p in r.probs],
                    "mask_area": r.mask_area,
                    "mask_box": None if r.mask_box is None else list(r.mask_box.as_tuple()),
                    "dice": r.dice,
                    "box_iou_gt": r.box_iou_gt,
                }
                for r in self.records
            ]
        }


def _dice_bits(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def ideal_select(bag, gt_box: BBox) -> tuple[BBox, int]:
    """Upper-bound selector: proposal with the highest IoU against the
    ground-truth tight box; ties go to the lowest index."""
    ious = np.array([box_iou(b, gt_box) for b in bag.boxes])
    idx = int(np.argmax(ious))
    return bag.boxes[idx], idx


def point_from_mask(gt: Mask2D, class_id: int = 1) -> PointPrompt:
    """Center pixel of the mask's tight box, tagged with the foreground class."""
    tb = tight_box(gt)
    if tb is None:
        raise EmptyMask("cannot derive a point prompt from an empty mask")
    cx, cy = tb.center_pixel
    return PointPrompt(x=cx, y=cy, class_id=class_id)


def infer_iterative(
    params: RefinerParams | None,
    buf: PrototypeBuffer | None,
    backend: SegmenterBackend,
    img: Image2D,
    point: PointPrompt,
    cfg: IterationConfig,
    gt: Mask2D | None = None,
) -> tuple[Mask2D, IterationTrace]:
    """Run the closed loop for cfg.rounds rounds and return the final mask.

    Each round scales the current seed box into a proposal bag, selects one
    box, and segments it. The tight box of the predicted mask seeds the next
    round (the selected box is retained when the mask is empty); the final
    round performs no feedback. `gt` is only touched for the ideal selector
    and for per-round trace metrics.
    """
    if not img.contains(point.x, point.y):
        raise PointOutOfBounds(f"point ({point.x}, {point.y}) outside the image")
    if cfg.selector == "learned":
        if params is None or buf is None:
            raise ValueError("learned selector requires refiner params and prototypes")
        prototypes = buf.prototypes()
        unpopulated = [c for c in range(buf.num_classes) if buf.feature_count(c) == 0]
        if unpopulated:
            raise EmptyPrototype(f"no buffered features for classes {unpopulated}")
    else:
        if gt is None:
            raise ValueError("ideal selector requires a ground-truth mask")
    gt_tight = tight_box(gt) if gt is not None else None
    seed = seed_box_from_point(point, cfg.seed_w, cfg.seed_h, img)
    records: list[RoundRecord] = []
    mask = Mask2D.empty(img.width, img.height)
    for t in range(1, cfg.rounds + 1):
        bag = make_proposal_bag(seed, cfg.scales, img)
        if cfg.selector == "learned":
            feats = extract_features(params, img, list(bag.boxes)).f
            probs = instance_probabilities(feats, prototypes)
            box, idx = select_best_box(bag, probs, cfg.class_id)
            scores = tuple(float(v) for v in probs[:, cfg.class_id])
            probs_rec = tuple(tuple(float(v) for v in row) for row in probs)
        else:
            box, idx = ideal_select(bag, gt_tight)
            scores = tuple(box_iou(b, gt_tight) for b in bag.boxes)
            probs_rec = None
        resp = segment(backend, SegmentRequest(image=img, box=box))
        mask = resp.mask
        mask_box = tight_box(mask)
        records.append(
            RoundRecord(
                round=t,
                box=box,
                box_index=idx,
                scores=scores,
                probs=probs_rec,
                mask_area=mask.area,
                mask_box=mask_box,
                dice=None if gt is None else _dice_bits(mask.bits, gt.bits),
                box_iou_gt=None if gt_tight is None else box_iou(box, gt_tight),
            )
        )
        if t < cfg.rounds:
            seed = mask_box if mask_box is not None else box
    return mask, IterationTrace(records=tuple(records))


@dataclass
class TrainResult:
    params: RefinerParams
    opt_state: SgdState
    buffer: PrototypeBuffer
    losses: list[float] = field(default_factory=list)


def build_train_samples(manifest, split: str = "train") -> list[TrainSample]:
    """Load a manifest split and derive each sample's ground-truth tight box."""
    from .data import load_sample  # local import to keep module deps one-way

    samples = []
    for entry in manifest.split(split):
        img, mask = load_sample(manifest, entry)
        tb = tight_box(mask)
        if tb is None:
            raise EmptyMask(f"sample {entry.id!r} has an empty ground-truth mask")
        samples.append(TrainSample(image=img, gt_box=tb, class_id=entry.class_id))
    return samples


def run_training(
    samples: list[TrainSample],
    hyper: TrainHyper,
    epochs: int,
    rng_seed: int,
) -> TrainResult:
    """Initialize the refiner and run `epochs` training passes.

    Fully deterministic for a given seed: one RNG stream drives parameter
    initialization, epoch shuffling, and background-point sampling.
    """
    rng = np.random.default_rng(rng_seed)
    params = init_params(hyper.dims, rng)
    opt_state = SgdState.zeros(params)
    buf = PrototypeBuffer(hyper.dims.num_classes, hyper.dims.feature, hyper.proto_batches)
    result = TrainResult(params=params, opt_state=opt_state, buffer=buf)
    for _ in range(epochs):
        result.params, result.opt_state, loss = train_epoch(
            result.params, result.opt_state, buf, samples, hyper, rng
        )
        result.losses.append(loss)
    return result
