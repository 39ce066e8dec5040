"""The trainable prompt refiner: multi-scale box proposals scored by cosine
similarity to class prototypes, trained with a bag-level BCE loss.

Numerics are float64 throughout. Hand-written analytic gradients cover the
full chain loss -> bag aggregation -> class softmax -> cosine -> FC layers;
prototypes are treated as constants within a step. Numerical guards:
probability clamp 1e-6, crop z-score std floor 1e-6, cosine norm floor 1e-12.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteUpdate
from .geometry import BBox, Image2D, PointPrompt, crop_resize, scale_box, seed_box_from_point

CLAMP_EPS = 1e-6
STD_FLOOR = 1e-6
NORM_FLOOR = 1e-12

DEFAULT_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 2.5, 3.0, 4.0)

AGGREGATIONS = ("mean", "max", "noisy_or")


@dataclass(frozen=True)
class RefinerDims:
    """Network shape: P x P crop stem, two FC layers, C classes."""

    stem: int = 32
    hidden: int = 1024
    feature: int = 256
    num_classes: int = 2

    def __post_init__(self):
        if min(self.stem, self.hidden, self.feature) < 1 or self.num_classes < 2:
            raise ValueError(f"invalid refiner dimensions {self}")

    @property
    def stem_pixels(self) -> int:
        return self.stem * self.stem


@dataclass
class RefinerParams:
    """Trainable weights. w1: (hidden, stem_pixels), w2: (feature, hidden)."""

    dims: RefinerDims
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def tensors(self) -> tuple[np.ndarray, ...]:
        return self.w1, self.b1, self.w2, self.b2

    def copy(self) -> "RefinerParams":
        return RefinerParams(self.dims, self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())

    def validate(self) -> None:
        d = self.dims
        shapes = [
            (self.w1, (d.hidden, d.stem_pixels)),
            (self.b1, (d.hidden,)),
            (self.w2, (d.feature, d.hidden)),
            (self.b2, (d.feature,)),
        ]
        for arr, shape in shapes:
            if arr.shape != shape:
                raise ValueError(f"parameter shape {arr.shape} != expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise NonFiniteUpdate("parameters contain NaN or Inf")


@dataclass
class RefinerGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def tensors(self) -> tuple[np.ndarray, ...]:
        return self.w1, self.b1, self.w2, self.b2


def init_params(dims: RefinerDims, rng: np.random.Generator) -> RefinerParams:
    """Glorot-uniform weights (draw order: w1 then w2), zero biases."""
    a1 = np.sqrt(6.0 / (dims.stem_pixels + dims.hidden))
    w1 = rng.uniform(-a1, a1, size=(dims.hidden, dims.stem_pixels))
    a2 = np.sqrt(6.0 / (dims.hidden + dims.feature))
    w2 = rng.uniform(-a2, a2, size=(dims.feature, dims.hidden))
    return RefinerParams(
        dims=dims,
        w1=w1,
        b1=np.zeros(dims.hidden),
        w2=w2,
        b2=np.zeros(dims.feature),
    )


def stem_input(img: Image2D, box: BBox, stem: int) -> np.ndarray:
    """Fixed stem: crop-resize to stem x stem, per-crop z-score, flatten."""
    g = crop_resize(img, box, stem, stem)
    mu = g.mean()
    sd = g.std()
    return ((g - mu) / max(sd, STD_FLOOR)).ravel()


@dataclass
class ForwardCache:
    """Batched activations kept for the backward pass."""

    u: np.ndarray  # (n, stem_pixels) stem outputs
    h: np.ndarray  # (n, hidden) post-ReLU
    relu_mask: np.ndarray  # (n, hidden) bool
    f: np.ndarray  # (n, feature)


def _forward(params: RefinerParams, u: np.ndarray) -> ForwardCache:
    h_pre = u @ params.w1.T + params.b1
    mask = h_pre > 0
    h = np.where(mask, h_pre, 0.0)
    f = h @ params.w2.T + params.b2
    return ForwardCache(u=u, h=h, relu_mask=mask, f=f)


def extract_features(params: RefinerParams, img: Image2D, boxes: list[BBox]) -> ForwardCache:
    """Run the stem and FC layers for every box of one image."""
    u = np.stack([stem_input(img, b, params.dims.stem) for b in boxes])
    return _forward(params, u)


def extract_feature(params: RefinerParams, img: Image2D, box: BBox) -> np.ndarray:
    return extract_features(params, img, [box]).f[0]


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na = max(float(np.linalg.norm(a)), NORM_FLOOR)
    nb = max(float(np.linalg.norm(b)), NORM_FLOOR)
    return float(np.dot(a, b) / (na * nb))


def _cosine_matrix(feats: np.ndarray, prototypes: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pairwise cosine similarities; returns (sims, floored feature norms,
    floored prototype norms)."""
    fn = np.maximum(np.linalg.norm(feats, axis=1), NORM_FLOOR)
    vn = np.maximum(np.linalg.norm(prototypes, axis=1), NORM_FLOOR)
    sims = (feats @ prototypes.T) / (fn[:, None] * vn[None, :])
    return sims, fn, vn


def _softmax_rows(sims: np.ndarray) -> np.ndarray:
    z = sims - sims.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def instance_probabilities(feats: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Per-box class membership: softmax over cosine similarities to the
    class prototypes. Rows sum to 1."""
    if prototypes.shape[0] < 2:
        raise ValueError("at least two class prototypes are required")
    sims, _, _ = _cosine_matrix(np.atleast_2d(feats), prototypes)
    return _softmax_rows(sims)


def instance_probability(f: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    return instance_probabilities(f[None, :], prototypes)[0]


def bag_scores(probs: np.ndarray, aggregation: str = "mean") -> np.ndarray:
    """Aggregate per-box class probabilities into one score per class,
    clamped to (eps, 1-eps)."""
    if aggregation == "mean":
        s = probs.mean(axis=0)
    elif aggregation == "max":
        s = probs.max(axis=0)
    elif aggregation == "noisy_or":
        s = 1.0 - np.prod(1.0 - probs, axis=0)
    else:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    return np.clip(s, CLAMP_EPS, 1.0 - CLAMP_EPS)


def bag_score(probs: np.ndarray, class_id: int, aggregation: str = "mean") -> float:
    return float(bag_scores(probs, aggregation)[class_id])


def mil_loss(scores: np.ndarray, onehot: np.ndarray) -> float:
    """Bag-level binary cross entropy over all classes."""
    scores = np.asarray(scores, dtype=np.float64)
    onehot = np.asarray(onehot, dtype=bool)
    if onehot.sum() != 1:
        raise ValueError("onehot must mark exactly one class")
    if np.any(scores <= 0.0) or np.any(scores >= 1.0):
        raise ValueError("bag scores must lie strictly inside (0, 1)")
    return float(-(np.log(scores[onehot]).sum() + np.log(1.0 - scores[~onehot]).sum()))


@dataclass(frozen=True)
class ProposalBag:
    """Seed box scaled to N proposals (duplicates after clipping retained)."""

    seed: BBox
    boxes: tuple[BBox, ...]
    scales: tuple[float, ...]

    def __post_init__(self):
        if len(self.boxes) < 1 or len(self.boxes) != len(self.scales):
            raise ValueError("bag needs at least one box, one per scale")

    def __len__(self) -> int:
        return len(self.boxes)


def make_proposal_bag(seed: BBox, scales: tuple[float, ...], img: Image2D) -> ProposalBag:
    if len(scales) < 1:
        raise ValueError("at least one scale is required")
    boxes = tuple(scale_box(seed, s, img) for s in scales)
    return ProposalBag(seed=seed, boxes=boxes, scales=tuple(float(s) for s in scales))


def select_best_box(bag: ProposalBag, probs: np.ndarray, class_id: int) -> tuple[BBox, int]:
    """Highest-probability proposal for the class; ties go to the lowest index."""
    idx = int(np.argmax(probs[:, class_id]))
    return bag.boxes[idx], idx


class PrototypeBuffer:
    """Per-class feature memory over the most recent `max_batches` batches.

    The prototype of a class is the exact mean of its buffered features,
    recomputed after every push; classes with no buffered features keep the
    all-zeros initialization (cosine against zeros hits the norm floor).
    """

    def __init__(self, num_classes: int, feature_dim: int, max_batches: int):
        if num_classes < 2 or feature_dim < 1 or max_batches < 1:
            raise ValueError("invalid buffer configuration")
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.max_batches = max_batches
        self.batch_count = 0
        self._batches: deque[list[np.ndarray]] = deque()
        self._prototypes = np.zeros((num_classes, feature_dim))

    def push_batch(self, per_class: list[np.ndarray]) -> None:
        """Append one batch of per-class feature arrays (shape (k_c, D),
        k_c may be 0) and evict batches older than `max_batches`."""
        if len(per_class) != self.num_classes:
            raise ValueError(f"expected {self.num_classes} per-class arrays")
        entry = []
        for arr in per_class:
            arr = np.asarray(arr, dtype=np.float64).reshape(-1, self.feature_dim)
            entry.append(arr.copy())
        self._batches.append(entry)
        self.batch_count += 1
        while len(self._batches) > self.max_batches:
            self._batches.popleft()
        self._recompute()

    def _recompute(self) -> None:
        proto = np.zeros((self.num_classes, self.feature_dim))
        for c in range(self.num_classes):
            feats = [batch[c] for batch in self._batches if batch[c].shape[0] > 0]
            if feats:
                proto[c] = np.concatenate(feats, axis=0).mean(axis=0)
        self._prototypes = proto

    def prototypes(self) -> np.ndarray:
        return self._prototypes.copy()

    def feature_count(self, class_id: int) -> int:
        return sum(batch[class_id].shape[0] for batch in self._batches)

    def batches(self) -> list[list[np.ndarray]]:
        return [[arr.copy() for arr in batch] for batch in self._batches]

    @classmethod
    def restore(
        cls,
        num_classes: int,
        feature_dim: int,
        max_batches: int,
        batch_count: int,
        batches: list[list[np.ndarray]],
    ) -> "PrototypeBuffer":
        buf = cls(num_classes, feature_dim, max_batches)
        for batch in batches:
            buf.push_batch(batch)
        buf.batch_count = batch_count
        return buf


def update_prototypes(buf: PrototypeBuffer, batch_features: list[np.ndarray]) -> PrototypeBuffer:
    """Push one batch of per-class features; returns the same buffer."""
    buf.push_batch(batch_features)
    return buf


def _bag_backward(
    probs: np.ndarray, onehot: np.ndarray, aggregation: str
) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to the per-box class probabilities."""
    n = probs.shape[0]
    if aggregation == "mean":
        m = probs.mean(axis=0)
    elif aggregation == "max":
        m = probs.max(axis=0)
    elif aggregation == "noisy_or":
        m = 1.0 - np.prod(1.0 - probs, axis=0)
    else:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    s = np.clip(m, CLAMP_EPS, 1.0 - CLAMP_EPS)
    loss = mil_loss(s, onehot)
    ds = np.where(onehot, -1.0 / s, 1.0 / (1.0 - s))
    dm = ds * ((m > CLAMP_EPS) & (m < 1.0 - CLAMP_EPS))
    if aggregation == "mean":
        dprobs = np.broadcast_to(dm / n, probs.shape).copy()
    elif aggregation == "max":
        dprobs = np.zeros_like(probs)
        rows = np.argmax(probs, axis=0)
        dprobs[rows, np.arange(probs.shape[1])] = dm
    else:  # noisy_or
        rest = np.where(probs < 1.0, (1.0 - m) / np.maximum(1.0 - probs, 1e-300), 0.0)
        dprobs = dm * rest
    return loss, dprobs


def _bag_feature_gradient(
    feats: np.ndarray, prototypes: np.ndarray, onehot: np.ndarray, aggregation: str
) -> tuple[float, np.ndarray]:
    """Bag loss and its gradient with respect to the bag's feature rows."""
    sims, fn, vn = _cosine_matrix(feats, prototypes)
    probs = _softmax_rows(sims)
    loss, dprobs = _bag_backward(probs, np.asarray(onehot, dtype=bool), aggregation)
    # softmax rows: ds = p * (dp - <dp, p>)
    dsims = probs * (dprobs - (dprobs * probs).sum(axis=1, keepdims=True))
    # cosine wrt features; the norm floor freezes the radial term when active
    raw_norms = np.linalg.norm(feats, axis=1)
    df = (dsims / vn[None, :]) @ prototypes / fn[:, None]
    radial = (dsims * sims).sum(axis=1) / fn**2
    radial = np.where(raw_norms > NORM_FLOOR, radial, 0.0)
    df -= radial[:, None] * feats
    return loss, df


def _fc_backward(params: RefinerParams, cache: ForwardCache, df: np.ndarray) -> RefinerGrads:
    dw2 = df.T @ cache.h
    db2 = df.sum(axis=0)
    dh = (df @ params.w2) * cache.relu_mask
    dw1 = dh.T @ cache.u
    db1 = dh.sum(axis=0)
    return RefinerGrads(w1=dw1, b1=db1, w2=dw2, b2=db2)


def loss_and_gradient(
    params: RefinerParams,
    img: Image2D,
    bag: ProposalBag,
    prototypes: np.ndarray,
    onehot: np.ndarray,
    aggregation: str = "mean",
    cache: ForwardCache | None = None,
) -> tuple[float, RefinerGrads]:
    """Bag loss and its analytic gradient with respect to the FC parameters.

    Prototypes are constants: no gradient flows into them or into the
    buffered features that produced them. A ForwardCache from
    extract_features on the same (params, img, bag) may be passed to skip
    the repeated forward pass.
    """
    if cache is None:
        cache = extract_features(params, img, list(bag.boxes))
    loss, df = _bag_feature_gradient(cache.f, prototypes, onehot, aggregation)
    return loss, _fc_backward(params, cache, df)


@dataclass
class SgdState:
    """Momentum buffers, one per parameter tensor."""

    vel: tuple[np.ndarray, ...]

    @classmethod
    def zeros(cls, params: RefinerParams) -> "SgdState":
        return cls(vel=tuple(np.zeros_like(t) for t in params.tensors()))

    def copy(self) -> "SgdState":
        return SgdState(vel=tuple(v.copy() for v in self.vel))


def sgd_step(
    params: RefinerParams,
    grads: RefinerGrads,
    lr: float,
    momentum: float,
    state: SgdState,
) -> tuple[RefinerParams, SgdState]:
    """v <- momentum*v + g; p <- p - lr*v. Returns fresh copies."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    new_vel = []
    new_tensors = []
    for p, g, v in zip(params.tensors(), grads.tensors(), state.vel):
        nv = v * momentum
        nv += g
        updated = nv * (-lr)
        updated += p
        # a non-finite entry always poisons the sum
        if not np.isfinite(updated.sum()):
            raise NonFiniteUpdate("sgd step produced NaN or Inf")
        new_vel.append(nv)
        new_tensors.append(updated)
    out = RefinerParams(params.dims, *new_tensors)
    return out, SgdState(vel=tuple(new_vel))


@dataclass(frozen=True)
class TrainSample:
    """One supervised structure: image, its ground-truth tight box, class."""

    image: Image2D
    gt_box: BBox
    class_id: int


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    proto_batches: int = 8
    seed_w: int = 21
    seed_h: int = 21
    scales: tuple[float, ...] = DEFAULT_SCALES
    aggregation: str = "mean"
    neg_margin: int = 16
    dims: RefinerDims = RefinerDims()


def sample_background_point(
    rng: np.random.Generator, width: int, height: int, gt_box: BBox, margin: int
) -> PointPrompt:
    """Uniform pixel at Chebyshev distance >= margin from the box; falls back
    to the farthest pixel (first in raster order) when none qualifies."""
    xs = np.arange(width)
    ys = np.arange(height)
    dx = np.maximum(np.maximum(gt_box.x0 - xs, xs - (gt_box.x1 - 1)), 0)
    dy = np.maximum(np.maximum(gt_box.y0 - ys, ys - (gt_box.y1 - 1)), 0)
    cheb = np.maximum(dx[None, :], dy[:, None])
    eligible = np.flatnonzero(cheb >= margin)
    if eligible.size > 0:
        flat = int(eligible[rng.integers(eligible.size)])
    else:
        flat = int(np.argmax(cheb))
    return PointPrompt(x=flat % width, y=flat // width, class_id=0)


def _bag_instances(
    sample: TrainSample, hyper: TrainHyper, rng: np.random.Generator
) -> list[tuple[PointPrompt, int]]:
    """Positive point at the GT box center plus one background point."""
    cx, cy = sample.gt_box.center_pixel
    pos = PointPrompt(x=cx, y=cy, class_id=sample.class_id)
    neg = sample_background_point(
        rng, sample.image.width, sample.image.height, sample.gt_box, hyper.neg_margin
    )
    return [(pos, sample.class_id), (neg, 0)]


def train_epoch(
    params: RefinerParams,
    opt_state: SgdState,
    buf: PrototypeBuffer,
    samples: list[TrainSample],
    hyper: TrainHyper,
    rng: np.random.Generator,
) -> tuple[RefinerParams, SgdState, float]:
    """One pass over the dataset.

    Per batch: build a positive and a negative bag per sample, push all bag
    features into the prototype buffer, then take one optimizer step on the
    mean bag-loss gradient. All bags of a batch share one stacked forward
    and backward pass. The buffer is updated in place.
    """
    if not samples:
        raise ValueError("training dataset is empty")
    dims = params.dims
    n_boxes = len(hyper.scales)
    order = rng.permutation(len(samples))
    losses = []
    for start in range(0, len(order), hyper.batch_size):
        batch = order[start : start + hyper.batch_size]
        stems = []
        metas = []  # (onehot, class_id)
        for i in batch:
            sample = samples[int(i)]
            for point, class_id in _bag_instances(sample, hyper, rng):
                seed = seed_box_from_point(point, hyper.seed_w, hyper.seed_h, sample.image)
                bag = make_proposal_bag(seed, hyper.scales, sample.image)
                for box in bag.boxes:
                    stems.append(stem_input(sample.image, box, dims.stem))
                onehot = np.zeros(dims.num_classes, dtype=bool)
                onehot[class_id] = True
                metas.append((onehot, class_id))
        cache = _forward(params, np.stack(stems))
        n_bags = len(metas)
        per_class = [np.zeros((0, dims.feature)) for _ in range(dims.num_classes)]
        for c in range(dims.num_classes):
            rows = [
                cache.f[k * n_boxes : (k + 1) * n_boxes]
                for k, (_, class_id) in enumerate(metas)
                if class_id == c
            ]
            if rows:
                per_class[c] = np.concatenate(rows, axis=0)
        buf.push_batch(per_class)
        prototypes = buf.prototypes()
        df_all = np.empty_like(cache.f)
        for k, (onehot, _) in enumerate(metas):
            rows = slice(k * n_boxes, (k + 1) * n_boxes)
            loss, df = _bag_feature_gradient(cache.f[rows], prototypes, onehot, hyper.aggregation)
            losses.append(loss)
            df_all[rows] = df / n_bags
        grads = _fc_backward(params, cache, df_all)
        params, opt_state = sgd_step(params, grads, hyper.lr, hyper.momentum, opt_state)
    return params, opt_state, float(np.mean(losses))
