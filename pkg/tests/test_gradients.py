from __future__ import annotations

import numpy as np
import pytest

from pointseg.geometry import BBox, Image2D
from pointseg.refiner import (
    PrototypeBuffer,
    RefinerDims,
    RefinerParams,
    SgdState,
    TrainHyper,
    TrainSample,
    bag_scores,
    extract_features,
    init_params,
    instance_probabilities,
    loss_and_gradient,
    make_proposal_bag,
    mil_loss,
    sgd_step,
    train_epoch,
)

GRAD_DIMS = RefinerDims(stem=4, hidden=16, feature=8, num_classes=2)
FD_H = 1e-4


def forward_loss(params, img, bag, protos, onehot, aggregation="mean") -> float:
    """Loss via the forward-only public path (independent of the backward code)."""
    feats = extract_features(params, img, list(bag.boxes)).f
    probs = instance_probabilities(feats, protos)
    return mil_loss(bag_scores(probs, aggregation), onehot)


def fd_gradient(params, img, bag, protos, onehot, aggregation="mean", h=FD_H):
    """Central finite differences over every parameter entry."""
    grads = []
    for tensor in params.tensors():
        g = np.zeros_like(tensor)
        flat = tensor.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = forward_loss(params, img, bag, protos, onehot, aggregation)
            flat[i] = orig - h
            lm = forward_loss(params, img, bag, protos, onehot, aggregation)
            flat[i] = orig
            gflat[i] = (lp - lm) / (2 * h)
        grads.append(g)
    return grads


def make_config(seed: int, n_boxes: int = 3, aggregation: str = "mean"):
    """Random small problem, resampled away from ReLU kinks and norm floors
    so central differences stay on one side of every nondifferentiable point."""
    rng = np.random.default_rng(seed)
    for _ in range(50):
        params = init_params(GRAD_DIMS, rng)
        params.b1 = 0.1 * rng.normal(size=GRAD_DIMS.hidden)
        params.b2 = 0.1 * rng.normal(size=GRAD_DIMS.feature)
        img = Image2D(rng.random((24, 24)))
        x0 = int(rng.integers(0, 10))
        y0 = int(rng.integers(0, 10))
        seed_box = BBox(x0, y0, x0 + int(rng.integers(4, 10)), y0 + int(rng.integers(4, 10)))
        scales = tuple(float(s) for s in rng.uniform(0.6, 2.0, size=n_boxes))
        bag = make_proposal_bag(seed_box, scales, img)
        protos = rng.normal(size=(GRAD_DIMS.num_classes, GRAD_DIMS.feature))
        onehot = np.zeros(GRAD_DIMS.num_classes, dtype=bool)
        onehot[int(rng.integers(GRAD_DIMS.num_classes))] = True
        cache = extract_features(params, img, list(bag.boxes))
        h_pre = cache.u @ params.w1.T + params.b1
        margin = FD_H * (1.0 + np.abs(cache.u).max())
        if np.abs(h_pre).min() > 10 * margin and np.linalg.norm(cache.f, axis=1).min() > 1e-3:
            return params, img, bag, protos, onehot
    raise AssertionError("could not sample a well-conditioned gradient-check config")


def max_rel_error(analytic, numeric) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


class TestLossGradient:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences(self, seed):
        params, img, bag, protos, onehot = make_config(seed)
        loss, grads = loss_and_gradient(params, img, bag, protos, onehot)
        assert loss == pytest.approx(forward_loss(params, img, bag, protos, onehot), abs=1e-12)
        numeric = fd_gradient(params, img, bag, protos, onehot)
        assert max_rel_error(grads.tensors(), numeric) < 1e-4

    @pytest.mark.parametrize("aggregation", ["max", "noisy_or"])
    def test_alternative_aggregations_match_fd(self, aggregation):
        params, img, bag, protos, onehot = make_config(100, aggregation=aggregation)
        _, grads = loss_and_gradient(params, img, bag, protos, onehot, aggregation)
        numeric = fd_gradient(params, img, bag, protos, onehot, aggregation)
        assert max_rel_error(grads.tensors(), numeric) < 1e-4

    def test_radial_direction_is_loss_neutral(self):
        # scaling (w2, b2) jointly scales every feature, which cosine ignores:
        # the loss is exactly constant along that ray
        params, img, bag, protos, onehot = make_config(7)
        _, grads = loss_and_gradient(params, img, bag, protos, onehot)
        g_dot_v = float((grads.w2 * params.w2).sum() + (grads.b2 * params.b2).sum())
        assert abs(g_dot_v) < 1e-10
        t = 1e-4
        base = forward_loss(params, img, bag, protos, onehot)
        up = params.copy()
        up.w2 = params.w2 * (1 + t)
        up.b2 = params.b2 * (1 + t)
        down = params.copy()
        down.w2 = params.w2 * (1 - t)
        down.b2 = params.b2 * (1 - t)
        fd = (forward_loss(up, img, bag, protos, onehot) - forward_loss(down, img, bag, protos, onehot)) / (2 * t)
        assert abs(fd) < 1e-9
        assert abs(base) > 0  # sanity: the loss itself is not trivially zero


class TestBatchedTrainingGradient:
    def test_one_step_matches_mean_of_per_bag_gradients(self):
        # train_epoch stacks all bags of a batch into one backward pass; the
        # resulting step must equal the mean of independent per-bag gradients
        rng = np.random.default_rng(42)
        dims = RefinerDims(stem=4, hidden=12, feature=6, num_classes=2)
        hyper = TrainHyper(dims=dims, batch_size=2, lr=0.1, momentum=0.0)
        samples = []
        for _ in range(2):
            pixels = rng.random((40, 40))
            x0, y0 = int(rng.integers(5, 15)), int(rng.integers(5, 15))
            samples.append(
                TrainSample(
                    image=Image2D(pixels),
                    gt_box=BBox(x0, y0, x0 + 10, y0 + 12),
                    class_id=1,
                )
            )
        params = init_params(dims, np.random.default_rng(1))
        buf = PrototypeBuffer(2, dims.feature, hyper.proto_batches)
        out_params, _, _ = train_epoch(
            params.copy(), SgdState.zeros(params), buf, samples, hyper, np.random.default_rng(9)
        )
        # replay: identical rng stream rebuilds the same bags and negatives
        from pointseg.geometry import PointPrompt, seed_box_from_point
        from pointseg.refiner import _bag_instances, loss_and_gradient

        rng2 = np.random.default_rng(9)
        order = rng2.permutation(len(samples))
        buf2 = PrototypeBuffer(2, dims.feature, hyper.proto_batches)
        bags = []
        for i in order:
            s = samples[int(i)]
            for point, class_id in _bag_instances(s, hyper, rng2):
                seed = seed_box_from_point(point, hyper.seed_w, hyper.seed_h, s.image)
                bag = make_proposal_bag(seed, hyper.scales, s.image)
                onehot = np.zeros(2, dtype=bool)
                onehot[class_id] = True
                bags.append((s.image, bag, onehot, class_id))
        per_class = []
        for c in range(2):
            feats = [
                extract_features(params, img, list(bag.boxes)).f
                for img, bag, _, cid in bags
                if cid == c
            ]
            per_class.append(np.concatenate(feats) if feats else np.zeros((0, dims.feature)))
        buf2.push_batch(per_class)
        protos = buf2.prototypes()
        mean_grads = None
        for img, bag, onehot, _ in bags:
            _, g = loss_and_gradient(params, img, bag, protos, onehot)
            if mean_grads is None:
                mean_grads = list(g.tensors())
            else:
                mean_grads = [m + t for m, t in zip(mean_grads, g.tensors())]
        mean_grads = [m / len(bags) for m in mean_grads]
        for before, after, g in zip(params.tensors(), out_params.tensors(), mean_grads):
            assert np.allclose(after, before - hyper.lr * g, atol=1e-10)
        assert np.allclose(buf.prototypes(), buf2.prototypes(), atol=1e-12)


class TestOverfitDynamics:
    def _one_sample_problem(self):
        rng = np.random.default_rng(123)
        pixels = np.full((32, 32), 0.2)
        pixels[10:22, 10:22] += 0.6
        pixels = np.clip(pixels + rng.normal(0, 0.01, (32, 32)), 0, 1)
        img = Image2D(pixels)
        return TrainSample(image=img, gt_box=BBox(10, 10, 22, 22), class_id=1)

    def test_gradient_vanishes_at_overfit_optimum(self):
        # cosine saturates at +/-1 where its gradient is zero, so a fully
        # separated one-sample problem drives the gradient norm toward zero
        sample = self._one_sample_problem()
        hyper = TrainHyper(dims=RefinerDims(stem=8, hidden=24, feature=12), lr=0.05, batch_size=1)
        rng = np.random.default_rng(0)
        params = init_params(hyper.dims, rng)
        state = SgdState.zeros(params)
        buf = PrototypeBuffer(2, hyper.dims.feature, hyper.proto_batches)
        loss = None
        for _ in range(1500):
            params, state, loss = train_epoch(params, state, buf, [sample], hyper, rng)
        # evaluate the gradient at the converged point with frozen prototypes
        protos = buf.prototypes()
        from pointseg.geometry import PointPrompt, seed_box_from_point

        cx, cy = sample.gt_box.center_pixel
        seed = seed_box_from_point(PointPrompt(cx, cy, 1), hyper.seed_w, hyper.seed_h, sample.image)
        bag = make_proposal_bag(seed, hyper.scales, sample.image)
        onehot = np.array([False, True])
        _, grads = loss_and_gradient(params, sample.image, bag, protos, onehot)
        gnorm = np.sqrt(sum(float((g**2).sum()) for g in grads.tensors()))
        assert gnorm < 1e-3
        # bounded cosine range pins the achievable loss near 2*log(1+e^-2)
        floor = 2 * np.log(1 + np.exp(-2.0))
        assert loss == pytest.approx(floor, abs=0.05)
