"""Acceptance gate: one test per criterion at its stated tolerance.

Each test prints a PASS/FAIL line (run with `pytest -s` or `-rA` to see them
all). The expensive closed-loop system (200 phantoms, 50 training epochs) is
built once and shared by the convergence, training-progress, and robustness
criteria.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from pointseg.data import PhantomSpec, gen_phantoms, load_manifest
from pointseg.geometry import BBox, Image2D, Mask2D, box_iou, tight_box
from pointseg.metrics import EvalReport, dice, evaluate, hausdorff_mm
from pointseg.pipeline import IterationConfig, build_train_samples, run_training
from pointseg.refiner import (
    PrototypeBuffer,
    RefinerDims,
    SgdState,
    TrainHyper,
    TrainSample,
    _forward,
    bag_scores,
    init_params,
    instance_probabilities,
    loss_and_gradient,
    make_proposal_bag,
    mil_loss,
    select_best_box,
    stem_input,
    train_epoch,
)
from pointseg.segmenter import OracleBackend, OracleConfig

from conftest import random_mask


def gate(label: str, ok: bool, detail: str) -> bool:
    print(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    return ok


# ---------------------------------------------------------------------------
# Criterion 1: probability normalization and scale invariance (< 1 s)
# ---------------------------------------------------------------------------


def test_probability_normalization_and_scale_invariance():
    rng = np.random.default_rng(0)
    t0 = time.time()
    worst_sum = 0.0
    flips = 0
    for _ in range(1000):
        n = int(rng.integers(2, 10))
        c = int(rng.integers(2, 5))
        d = int(rng.integers(4, 32))
        feats = rng.normal(size=(n, d))
        protos = rng.normal(size=(c, d))
        probs = instance_probabilities(feats, protos)
        worst_sum = max(worst_sum, float(np.abs(probs.sum(axis=1) - 1.0).max()))
        k = float(rng.uniform(1e-3, 1e3))
        scaled = instance_probabilities(feats * k, protos)
        cls = int(rng.integers(c))
        if int(np.argmax(scaled[:, cls])) != int(np.argmax(probs[:, cls])):
            flips += 1
    elapsed = time.time() - t0
    ok = worst_sum < 1e-6 and flips == 0 and elapsed < 1.0
    assert gate(
        "eq1 normalization",
        ok,
        f"1000 draws, max |sum-1| = {worst_sum:.2e}, argmax flips under scaling = {flips}, "
        f"runtime {elapsed:.2f}s (< 1 s)",
    )


# ---------------------------------------------------------------------------
# Criterion 2: analytic gradients vs central finite differences (< 30 s)
# ---------------------------------------------------------------------------

_GRAD_DIMS = RefinerDims(stem=4, hidden=16, feature=8, num_classes=2)
_FD_H = 1e-4


def _sample_grad_config(rng: np.random.Generator):
    """One random (params, stems, bag geometry, prototypes, label) instance,
    redrawn while any ReLU preactivation sits close enough to zero for the
    finite-difference step to cross the kink."""
    while True:
        params = init_params(_GRAD_DIMS, rng)
        params.b1 = 0.1 * rng.normal(size=_GRAD_DIMS.hidden)
        params.b2 = 0.1 * rng.normal(size=_GRAD_DIMS.feature)
        img = Image2D(rng.random((24, 24)))
        x0, y0 = int(rng.integers(0, 12)), int(rng.integers(0, 12))
        seed_box = BBox(x0, y0, x0 + int(rng.integers(4, 10)), y0 + int(rng.integers(4, 10)))
        scales = tuple(float(s) for s in rng.uniform(0.6, 2.0, size=3))
        bag = make_proposal_bag(seed_box, scales, img)
        u = np.stack([stem_input(img, b, _GRAD_DIMS.stem) for b in bag.boxes])
        protos = rng.normal(size=(2, _GRAD_DIMS.feature))
        onehot = np.zeros(2, dtype=bool)
        onehot[int(rng.integers(2))] = True
        cache = _forward(params, u)
        h_pre = u @ params.w1.T + params.b1
        margin = _FD_H * (1.0 + float(np.abs(u).max()))
        if np.abs(h_pre).min() > 10 * margin and np.linalg.norm(cache.f, axis=1).min() > 1e-3:
            return params, img, bag, u, protos, onehot


def _loss_from_stems(params, u, protos, onehot) -> float:
    feats = _forward(params, u).f
    return mil_loss(bag_scores(instance_probabilities(feats, protos)), onehot)


def test_gradient_correctness_fifty_configs():
    rng = np.random.default_rng(2024)
    t0 = time.time()
    worst = 0.0
    for _ in range(50):
        params, img, bag, u, protos, onehot = _sample_grad_config(rng)
        _, grads = loss_and_gradient(params, img, bag, protos, onehot)
        for tensor, g in zip(params.tensors(), grads.tensors()):
            flat = tensor.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + _FD_H
                lp = _loss_from_stems(params, u, protos, onehot)
                flat[i] = orig - _FD_H
                lm = _loss_from_stems(params, u, protos, onehot)
                flat[i] = orig
                fd = (lp - lm) / (2 * _FD_H)
                denom = max(abs(gflat[i]), abs(fd), 1e-6)
                worst = max(worst, abs(gflat[i] - fd) / denom)
    elapsed = time.time() - t0
    ok = worst < 1e-4 and elapsed < 30.0
    assert gate(
        "gradient correctness",
        ok,
        f"50 configs (P=4, H1=16, D=8, N=3, C=2), max rel err = {worst:.2e} (< 1e-4), "
        f"runtime {elapsed:.1f}s (< 30 s)",
    )


# ---------------------------------------------------------------------------
# Criterion 3: brute-force oracle equivalence on 500 instances per operation
# ---------------------------------------------------------------------------


def test_brute_force_oracle_equivalence():
    rng = np.random.default_rng(7)

    # tight_box vs full pixel scan
    for _ in range(500):
        m = random_mask(rng)
        coords = [(x, y) for y in range(m.height) for x in range(m.width) if m.bits[y, x]]
        got = tight_box(m)
        if not coords:
            assert got is None
        else:
            xs = [c[0] for c in coords]
            ys = [c[1] for c in coords]
            assert got == BBox(min(xs), min(ys), max(xs) + 1, max(ys) + 1)

    # box_iou vs pixel enumeration
    for _ in range(500):
        def rand_box():
            x0, y0 = int(rng.integers(0, 20)), int(rng.integers(0, 20))
            return BBox(x0, y0, x0 + int(rng.integers(1, 5)), y0 + int(rng.integers(1, 5)))

        a, b = rand_box(), rand_box()
        inter = union = 0
        for y in range(24):
            for x in range(24):
                ia, ib = a.contains_point(x, y), b.contains_point(x, y)
                inter += ia and ib
                union += ia or ib
        assert box_iou(a, b) == inter / union

    # select_best_box vs linear scan
    img = Image2D(np.zeros((24, 24)))
    for _ in range(500):
        n = int(rng.integers(1, 10))
        bag = make_proposal_bag(BBox(8, 8, 14, 14), tuple(1.0 + 0.05 * i for i in range(n)), img)
        probs = rng.random((n, 2))
        _, idx = select_best_box(bag, probs, 1)
        best = 0
        for i in range(n):
            if probs[i, 1] > probs[best, 1]:
                best = i
        assert idx == best

    # dice vs per-pixel counting
    for _ in range(500):
        a = random_mask(rng)
        b = Mask2D(rng.random((a.height, a.width)) < 0.3)
        inter = on = 0
        for y in range(a.height):
            for x in range(a.width):
                inter += a.bits[y, x] and b.bits[y, x]
                on += int(a.bits[y, x]) + int(b.bits[y, x])
        expected = 1.0 if on == 0 else 2.0 * inter / on
        assert abs(dice(a, b) - expected) < 1e-9

    # hausdorff vs O(|A||B|) double scan
    checked = 0
    while checked < 500:
        a = random_mask(rng)
        b = Mask2D(rng.random((a.height, a.width)) < 0.3)
        if a.area == 0 or b.area == 0:
            continue
        pa = np.argwhere(a.bits).astype(float)
        pb = np.argwhere(b.bits).astype(float)
        d = cdist(pa, pb)
        expected = max(d.min(axis=1).max(), d.min(axis=0).max())
        assert abs(hausdorff_mm(a, b) - expected) < 1e-9
        checked += 1

    assert gate(
        "brute-force equivalence",
        True,
        "tight_box, box_iou, select_best_box exact and dice, hausdorff within 1e-9 on 500 instances each",
    )


# ---------------------------------------------------------------------------
# Criteria 4, 5, 7 share one trained closed-loop system
# ---------------------------------------------------------------------------


@dataclass
class TrainedSystem:
    manifest: object
    params: object
    buffer: object
    losses: list[float]
    report_clean: EvalReport
    train_seconds: float
    total_seconds: float


@pytest.fixture(scope="module")
def trained_system(tmp_path_factory) -> TrainedSystem:
    t0 = time.time()
    data_dir = tmp_path_factory.mktemp("acceptance_data")
    manifest = gen_phantoms(PhantomSpec(rng_seed=42), data_dir)
    samples = build_train_samples(manifest, "train")
    result = run_training(samples, TrainHyper(), epochs=50, rng_seed=42)
    train_seconds = time.time() - t0
    base = IterationConfig(selector="learned")
    report = evaluate(
        manifest,
        result.params,
        result.buffer,
        lambda img, gt: OracleBackend(OracleConfig(rng_seed=42), gt),
        [1, 5, 10],
        base,
    )
    return TrainedSystem(
        manifest=manifest,
        params=result.params,
        buffer=result.buffer,
        losses=result.losses,
        report_clean=report,
        train_seconds=train_seconds,
        total_seconds=time.time() - t0,
    )


def test_closed_loop_convergence(trained_system):
    sys = trained_system
    d1 = sys.report_clean.mean_dice(1)
    d5 = sys.report_clean.mean_dice(5)
    d10 = sys.report_clean.mean_dice(10)
    ideal = evaluate(
        sys.manifest,
        None,
        None,
        lambda img, gt: OracleBackend(OracleConfig(rng_seed=42), gt),
        [5],
        IterationConfig(selector="ideal"),
    ).mean_dice(5)
    elapsed = sys.total_seconds
    ok_a = gate("closed-loop (a)", d5 >= d1 + 0.05, f"dice T=5 {d5:.4f} >= T=1 {d1:.4f} + 0.05")
    ok_b = gate("closed-loop (b)", d10 >= d5 - 0.01, f"dice T=10 {d10:.4f} >= T=5 {d5:.4f} - 0.01")
    ok_c = gate("closed-loop (c)", ideal >= 0.95, f"ideal-selector dice T=5 {ideal:.4f} >= 0.95")
    ok_t = gate("closed-loop runtime", elapsed < 600, f"{elapsed:.0f}s for synth+train+eval (< 600 s)")
    assert ok_a and ok_b and ok_c and ok_t


def test_training_progress_epoch_halving(trained_system):
    losses = trained_system.losses
    ok = losses[-1] < 0.5 * losses[0]
    assert gate(
        "training progress",
        ok,
        f"epoch-50 loss {losses[-1]:.4f} < 0.5 x epoch-1 loss {losses[0]:.4f}",
    )


@pytest.mark.xfail(
    strict=True,
    reason=(
        "unattainable as specified: class probabilities are softmax over cosine "
        "similarities bounded to [-1, 1], so with C=2 no bag score can exceed "
        "1/(1+e^-2) ~= 0.8808 and the per-sample loss is bounded below by "
        "2*log(1+e^-2) ~= 0.2539 > 0.01; training verifiably reaches that floor "
        "(see test_gradients.TestOverfitDynamics)"
    ),
)
def test_training_progress_single_sample_overfit():
    rng = np.random.default_rng(11)
    pixels = np.full((64, 64), 0.2)
    pixels[20:45, 18:44] += 0.6
    pixels = np.clip(pixels + rng.normal(0, 0.01, (64, 64)), 0, 1)
    sample = TrainSample(image=Image2D(pixels), gt_box=BBox(18, 20, 44, 45), class_id=1)
    hyper = TrainHyper()
    params = init_params(hyper.dims, np.random.default_rng(0))
    state = SgdState.zeros(params)
    buf = PrototypeBuffer(hyper.dims.num_classes, hyper.dims.feature, hyper.proto_batches)
    rng2 = np.random.default_rng(1)
    loss = math.inf
    for step in range(200):
        params, state, loss = train_epoch(params, state, buf, [sample], hyper, rng2)
        if loss < 0.01:
            break
    ok = loss < 0.01
    gate("single-sample overfit", ok, f"loss after {step + 1} steps = {loss:.4f} (< 0.01 required)")
    assert ok


def test_robustness_sweep(trained_system):
    sys = trained_system
    noisy = evaluate(
        sys.manifest,
        sys.params,
        sys.buffer,
        lambda img, gt: OracleBackend(
            OracleConfig(perturb_radius=1, perturb_rate=0.3, rng_seed=42), gt
        ),
        [5],
        IterationConfig(selector="learned"),
    ).mean_dice(5)
    clean = sys.report_clean.mean_dice(5)
    drop = clean - noisy
    assert gate(
        "robustness sweep",
        drop < 0.10,
        f"dice T=5 noiseless {clean:.4f} vs perturbed {noisy:.4f}, degradation {drop:.4f} (< 0.10)",
    )


# ---------------------------------------------------------------------------
# Criterion 6: byte-identical artifacts for identical config and seed
# ---------------------------------------------------------------------------


def test_determinism_cli_byte_identical(tmp_path, monkeypatch):
    from pointseg.cli import run

    cfg = tmp_path / "c.toml"
    cfg.write_text(
        "\n".join(
            [
                "rng_seed = 42",
                "[phantoms]",
                "count = 15",
                "width = 96",
                "height = 96",
                "radius = [20, 40]",
                "[train]",
                "epochs = 3",
                "[infer]",
                "t_values = [1, 3]",
            ]
        )
    )
    monkeypatch.chdir(tmp_path)
    artifacts = ["data/manifest.json", "out/refiner.ckpt", "out/report.json", "out/report.csv"]
    snapshots = []
    for _ in range(2):
        for rel in artifacts:
            p = Path(rel)
            if p.exists():
                p.unlink()
        assert run(["synth", "--config", "c.toml"]) == 0
        assert run(["train", "--config", "c.toml"]) == 0
        assert run(["eval", "--config", "c.toml"]) == 0
        snapshots.append({rel: Path(rel).read_bytes() for rel in artifacts})
    identical = snapshots[0] == snapshots[1]
    assert gate(
        "determinism",
        identical,
        "synth+train+eval twice: manifest, checkpoint, and reports byte-identical",
    )
