"""Release gate: the testbed oracle suite as a pass/fail table.

Every check compares the production code path with an independently coded
oracle (finite differences, brute-force loops, closed forms) on synthetic
testbed models, so it needs no pretrained weights.
"""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass

import numpy as np

from . import cam, metrics, testbed
from .adapter import CaptureResult, InputImage, Prediction, capture, default_layer, scores_with_activation

FAULTS = ("skip-norm",)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def check_gradients(n_coords: int = 100, eps: float = 1e-3, seed: int = 0) -> tuple[bool, str]:
    model = testbed.make_model("tiny_cnn", seed=seed, precision="double")
    rng = np.random.default_rng(seed)
    image = InputImage(rng.uniform(0, 1, (32, 32, 3)))
    layer = default_layer(model)
    cap = capture(model, image, layer, [0, 1, 2, 3])
    a = cap.activations
    # stay clear of the ReLU kink that follows this layer
    ok_coords = np.argwhere(np.abs(a) > 1e-3 + eps)
    picks = ok_coords[rng.choice(len(ok_coords), size=min(n_coords, len(ok_coords)), replace=False)]
    worst = 0.0
    for k, (c, i, j) in enumerate(picks):
        cls = k % 4
        up, down = a.copy(), a.copy()
        up[c, i, j] += eps
        down[c, i, j] -= eps
        fd = (scores_with_activation(model, image, layer, up)[cls] - scores_with_activation(model, image, layer, down)[cls]) / (2 * eps)
        g = cap.gradient(cls)[c, i, j]
        if abs(fd) < 1e-6:
            err = abs(g - fd) / 1e-4  # absolute bound 1e-8, scaled onto the relative one
        else:
            err = abs(g - fd) / abs(fd)
        worst = max(worst, err)
    return len(picks) >= n_coords and worst < 1e-4, f"{len(picks)} coords, worst rel err {worst:.2e}"


def check_exclusivity(trials: int = 1000, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        K = int(rng.integers(2, 6))
        I, J = rng.integers(1, 9, size=2)
        raw = rng.integers(-3, 4, size=(K, I, J)).astype(np.float32)  # small ints force ties
        got = cam.fuse_filter([cam.ClassSaliency(raw[k], k) for k in range(K)]).channels
        for i in range(I):
            for j in range(J):
                best = 0
                for k in range(1, K):
                    if raw[k, i, j] > raw[best, i, j]:
                        best = k
                for k in range(K):
                    want = raw[k, i, j] if k == best else 0.0
                    if got[i, j, k] != want:
                        return False, f"mismatch at ({i},{j},{k})"
    return True, f"{trials} stacks match brute force"


def check_unit_norm(trials: int = 200, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        K = int(rng.integers(1, 6))
        maps = [cam.ClassSaliency(rng.normal(size=(7, 5)).astype(np.float32), k) for k in range(K)]
        filtered = cam.fuse_filter(maps)
        fn = ("relu", "elu", "gelu")[int(rng.integers(3))]
        out = cam.normalize_activate(filtered, fn)
        pre = cam._l2_normalize(np.asarray(filtered.channels), "global")
        worst = max(worst, abs(np.sqrt(np.sum(pre.astype(np.float64) ** 2)) - 1.0))
        del out
    zero = cam.FusedSaliency(np.zeros((3, 3, 2), np.float32), (0, 1), "filtered")
    zero_ok = not np.any(cam.normalize_activate(zero).channels)
    # the unit-norm claim is about the pipeline output, so also check relu'd positive stacks end-to-end
    pos = cam.fuse_filter([cam.ClassSaliency(np.abs(rng.normal(size=(6, 6))).astype(np.float32), k) for k in range(3)])
    end = np.sqrt(np.sum(cam.normalize_activate(pos, "relu").channels.astype(np.float64) ** 2))
    worst = max(worst, abs(end - 1.0))
    return worst < 1e-6 and zero_ok, f"max |norm-1| {worst:.1e}, zero->zero {zero_ok}"


def _cosine(u, v) -> float:
    u, v = np.ravel(u).astype(np.float64), np.ravel(v).astype(np.float64)
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


def check_k1_reduction(n: int = 20) -> tuple[bool, str]:
    worst, used = 0.0, 0
    for seed in range(n * 3):
        model = testbed.make_model("tiny_cnn", seed=seed)
        image = InputImage(np.random.default_rng(seed).uniform(0, 1, (32, 32, 3)))
        fused, ranked, _ = cam.fm_g_cam(model, image, K=1)
        cap = capture(model, image, "auto", ranked.class_ids)
        gc = cam.grad_cam(cap, ranked.class_ids[0], rescale=False).values
        if np.ptp(gc) == 0:
            continue
        worst = max(worst, abs(_cosine(fused.channel(0), gc) - 1.0))
        used += 1
        if used == n:
            break
    return used == n and worst < 1e-6, f"{used} captures, max |cos-1| {worst:.1e}"


def check_gradcam_bruteforce(trials: int = 50, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        C, I, J = rng.integers(1, 9, size=3)
        a = rng.normal(size=(C, I, J)).astype(np.float32)
        g = rng.normal(size=(C, I, J)).astype(np.float32)
        pred = Prediction.from_scores(np.zeros(2))
        cap = CaptureResult(a, (g,), (0,), pred)
        got = cam.grad_cam(cap, 0).values
        ref = np.zeros((I, J))
        for i in range(I):
            for j in range(J):
                acc = 0.0
                for c in range(C):
                    alpha = sum(float(g[c, p, q]) for p in range(I) for q in range(J)) / (I * J)
                    acc += alpha * float(a[c, i, j])
                ref[i, j] = max(acc / C, 0.0)
        lo, hi = ref.min(), ref.max()
        ref = np.zeros_like(ref) if hi <= lo else (ref - lo) / (hi - lo)
        worst = max(worst, float(np.abs(got - ref).max()))
    return worst < 1e-6, f"{trials} captures, max abs diff {worst:.1e}"


def metric_ordering(seeds: int = 20, steps: int = 49) -> dict:
    """Mean IAUC/DAUC/DC for ideal vs random saliency on pixel_sum quadrant images."""
    model = testbed.make_model("pixel_sum")
    cfg = metrics.PerturbationConfig(steps=steps, insertion_start="black")
    acc = {k: [] for k in ("iauc_ideal", "iauc_random", "dauc_ideal", "dauc_random", "dc_ideal")}
    for seed in range(seeds):
        image = testbed.make_quadrant_image(32, 32, (0.9, 0.0, 0.0, 0.7), seed=seed)
        ideal = testbed.pixel_sum_importance(image, 0)
        rand = np.random.default_rng(1000 + seed).random((32, 32))
        for name, sal in (("ideal", ideal), ("random", rand)):
            d = metrics.deletion_curve(model, image, sal, 0, cfg)
            i = metrics.insertion_curve(model, image, sal, 0, cfg)
            acc[f"iauc_{name}"].append(metrics.auc(i))
            acc[f"dauc_{name}"].append(metrics.auc(d))
            if name == "ideal":
                acc["dc_ideal"].append(metrics.step_correlation(d, "deletion"))
    return {k: float(np.mean(v)) for k, v in acc.items()}


def check_metric_ordering(seeds: int = 20) -> tuple[bool, str]:
    m = metric_ordering(seeds)
    di = m["iauc_ideal"] - m["iauc_random"]
    dd = m["dauc_random"] - m["dauc_ideal"]
    ok = di > 0.05 and dd > 0.05 and m["dc_ideal"] > 0.5
    return ok, f"dIAUC {di:.3f}, dDAUC {dd:.3f}, DC {m['dc_ideal']:.3f}"


def quadrant_mass(seeds: int = 20) -> float:
    """Worst fraction of fused-channel mass inside the class's own quadrant."""
    model = testbed.make_model("pixel_sum")
    masks = testbed.quadrant_masks(32, 32)
    worst = 1.0
    for seed in range(seeds):
        image = testbed.make_quadrant_image(32, 32, (0.9, 0.0, 0.0, 0.7), seed=seed)
        fused, ranked, _ = cam.fm_g_cam(model, image, K=2)
        for k, c in enumerate(ranked.class_ids):
            ch = fused.channel(k)
            worst = min(worst, float(ch[masks[c]].sum() / ch.sum()))
    return worst


def check_quadrants(seeds: int = 20) -> tuple[bool, str]:
    worst = quadrant_mass(seeds)
    return worst >= 0.8, f"worst in-quadrant mass {worst:.3f}"


CHECKS = (
    ("gradient oracle", check_gradients),
    ("exclusivity", check_exclusivity),
    ("unit norm", check_unit_norm),
    ("K=1 reduction", check_k1_reduction),
    ("grad-cam brute force", check_gradcam_bruteforce),
    ("metric ordering", check_metric_ordering),
    ("quadrant attribution", check_quadrants),
)


@contextlib.contextmanager
def injected(fault: str | None):
    """Temporarily break the pipeline to prove the gate can fail."""
    if fault is None:
        yield
        return
    if fault != "skip-norm":
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    original = cam._l2_normalize
    cam._l2_normalize = lambda s, norm: s
    try:
        yield
    finally:
        cam._l2_normalize = original


def run(fault: str | None = None) -> list[Check]:
    results = []
    with injected(fault):
        for name, fn in CHECKS:
            t0 = time.perf_counter()
            try:
                passed, detail = fn()
            except Exception as exc:  # a crashing oracle is a failed oracle
                passed, detail = False, f"{type(exc).__name__}: {exc}"
            results.append(Check(name, bool(passed), detail, time.perf_counter() - t0))
    return results


def format_table(results: list[Check]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  time     detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:6.2f}s  {r.detail}")
    return "\n".join(lines)
