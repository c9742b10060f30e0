"""Deletion / insertion faithfulness metrics repeated over top-K class ranks.

For one saliency map and one target class, pixels are perturbed in
descending saliency order (ties by row-major index), ``ceil(H*W / steps)``
at a time, and the target-class probability is re-scored after every step.

* DAUC / IAUC: trapezoidal area under the deletion / insertion curve.
* DC / IC: Pearson correlation between the mean saliency of the pixels
  changed at a step and the probability change that step caused (drop for
  deletion, gain for insertion).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import cam
from .adapter import InputImage, LayerRef, ModelHandle, predict, predict_many
from .errors import ParameterError, ShapeError
from .render import upsample

CAM_TYPES = ("fm_g_cam", "grad_cam")
CAM_NAMES = {"fm_g_cam": "FM-G-CAM", "grad_cam": "Grad-CAM"}
DELETION_BASELINES = ("black", "mean", "blur")
INSERTION_STARTS = ("blur", "black")
RECORD_FIELDS = ("image_id", "cam_type", "class_rank", "class_id", "dauc", "iauc", "dc", "ic")
TABLE3_COLUMNS = ("CAM Type", "Class Rank", "Mean IAUC", "Mean IC", "Mean DAUC", "Mean DC")


@dataclass(frozen=True)
class PerturbationConfig:
    steps: int = 49
    deletion_baseline: str = "black"
    insertion_start: str = "blur"
    blur_sigma: float | None = None  # None: 5% of min(H, W)

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 2:
            raise ParameterError(f"steps must be an integer >= 2, got {self.steps}")
        if self.deletion_baseline not in DELETION_BASELINES:
            raise ParameterError(f"deletion_baseline must be one of {DELETION_BASELINES}")
        if self.insertion_start not in INSERTION_STARTS:
            raise ParameterError(f"insertion_start must be one of {INSERTION_STARTS}")
        if self.blur_sigma is not None and not self.blur_sigma > 0:
            raise ParameterError("blur_sigma must be > 0")

    def sigma(self, h: int, w: int) -> float:
        return self.blur_sigma if self.blur_sigma is not None else 0.05 * min(h, w)

    def pixels_per_step(self, h: int, w: int) -> int:
        return math.ceil(h * w / self.steps)


@dataclass(frozen=True)
class Curve:
    xs: np.ndarray
    ys: np.ndarray
    step_saliency: np.ndarray

    def __post_init__(self):
        xs, ys, ss = (np.asarray(v, dtype=np.float64) for v in (self.xs, self.ys, self.step_saliency))
        if xs.ndim != 1 or xs.shape != ys.shape or ss.shape != (xs.size - 1,):
            raise ShapeError("curve needs len(xs) == len(ys) == len(step_saliency) + 1")
        if xs[0] != 0.0 or xs[-1] != 1.0 or np.any(np.diff(xs) <= 0):
            raise ParameterError("xs must increase strictly from 0 to 1")
        if np.any(ys < 0) or np.any(ys > 1):
            raise ParameterError("ys must lie in [0, 1]")
        for name, v in (("xs", xs), ("ys", ys), ("step_saliency", ss)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def steps(self) -> int:
        return self.step_saliency.size


@dataclass(frozen=True)
class MetricRecord:
    image_id: str
    cam_type: str
    class_rank: int
    class_id: int
    dauc: float
    iauc: float
    dc: float
    ic: float

    def __post_init__(self):
        # plain Python scalars, so CSV/JSON output never sees numpy reprs
        for name, kind in (("image_id", str), ("cam_type", str), ("class_rank", int), ("class_id", int)):
            object.__setattr__(self, name, kind(getattr(self, name)))
        for name in ("dauc", "iauc", "dc", "ic"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ParameterError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        if self.cam_type not in CAM_TYPES:
            raise ParameterError(f"cam_type must be one of {CAM_TYPES}")
        if self.class_rank < 1:
            raise ParameterError("class_rank starts at 1")
        if not (-1.0 <= self.dc <= 1.0 and -1.0 <= self.ic <= 1.0):
            raise ParameterError("dc and ic must lie in [-1, 1]")
        if self.dauc < 0 or self.iauc < 0:
            raise ParameterError("dauc and iauc must be >= 0")

    def row(self) -> dict:
        return asdict(self)


def perturbation_order(saliency: np.ndarray) -> np.ndarray:
    """Flat pixel indices by descending saliency, ties in row-major order."""
    return np.argsort(-np.asarray(saliency, dtype=np.float64).ravel(), kind="stable")


def schedule(n_pixels: int, cfg: PerturbationConfig) -> list[slice]:
    """Step slices over the perturbation order; the last step takes the remainder.

    When ``ceil(n / steps)`` pixels per step exhausts the image early, the
    curve simply has fewer steps.
    """
    per = math.ceil(n_pixels / cfg.steps)
    return [slice(s, min(s + per, n_pixels)) for s in range(0, n_pixels, per)]


def baseline_image(model: ModelHandle, image: InputImage, kind: str, cfg: PerturbationConfig) -> np.ndarray:
    px = image.pixels
    if kind == "black":
        black = model.recipe.black()
        if black.size != px.shape[2]:
            black = np.zeros(px.shape[2])
        return np.broadcast_to(black.astype(px.dtype), px.shape).copy()
    if kind == "mean":
        return np.broadcast_to(px.mean(axis=(0, 1)), px.shape).astype(px.dtype)
    if kind == "blur":
        s = cfg.sigma(image.height, image.width)
        return gaussian_filter(px, sigma=(s, s, 0)).astype(px.dtype)
    raise ParameterError(f"unknown baseline {kind!r}")


def _curve(model, image, saliency, class_id, cfg, mode) -> Curve:
    cfg = cfg or PerturbationConfig()
    h, w = image.height, image.width
    sal = np.asarray(saliency, dtype=np.float64)
    if sal.shape != (h, w):
        raise ShapeError(f"saliency {sal.shape} must match image resolution {(h, w)}")
    order = perturbation_order(sal)
    steps = schedule(h * w, cfg)
    if mode == "deletion":
        current = image.pixels.copy()
        target = baseline_image(model, image, cfg.deletion_baseline, cfg)
    else:
        current = baseline_image(model, image, cfg.insertion_start, cfg)
        target = image.pixels
    frames = [current.copy()]
    for sl in steps:
        rows, cols = np.unravel_index(order[sl], (h, w))
        current[rows, cols] = target[rows, cols]
        frames.append(current.copy())
    unperturbed = predict(model, image).probabilities[class_id]
    if mode == "deletion":
        inner = predict_many(model, np.stack(frames[1:]))[:, class_id]
        ys = np.concatenate([[unperturbed], inner])
    else:
        inner = predict_many(model, np.stack(frames[:-1]))[:, class_id]
        ys = np.concatenate([inner, [unperturbed]])
    flat = sal.ravel()
    step_sal = np.array([flat[order[sl]].mean() for sl in steps])
    counts = np.cumsum([sl.stop - sl.start for sl in steps])
    xs = np.concatenate([[0.0], counts / (h * w)])
    xs[-1] = 1.0
    return Curve(xs, np.clip(ys, 0.0, 1.0), step_sal)


def deletion_curve(model, image, saliency, class_id, cfg: PerturbationConfig | None = None) -> Curve:
    """Replace pixels by the deletion baseline, most salient first."""
    return _curve(model, image, saliency, class_id, cfg, "deletion")


def insertion_curve(model, image, saliency, class_id, cfg: PerturbationConfig | None = None) -> Curve:
    """Reveal the original pixels over the insertion start image, most salient first."""
    return _curve(model, image, saliency, class_id, cfg, "insertion")


def auc(curve: Curve) -> float:
    return float(np.trapezoid(curve.ys, curve.xs))


def step_correlation(curve: Curve, mode: str, *, full: bool = False):
    """Pearson r between per-step saliency and per-step score change.

    A constant series yields 0; with ``full=True`` a ``(r, degenerate)``
    pair is returned instead of ``r`` alone.
    """
    if mode not in ("deletion", "insertion"):
        raise ParameterError(f"mode must be 'deletion' or 'insertion', got {mode!r}")
    ys = curve.ys
    d = ys[:-1] - ys[1:] if mode == "deletion" else ys[1:] - ys[:-1]
    s = curve.step_saliency
    degenerate = d.size < 2 or np.ptp(d) == 0 or np.ptp(s) == 0
    if degenerate:
        r = 0.0
    else:
        dc, sc = d - d.mean(), s - s.mean()
        denom = math.sqrt(float(np.dot(dc, dc)) * float(np.dot(sc, sc)))
        r = 0.0 if denom == 0 else float(np.clip(np.dot(dc, sc) / denom, -1.0, 1.0))
        degenerate = denom == 0
    return (r, degenerate) if full else r


def saliency_for_rank(
    cam_type: str,
    fused: cam.FusedSaliency,
    gradcams: Sequence[cam.ClassSaliency],
    rank: int,
    size: tuple[int, int] | None = None,
) -> np.ndarray:
    """The map evaluated for the rank-th class (1-based), upsampled to ``size``.

    FM-G-CAM contributes its rank-th fused channel; Grad-CAM the rank-th
    class's own map.
    """
    if cam_type == "fm_g_cam":
        K = fused.K
        pick = lambda: fused.channel(rank - 1)  # noqa: E731
    elif cam_type == "grad_cam":
        K = len(gradcams)
        pick = lambda: gradcams[rank - 1].values  # noqa: E731
    else:
        raise ParameterError(f"cam_type must be one of {CAM_TYPES}, got {cam_type!r}")
    if not 1 <= rank <= K:
        raise ParameterError(f"rank {rank} outside [1, {K}]")
    m = pick()
    return m if size is None else upsample(m, size)


def evaluate_explanation(
    model: ModelHandle,
    image: InputImage,
    ex: cam.Explanation,
    cam_types: Sequence[str] = CAM_TYPES,
    cfg: PerturbationConfig | None = None,
    image_id: str = "",
) -> list[MetricRecord]:
    cfg = cfg or PerturbationConfig()
    size = (image.height, image.width)
    records = []
    for cam_type in cam_types:
        for rank, class_id in enumerate(ex.ranked.class_ids, start=1):
            sal = saliency_for_rank(cam_type, ex.fused, ex.grad_cams, rank, size)
            dcurve = deletion_curve(model, image, sal, class_id, cfg)
            icurve = insertion_curve(model, image, sal, class_id, cfg)
            records.append(
                MetricRecord(
                    image_id=image_id,
                    cam_type=cam_type,
                    class_rank=rank,
                    class_id=class_id,
                    dauc=auc(dcurve),
                    iauc=auc(icurve),
                    dc=step_correlation(dcurve, "deletion"),
                    ic=step_correlation(icurve, "insertion"),
                )
            )
    return records


def evaluate_image(
    model: ModelHandle,
    image: InputImage,
    K: int = cam.EVAL_K,
    cam_types: Sequence[str] = CAM_TYPES,
    cfg: PerturbationConfig | None = None,
    *,
    layer: LayerRef | str | None = "auto",
    fn: str = "relu",
    norm: str = "global",
    image_id: str = "",
) -> list[MetricRecord]:
    """K x len(cam_types) records; both CAM types share one capture."""
    if K < 1:
        raise ParameterError("K must be >= 1")
    for t in cam_types:
        if t not in CAM_TYPES:
            raise ParameterError(f"unknown cam type {t!r}")
    ex = cam.explain(model, image, layer, K, fn, norm)
    return evaluate_explanation(model, image, ex, cam_types, cfg, image_id)


def aggregate(records: Iterable[MetricRecord]) -> list[dict]:
    """Mean metrics per (cam_type, class_rank), FM-G-CAM rows first."""
    records = list(records)
    if not records:
        raise ParameterError("no records to aggregate")
    groups: dict[tuple[str, int], list[MetricRecord]] = {}
    for r in records:
        groups.setdefault((r.cam_type, r.class_rank), []).append(r)
    rows = []
    for key in sorted(groups, key=lambda k: (CAM_TYPES.index(k[0]), k[1])):
        grp = groups[key]
        rows.append(
            {
                "cam_type": key[0],
                "class_rank": key[1],
                "mean_iauc": float(np.mean([r.iauc for r in grp])),
                "mean_ic": float(np.mean([r.ic for r in grp])),
                "mean_dauc": float(np.mean([r.dauc for r in grp])),
                "mean_dc": float(np.mean([r.dc for r in grp])),
                "count": len(grp),
            }
        )
    return rows


# -- persistence --------------------------------------------------------------


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def write_records_csv(path, records: Iterable[MetricRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RECORD_FIELDS)
        for r in records:
            writer.writerow([_fmt(getattr(r, f)) for f in RECORD_FIELDS])


def read_records_csv(path) -> list[MetricRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RECORD_FIELDS:
            raise ParameterError(f"{path}: unexpected columns {reader.fieldnames}")
        return [
            MetricRecord(
                row["image_id"],
                row["cam_type"],
                int(row["class_rank"]),
                int(row["class_id"]),
                float(row["dauc"]),
                float(row["iauc"]),
                float(row["dc"]),
                float(row["ic"]),
            )
            for row in reader
        ]


def write_records_json(path, records: Iterable[MetricRecord]) -> None:
    data = [r.row() for r in records]
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def write_aggregate_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TABLE3_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    CAM_NAMES[row["cam_type"]],
                    row["class_rank"],
                    repr(row["mean_iauc"]),
                    repr(row["mean_ic"]),
                    repr(row["mean_dauc"]),
                    repr(row["mean_dc"]),
                ]
            )
