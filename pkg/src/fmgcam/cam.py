"""Grad-CAM and fused multi-class Grad-CAM (FM-G-CAM) on captured tensors.

The functions here are pure: they only consume :class:`CaptureResult` data,
except :func:`explain` / :func:`fm_g_cam`, which drive a model through the
adapter first. Float32 inputs stay float32; float64 inputs stay float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import erf

from .adapter import (
    CaptureResult,
    InputImage,
    LayerRef,
    ModelHandle,
    Prediction,
    RankedClasses,
    capture,
    predict,
    resolve_layer,
    top_k_classes,
)
from .errors import NumericError, ParameterError, ShapeError

ACTIVATIONS = ("relu", "elu", "gelu")
NORM_AXES = ("global", "per_map")
STAGES = ("raw", "filtered", "normalized")

# K presets: four classes when rendering, five when evaluating
RENDER_K = 4
EVAL_K = 5


def _as_float(x) -> np.ndarray:
    arr = np.asarray(x)
    return arr.astype(np.float64 if arr.dtype == np.float64 else np.float32, copy=False)


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains non-finite values")


def activate(x: np.ndarray, fn: str = "relu") -> np.ndarray:
    """Elementwise ReLU, ELU (alpha = 1) or exact-erf GELU."""
    x = _as_float(x)
    if fn == "relu":
        return np.maximum(x, 0).astype(x.dtype)
    if fn == "elu":
        return np.where(x > 0, x, np.expm1(np.minimum(x, 0))).astype(x.dtype)
    if fn == "gelu":
        return (0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))).astype(x.dtype)
    raise ParameterError(f"activation must be one of {ACTIVATIONS}, got {fn!r}")


@dataclass(frozen=True)
class ChannelWeights:
    alpha: np.ndarray
    class_id: int | None = None


@dataclass(frozen=True)
class ClassSaliency:
    values: np.ndarray
    class_id: int | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class FusedSaliency:
    """I x J x K stack of class maps, channel k belonging to the rank-(k+1) class."""

    channels: np.ndarray
    class_ids: tuple[int, ...]
    stage: str = "raw"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ParameterError(f"stage must be one of {STAGES}")
        ch = np.asarray(self.channels)
        if ch.ndim != 3 or ch.shape[2] != len(self.class_ids):
            raise ShapeError(f"channels {ch.shape} do not match {len(self.class_ids)} class ids")
        ch = ch.copy()
        ch.setflags(write=False)
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))

    @property
    def K(self) -> int:
        return self.channels.shape[2]

    def channel(self, k: int) -> np.ndarray:
        """Map of the k-th ranked class, zero-based."""
        return self.channels[:, :, k]


def channel_weights(gradient: np.ndarray, class_id: int | None = None) -> ChannelWeights:
    """Spatial mean of the gradient in every channel."""
    g = _as_float(gradient)
    if g.ndim != 3:
        raise ShapeError(f"gradient must be C x I x J, got {g.shape}")
    _require_finite(g, "gradient")
    return ChannelWeights(g.mean(axis=(1, 2)), class_id)


def class_saliency(weights: ChannelWeights, activations: np.ndarray) -> ClassSaliency:
    """Channel-weighted mean of the activations; negatives are kept."""
    a = _as_float(activations)
    alpha = np.asarray(weights.alpha)
    if a.ndim != 3 or alpha.shape != (a.shape[0],):
        raise ShapeError(f"{alpha.shape[0] if alpha.ndim else '?'} weights vs activations {a.shape}")
    _require_finite(a, "activations")
    dtype = np.result_type(a.dtype, alpha.dtype)
    r = np.tensordot(alpha.astype(dtype), a.astype(dtype), axes=1) / a.shape[0]
    return ClassSaliency(r, weights.class_id)


def min_max(x: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; constant maps become all zeros."""
    x = _as_float(x)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def grad_cam(capture: CaptureResult, class_id: int, *, rescale: bool = True) -> ClassSaliency:
    """Single-class Grad-CAM baseline.

    ReLU is applied to the weighted map and, unless ``rescale`` is False,
    the result is min-max rescaled to [0, 1].
    """
    g = capture.gradient(class_id)
    r = class_saliency(channel_weights(g, class_id), capture.activations).values
    r = activate(r, "relu")
    return ClassSaliency(min_max(r) if rescale else r, int(class_id))


def stack_maps(maps: Sequence[ClassSaliency]) -> FusedSaliency:
    if len(maps) == 0:
        raise ParameterError("at least one class map is required")
    shape = maps[0].values.shape
    for m in maps:
        if m.values.shape != shape:
            raise ShapeError(f"class map shapes differ: {m.values.shape} vs {shape}")
    ids = [m.class_id if m.class_id is not None else -1 - k for k, m in enumerate(maps)]
    stack = np.stack([_as_float(m.values) for m in maps], axis=-1)
    _require_finite(stack, "class maps")
    return FusedSaliency(stack, tuple(ids), "raw")


def fuse_filter(maps: Sequence[ClassSaliency], order: RankedClasses | None = None) -> FusedSaliency:
    """Keep, per pixel, only the class map holding the maximum value.

    ``maps`` must already be in rank order. On ties the lowest rank (most
    probable class) keeps its value.
    """
    raw = stack_maps(maps)
    if order is not None:
        if order.K != raw.K:
            raise ShapeError(f"{raw.K} maps for {order.K} ranked classes")
        given = [m.class_id for m in maps]
        if any(c is not None for c in given) and tuple(given) != order.class_ids:
            raise ParameterError("maps are not in the ranked class order")
        ids = order.class_ids
    else:
        ids = raw.class_ids
    r = raw.channels
    winner = np.argmax(r, axis=-1)  # first maximum = lowest rank
    keep = np.arange(r.shape[-1]) == winner[..., None]
    return FusedSaliency(np.where(keep, r, 0).astype(r.dtype), ids, "filtered")


def _l2_normalize(s: np.ndarray, norm: str) -> np.ndarray:
    # divide by the peak magnitude first so tiny or huge values neither
    # underflow nor overflow when squared
    if norm == "global":
        axes = None
    elif norm == "per_map":
        axes = (0, 1)
    else:
        raise ParameterError(f"norm must be one of {NORM_AXES}, got {norm!r}")
    x = s.astype(np.float64)
    peak = np.max(np.abs(x), axis=axes, keepdims=True)
    safe = np.where(peak > 0, peak, 1.0)
    t = x / safe
    total = np.sqrt(np.sum(t * t, axis=axes, keepdims=True))
    return np.where(peak > 0, t / np.where(total > 0, total, 1.0), 0.0).astype(s.dtype)


def normalize_activate(fused: FusedSaliency, fn: str = "relu", norm: str = "global") -> FusedSaliency:
    """Divide the concatenated K-channel stack by its L2 norm, then apply ``fn``.

    The norm is taken before rectification, so negative values contribute.
    An all-zero stack is returned unchanged.
    """
    if fused.stage != "filtered":
        raise ParameterError(f"expected a filtered stack, got stage {fused.stage!r}")
    s = _as_float(fused.channels)
    _require_finite(s, "fused saliency")
    out = activate(_l2_normalize(s, norm), fn)
    return FusedSaliency(out, fused.class_ids, "normalized")


def fused_from_capture(
    capture: CaptureResult,
    ranked: RankedClasses,
    fn: str = "relu",
    norm: str = "global",
) -> FusedSaliency:
    """Per-class weighted maps -> filtering -> normalisation + activation."""
    maps = []
    for c in ranked.class_ids:
        w = channel_weights(capture.gradient(c), c)
        maps.append(class_saliency(w, capture.activations))
    return normalize_activate(fuse_filter(maps, ranked), fn, norm)


@dataclass(frozen=True)
class Explanation:
    """Everything one explain pass yields, all sharing a single capture."""

    prediction: Prediction
    ranked: RankedClasses
    capture: CaptureResult
    layer: LayerRef
    fused: FusedSaliency
    grad_cams: tuple[ClassSaliency, ...]


def explain(
    model: ModelHandle,
    image: InputImage,
    layer: LayerRef | str | None = "auto",
    K: int = RENDER_K,
    fn: str = "relu",
    norm: str = "global",
) -> Explanation:
    layer = resolve_layer(model, layer)
    prediction = predict(model, image)
    ranked = top_k_classes(prediction, K)
    cap = capture(model, image, layer, ranked.class_ids)
    fused = fused_from_capture(cap, ranked, fn, norm)
    cams = tuple(grad_cam(cap, c) for c in ranked.class_ids)
    return Explanation(prediction, ranked, cap, layer, fused, cams)


def fm_g_cam(
    model: ModelHandle,
    image: InputImage,
    layer: LayerRef | str | None = "auto",
    K: int = RENDER_K,
    fn: str = "relu",
    norm: str = "global",
) -> tuple[FusedSaliency, RankedClasses, Prediction]:
    ex = explain(model, image, layer, K, fn, norm)
    return ex.fused, ex.ranked, ex.prediction
