"""Overlays and comparison panels for fused and per-class saliency maps.

Each ranked class gets one hue; a pixel's colour is that hue scaled by the
saliency intensity, so the fused map never mixes colours. Rescaling for
display happens here only; cam-core outputs are left untouched.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .cam import FusedSaliency
from .errors import ParameterError, ShapeError

BASE_HUES = ((255, 0, 0), (0, 255, 0), (0, 0, 255), (255, 255, 0))
DEFAULT_ALPHA = 0.5

GAP = 4
TITLE_HEIGHT = 30
LEGEND_ROW = 14
BACKGROUND = (255, 255, 255)


@dataclass(frozen=True)
class Palette:
    hues: tuple[tuple[int, int, int], ...]
    name: str = "custom"

    def __post_init__(self):
        hues = tuple(tuple(int(v) for v in h) for h in self.hues)
        if any(len(h) != 3 or min(h) < 0 or max(h) > 255 for h in hues):
            raise ParameterError("hues must be 8-bit RGB triples")
        if len(set(hues)) != len(hues):
            raise ParameterError("palette hues must be pairwise distinct")
        object.__setattr__(self, "hues", hues)

    def __len__(self):
        return len(self.hues)

    def as_float(self) -> np.ndarray:
        return np.asarray(self.hues, dtype=np.float64) / 255.0


def default_palette(K: int = 4) -> Palette:
    """Red, green, blue, yellow; further hues by evenly spaced rotation."""
    hues = list(BASE_HUES)
    extra = max(0, K - len(hues))
    for i in range(extra):
        angle = 15.0 + i * 360.0 / extra
        while True:
            rgb = tuple(int(round(255 * v)) for v in colorsys.hsv_to_rgb((angle % 360) / 360.0, 1.0, 1.0))
            if rgb not in hues:
                break
            angle += 7.5
        hues.append(rgb)
    return Palette(tuple(hues), "default")


PALETTES = {"default": default_palette}


def get_palette(name: str, K: int) -> Palette:
    if name not in PALETTES:
        raise ParameterError(f"unknown palette {name!r}; available: {sorted(PALETTES)}")
    return PALETTES[name](K)


def _axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def upsample(m: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear upsampling with pixel-centre alignment, clipped to the input range."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D map, got {m.shape}")
    H, W = target
    I, J = m.shape
    if H < I or W < J:
        raise ParameterError(f"cannot upsample {m.shape} down to {target}")
    dtype = np.float64 if m.dtype == np.float64 else np.float32
    r0, r1, wr = _axis(I, H)
    c0, c1, wc = _axis(J, W)
    rows = m[r0] * (1 - wr)[:, None] + m[r1] * wr[:, None]
    out = rows[:, c0] * (1 - wc) + rows[:, c1] * wc
    return np.clip(out, m.min(), m.max()).astype(dtype)


def upsample_fused(fused: FusedSaliency, target: tuple[int, int]) -> FusedSaliency:
    """Upsample every channel, then re-apply the per-pixel max filter.

    Interpolation blends neighbouring classes along region borders; the
    re-filter keeps each output pixel owned by exactly one class.
    """
    stack = np.stack([upsample(fused.channel(k), target) for k in range(fused.K)], axis=-1)
    # by magnitude: an ELU/GELU winner can be negative next to zeroed channels
    winner = np.argmax(np.abs(stack), axis=-1)
    keep = np.arange(fused.K) == winner[..., None]
    return FusedSaliency(np.where(keep, stack, 0).astype(stack.dtype), fused.class_ids, fused.stage)


def colorize_fused(fused: FusedSaliency, palette: Palette) -> np.ndarray:
    """Float RGB image in [0, 1]: per-pixel winning hue times its intensity.

    The winning value is mapped linearly from min(0, lowest value) to the
    image-wide peak, so ReLU output scales by its maximum while the negative
    tail of ELU/GELU shows up as dim colour rather than disappearing.
    """
    if fused.K > len(palette):
        raise ParameterError(f"palette has {len(palette)} hues for K={fused.K}")
    v = np.asarray(fused.channels, dtype=np.float64)
    winner = np.argmax(np.abs(v), axis=-1)
    w = np.take_along_axis(v, winner[..., None], axis=-1)
    lo, hi = min(0.0, float(w.min())), float(w.max())
    intensity = (w - lo) / (hi - lo) if hi > lo else np.zeros_like(w)
    return palette.as_float()[: fused.K][winner] * intensity


def colorize_map(m: np.ndarray, hue: tuple[int, int, int]) -> np.ndarray:
    """Single-class map to float RGB using one hue, rescaled by its maximum."""
    v = np.clip(np.asarray(m, dtype=np.float64), 0, None)
    peak = v.max()
    if peak > 0:
        v = v / peak
    return v[..., None] * (np.asarray(hue, dtype=np.float64) / 255.0)


@dataclass(frozen=True)
class OverlayImage:
    pixels: np.ndarray
    legend: list = field(default_factory=list)
    alpha: float = DEFAULT_ALPHA


def _to_uint8(x: np.ndarray) -> np.ndarray:
    # round half down, so 191.5 -> 191 and 190.99999 -> 191
    return np.clip(np.ceil(x - 0.5), 0, 255).astype(np.uint8)


def overlay(image: np.ndarray, heat: np.ndarray, alpha: float = DEFAULT_ALPHA, legend=None) -> OverlayImage:
    """Blend ``heat`` over an 8-bit RGB image.

    ``out = (1 - alpha*m) * image + alpha*m * heat`` where ``m`` is the heat
    intensity (its largest RGB component), so unsalient pixels stay exact.
    """
    img = np.asarray(image)
    heat = np.asarray(heat, dtype=np.float64)
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.shape[:2] != heat.shape[:2] or heat.shape[-1] != 3 or img.shape[-1] != 3:
        raise ShapeError(f"image {img.shape} and heat {heat.shape} differ in resolution")
    m = alpha * heat.max(axis=-1, keepdims=True)
    out = (1.0 - m) * img.astype(np.float64) + m * (heat * 255.0)
    return OverlayImage(_to_uint8(out), list(legend or []), float(alpha))


def _font():
    return ImageFont.load_default()


def panel(
    image: np.ndarray,
    fused_overlay: OverlayImage,
    gradcam_overlays: Sequence[OverlayImage],
    labels: Sequence[str],
    *,
    fused_title: str = "FM-G-CAM",
    image_title: str = "Input",
) -> np.ndarray:
    """One row: input | FM-G-CAM | one Grad-CAM per ranked class.

    ``labels`` titles the Grad-CAM columns (class label and probability).
    The fused column carries the colour legend underneath.
    """
    if len(gradcam_overlays) == 0:
        raise ParameterError("at least one Grad-CAM overlay is required")
    if len(labels) != len(gradcam_overlays):
        raise ParameterError("one label per Grad-CAM overlay is required")
    columns = [np.asarray(image, dtype=np.uint8), fused_overlay.pixels] + [o.pixels for o in gradcam_overlays]
    titles = [image_title, fused_title] + list(labels)
    columns = [np.repeat(c[:, :, None], 3, axis=2) if c.ndim == 2 else c for c in columns]
    h = max(c.shape[0] for c in columns)
    legend_h = LEGEND_ROW * len(fused_overlay.legend)
    width = sum(c.shape[1] for c in columns) + GAP * (len(columns) - 1)
    canvas = Image.new("RGB", (width, TITLE_HEIGHT + h + legend_h), BACKGROUND)
    draw = ImageDraw.Draw(canvas)
    font = _font()
    x = 0
    for k, (col, title) in enumerate(zip(columns, titles)):
        canvas.paste(Image.fromarray(col), (x, TITLE_HEIGHT))
        draw.multiline_text((x + 2, 2), title, fill=(0, 0, 0), font=font, spacing=2)
        if k == 1:
            for row, (label, rgb) in enumerate(fused_overlay.legend):
                y = TITLE_HEIGHT + h + row * LEGEND_ROW
                draw.rectangle([x + 2, y + 2, x + 11, y + 11], fill=tuple(rgb))
                draw.text((x + 15, y + 1), str(label), fill=(0, 0, 0), font=font)
        x += col.shape[1] + GAP
    return np.asarray(canvas)


def column_bounds(widths: Sequence[int]) -> list[tuple[int, int]]:
    """Horizontal pixel extent of each panel column."""
    out, x = [], 0
    for w in widths:
        out.append((x, x + w))
        x += w + GAP
    return out


def save_png(path, pixels: np.ndarray) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(Path(path), format="PNG")


def legend_entries(class_ids: Sequence[int], labels: Sequence[str], palette: Palette) -> list:
    return [(str(lbl), list(palette.hues[k])) for k, (_c, lbl) in enumerate(zip(class_ids, labels))]


def write_legend(path, legend) -> None:
    data = [{"label": lbl, "color": list(rgb)} for lbl, rgb in legend]
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
