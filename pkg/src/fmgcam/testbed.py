"""Synthetic models and images with known gradients and pixel importance.

Two model kinds:

``tiny_cnn``
    conv3x3x8 -> relu -> avgpool2 -> conv3x3x8 -> relu -> global average
    pool -> dense. Seeded weights; average pooling keeps it smooth apart from
    the ReLU kinks.
``pixel_sum``
    Class ``c`` scores the mean intensity of quadrant ``c`` (row-major:
    0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right). The input is
    split into one masked copy per quadrant and reduced by a grouped 1x1
    convolution, so the captured conv layer carries one channel per class
    and the exact pixel importance is known.
"""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .adapter import GRAYSCALE, IDENTITY, InputImage, ModelHandle, PreprocessRecipe, register_adapter
from .errors import ParameterError

QUADRANT_LABELS = ("top-left", "top-right", "bottom-left", "bottom-right")
_DTYPES = {"single": torch.float32, "double": torch.float64}


def quadrant_masks(h: int, w: int) -> np.ndarray:
    """4 x H x W boolean masks, one per quadrant in row-major order."""
    if h % 2 or w % 2:
        raise ParameterError(f"quadrants need even dimensions, got {h} x {w}")
    masks = np.zeros((4, h, w), dtype=bool)
    hh, hw = h // 2, w // 2
    masks[0, :hh, :hw] = True
    masks[1, :hh, hw:] = True
    masks[2, hh:, :hw] = True
    masks[3, hh:, hw:] = True
    return masks


class QuadrantSplit(nn.Module):
    """N x C x H x W -> N x 4C x H x W, group q holding only quadrant q."""

    def forward(self, x):
        n, c, h, w = x.shape
        masks = torch.from_numpy(quadrant_masks(h, w)).to(x.dtype)
        return (x[:, None] * masks[None, :, None]).reshape(n, 4 * c, h, w)


class QuadrantMean(nn.Module):
    def forward(self, x):
        h, w = x.shape[-2:]
        return x.sum(dim=(2, 3)) * (4.0 / (h * w))


def _tiny_cnn(in_channels: int, num_classes: int) -> nn.Module:
    return nn.Sequential(
        nn.Conv2d(in_channels, 8, 3, padding=1),
        nn.ReLU(),
        nn.AvgPool2d(2),
        nn.Conv2d(8, 8, 3, padding=1),
        nn.ReLU(),
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
        nn.Linear(8, num_classes),
    )


def _pixel_sum(in_channels: int, dtype: torch.dtype) -> nn.Module:
    # weights are set in the target dtype; 1/3 rounded to float32 first would stick
    conv = nn.Conv2d(4 * in_channels, 4, 1, groups=4, bias=False, dtype=dtype)
    with torch.no_grad():
        conv.weight.fill_(1.0 / in_channels)
    conv.weight.requires_grad_(False)
    return nn.Sequential(QuadrantSplit(), conv, QuadrantMean())


def make_model(
    kind: str,
    seed: int = 0,
    precision: str = "single",
    *,
    size: int = 32,
    in_channels: int | None = None,
    num_classes: int = 4,
    batch_size: int = 1,
) -> ModelHandle:
    """Build a testbed model. Identical arguments give identical weights."""
    if precision not in _DTYPES:
        raise ParameterError(f"precision must be one of {sorted(_DTYPES)}")
    if kind == "tiny_cnn":
        in_channels = 3 if in_channels is None else in_channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            module = _tiny_cnn(in_channels, num_classes)
        labels = None
    elif kind == "pixel_sum":
        in_channels = 1 if in_channels is None else in_channels
        if size % 2:
            raise ParameterError("pixel_sum needs an even input size")
        module = _pixel_sum(in_channels, _DTYPES[precision])
        labels = QUADRANT_LABELS
    else:
        raise ParameterError(f"unknown testbed kind {kind!r}")
    return ModelHandle(
        module,
        (in_channels, size, size),
        recipe=PreprocessRecipe("testbed", 1, (size, size), in_channels),
        class_labels=labels,
        dtype=_DTYPES[precision],
        batch_size=batch_size,
        name=f"testbed:{kind}",
    )


@register_adapter("testbed")
def testbed_adapter(checkpoint=None, kind: str = "tiny_cnn", seed: int = 0, precision: str = "single", **options):
    handle = make_model(kind, seed, precision, **options)
    if checkpoint is not None:
        state = torch.load(checkpoint, map_location="cpu", weights_only=True)
        handle.module.load_state_dict(state)
        handle.module.to(handle.dtype).eval()
    return handle


def make_quadrant_image(
    H: int,
    W: int,
    intensities,
    seed: int = 0,
    *,
    channels: int = 1,
    noise: float = 0.01,
) -> InputImage:
    """Each quadrant filled with its intensity plus uniform noise in [-noise, noise]."""
    intensities = np.asarray(intensities, dtype=np.float64)
    if intensities.shape != (4,):
        raise ParameterError("exactly four quadrant intensities are required")
    masks = quadrant_masks(H, W)
    base = np.tensordot(intensities, masks.astype(np.float64), axes=1)
    rng = np.random.default_rng(seed)
    pixels = base[:, :, None] + rng.uniform(-noise, noise, size=(H, W, channels))
    recipe = IDENTITY if channels == 3 else GRAYSCALE
    return InputImage(pixels, preprocess_id=recipe.id)


def pixel_sum_importance(image: InputImage, class_id: int) -> np.ndarray:
    """Exact gradient x input attribution of the pixel_sum model, H x W."""
    h, w = image.height, image.width
    mask = quadrant_masks(h, w)[class_id]
    intensity = image.pixels.mean(axis=2)
    return np.where(mask, intensity * (4.0 / (h * w)), 0.0)
