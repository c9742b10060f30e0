"""Model adapter: the only place that talks to a concrete model runtime.

Everything downstream consumes :class:`CaptureResult` and :class:`Prediction`
values, which hold plain numpy arrays. The runtime here is PyTorch; a
:class:`ModelHandle` wraps an ``nn.Module`` together with its input contract,
preprocessing recipe and output head type.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch import nn

from .errors import (
    ClassIndexError,
    GradientUnavailable,
    ImageReadError,
    InputShapeError,
    ParameterError,
    ShapeError,
    UnsupportedModel,
)

log = logging.getLogger(__name__)


def _frozen(a, dtype=None) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class InputImage:
    """One image in the model's preprocessed domain, laid out H x W x C."""

    pixels: np.ndarray
    source_path: str | None = None
    preprocess_id: str = "identity-v1"

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3:
            raise InputShapeError(f"expected H x W x C pixels, got shape {px.shape}")
        h, w, c = px.shape
        if h < 1 or w < 1 or c not in (1, 3):
            raise InputShapeError(f"invalid image shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise InputShapeError("image contains non-finite pixel values")
        object.__setattr__(self, "pixels", _frozen(px, np.result_type(px.dtype, np.float32)))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def replace_pixels(self, pixels: np.ndarray) -> "InputImage":
        return InputImage(pixels, self.source_path, self.preprocess_id)


def softmax(scores: np.ndarray) -> np.ndarray:
    z = np.asarray(scores, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(scores: np.ndarray) -> np.ndarray:
    z = np.asarray(scores, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True)
class Prediction:
    """Pre-softmax class scores and the probabilities derived from them.

    For sigmoid-head (multi-label) models ``multilabel`` is set and the
    probabilities need not sum to one.
    """

    scores: np.ndarray
    probabilities: np.ndarray
    class_labels: tuple[str, ...] | None = None
    multilabel: bool = False

    def __post_init__(self):
        s = _frozen(self.scores, np.float64).ravel()
        p = _frozen(self.probabilities, np.float64).ravel()
        if s.size < 1 or s.shape != p.shape:
            raise ParameterError("scores and probabilities must have equal length >= 1")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(p))):
            raise ParameterError("prediction contains non-finite values")
        if np.any(p < 0) or np.any(p > 1):
            raise ParameterError("probabilities must lie in [0, 1]")
        if not self.multilabel and abs(p.sum() - 1.0) > 1e-5:
            raise ParameterError(f"probabilities sum to {p.sum()}, expected 1")
        if self.class_labels is not None:
            labels = tuple(self.class_labels)
            if len(labels) != s.size:
                raise ParameterError("class_labels length differs from class count")
            object.__setattr__(self, "class_labels", labels)
        s.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "probabilities", p)

    @classmethod
    def from_scores(cls, scores, *, multilabel=False, class_labels=None) -> "Prediction":
        probs = sigmoid(scores) if multilabel else softmax(scores)
        return cls(scores, probs, class_labels, multilabel)

    @property
    def num_classes(self) -> int:
        return self.scores.size

    def label(self, class_id: int) -> str:
        if self.class_labels is None:
            return f"class {class_id}"
        return self.class_labels[class_id]


@dataclass(frozen=True)
class RankedClasses:
    """Top-K classes ordered by descending probability."""

    class_ids: tuple[int, ...]
    probabilities: np.ndarray

    def __post_init__(self):
        ids = tuple(int(i) for i in self.class_ids)
        p = _frozen(self.probabilities, np.float64).ravel()
        if len(ids) < 1 or len(ids) != p.size:
            raise ParameterError("class_ids and probabilities must have equal length >= 1")
        if len(set(ids)) != len(ids):
            raise ParameterError("class_ids must be pairwise distinct")
        if np.any(np.diff(p) > 0):
            raise ParameterError("probabilities must be non-increasing")
        object.__setattr__(self, "class_ids", ids)
        object.__setattr__(self, "probabilities", p)

    @property
    def K(self) -> int:
        return len(self.class_ids)


@dataclass(frozen=True)
class LayerRef:
    layer_id: str
    output_shape: tuple[int, int, int]
    is_default: bool = False

    def __post_init__(self):
        if len(self.output_shape) != 3 or min(self.output_shape) < 1:
            raise ParameterError(f"invalid layer output shape {self.output_shape}")


@dataclass(frozen=True)
class CaptureResult:
    """Activations of one layer plus d(score)/d(activation) per requested class."""

    activations: np.ndarray
    gradients: tuple[np.ndarray, ...]
    class_ids: tuple[int, ...]
    prediction: Prediction
    layer_id: str = ""

    def __post_init__(self):
        a = _frozen(self.activations)
        grads = tuple(_frozen(g) for g in self.gradients)
        ids = tuple(int(c) for c in self.class_ids)
        if a.ndim != 3:
            raise ParameterError(f"activations must be C x I x J, got {a.shape}")
        if len(grads) != len(ids):
            raise ParameterError("one gradient tensor is required per class id")
        for g in grads:
            if g.shape != a.shape:
                raise ParameterError(f"gradient shape {g.shape} != activation shape {a.shape}")
            if not np.all(np.isfinite(g)):
                raise GradientUnavailable("non-finite gradient values")
        if not np.all(np.isfinite(a)):
            raise GradientUnavailable("non-finite activation values")
        object.__setattr__(self, "activations", a)
        object.__setattr__(self, "gradients", grads)
        object.__setattr__(self, "class_ids", ids)

    def gradient(self, class_id: int) -> np.ndarray:
        try:
            return self.gradients[self.class_ids.index(int(class_id))]
        except ValueError:
            raise ClassIndexError(f"no gradient captured for class {class_id}") from None


@dataclass(frozen=True)
class PreprocessRecipe:
    """Named, versioned mapping from an 8-bit RGB file to model input pixels."""

    name: str
    version: int = 1
    size: tuple[int, int] | None = None
    channels: int = 3
    mean: tuple[float, ...] = (0.0, 0.0, 0.0)
    std: tuple[float, ...] = (1.0, 1.0, 1.0)

    @property
    def id(self) -> str:
        size = f"-{self.size[0]}x{self.size[1]}" if self.size else ""
        return f"{self.name}{size}-v{self.version}"

    def _stats(self):
        mean = np.asarray(self.mean[: self.channels], dtype=np.float64)
        std = np.asarray(self.std[: self.channels], dtype=np.float64)
        return mean, std

    def apply(self, rgb: np.ndarray, source_path: str | None = None) -> InputImage:
        img = Image.fromarray(np.asarray(rgb, dtype=np.uint8))
        if self.size is not None:
            img = img.resize((self.size[1], self.size[0]), Image.BILINEAR)
        if self.channels == 1:
            img = img.convert("L")
        arr = np.asarray(img, dtype=np.float64) / 255.0
        if arr.ndim == 2:
            arr = arr[:, :, None]
        mean, std = self._stats()
        return InputImage((arr - mean) / std, source_path, self.id)

    def black(self) -> np.ndarray:
        """Per-channel value of a black pixel in the preprocessed domain."""
        mean, std = self._stats()
        return -mean / std

    def to_display(self, image: InputImage) -> np.ndarray:
        """Invert the normalisation back to 8-bit RGB at the image's own size."""
        mean, std = self._stats()
        arr = np.clip(image.pixels * std + mean, 0.0, 1.0)
        arr = np.round(arr * 255.0).astype(np.uint8)
        if arr.shape[2] == 1:
            arr = np.repeat(arr, 3, axis=2)
        return arr


IDENTITY = PreprocessRecipe("identity")
GRAYSCALE = PreprocessRecipe("identity-gray", channels=1)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def imagenet_recipe(image_size: int = 224) -> PreprocessRecipe:
    return PreprocessRecipe("imagenet-resize", 1, (image_size, image_size), 3, IMAGENET_MEAN, IMAGENET_STD)


def read_rgb(path: str | Path) -> np.ndarray:
    """Decode an image file to an 8-bit RGB array."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageReadError(f"cannot read image {path}: {exc}") from exc


class ModelHandle:
    """An ``nn.Module`` plus the metadata needed to explain it.

    A handle is confined to one thread at a time. ``batch_size`` > 1 lets
    perturbation curves re-score several images per forward pass; PyTorch
    does not guarantee batched results are bit-identical to single-image
    ones, so the default is 1.
    """

    def __init__(
        self,
        module: nn.Module,
        input_shape: tuple[int, int, int],
        *,
        recipe: PreprocessRecipe = IDENTITY,
        output: str = "softmax",
        class_labels: Sequence[str] | None = None,
        dtype: torch.dtype = torch.float32,
        batch_size: int = 1,
        name: str = "model",
    ):
        if output not in ("softmax", "sigmoid"):
            raise ParameterError(f"unknown output head {output!r}")
        if batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        self.module = module.to(dtype).eval()
        self.input_shape = tuple(int(v) for v in input_shape)
        self.recipe = recipe
        self.output = output
        self.class_labels = tuple(class_labels) if class_labels is not None else None
        self.dtype = dtype
        self.batch_size = batch_size
        self.name = name
        self._layers: list[LayerRef] | None = None

    def __repr__(self):
        return f"ModelHandle({self.name!r}, input_shape={self.input_shape})"

    @property
    def multilabel(self) -> bool:
        return self.output == "sigmoid"

    def check_image(self, image: InputImage) -> None:
        c, h, w = self.input_shape
        if image.pixels.shape != (h, w, c):
            raise InputShapeError(
                f"image shape {image.pixels.shape} does not match model input (H, W, C)={(h, w, c)}"
            )

    def to_tensor(self, pixels: np.ndarray) -> torch.Tensor:
        arr = np.asarray(pixels)
        if arr.ndim == 3:
            arr = arr[None]
        # contiguous NCHW: strides decide the conv kernel, and so the exact bits
        return torch.tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)), dtype=self.dtype)

    def probabilities(self, scores: np.ndarray) -> np.ndarray:
        return sigmoid(scores) if self.multilabel else softmax(scores)

    def named_module(self, layer_id: str) -> nn.Module:
        modules = dict(self.module.named_modules())
        if layer_id not in modules or layer_id == "":
            raise ParameterError(f"layer {layer_id!r} does not belong to model {self.name!r}")
        return modules[layer_id]


# -- registry ---------------------------------------------------------------

_ADAPTERS: dict[str, Callable[..., ModelHandle]] = {}


def register_adapter(name: str):
    def deco(factory):
        _ADAPTERS[name] = factory
        return factory

    return deco


def available_adapters() -> list[str]:
    return sorted(_ADAPTERS)


def load_model(adapter: str, checkpoint: str | Path | None = None, **options) -> ModelHandle:
    """Build a model handle through a registered adapter."""
    if adapter not in _ADAPTERS:
        raise ParameterError(f"unknown adapter {adapter!r}; available: {available_adapters()}")
    return _ADAPTERS[adapter](checkpoint=checkpoint, **options)


def _read_labels(path):
    if path is None:
        return None
    return [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]


@register_adapter("torchvision")
def torchvision_adapter(
    checkpoint=None,
    arch: str = "resnet50",
    num_classes: int = 1000,
    image_size: int = 224,
    output: str = "softmax",
    labels: str | None = None,
    seed: int = 0,
    batch_size: int = 1,
) -> ModelHandle:
    """Any architecture from the torchvision registry, weights from ``checkpoint``.

    No weights are downloaded: without a checkpoint the network keeps its
    seeded random initialisation.
    """
    import torchvision

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = torchvision.models.get_model(arch, weights=None, num_classes=num_classes)
    if checkpoint is not None:
        state = torch.load(checkpoint, map_location="cpu", weights_only=True)
        module.load_state_dict(state)
    return ModelHandle(
        module,
        (3, image_size, image_size),
        recipe=imagenet_recipe(image_size),
        output=output,
        class_labels=_read_labels(labels),
        batch_size=batch_size,
        name=f"torchvision:{arch}",
    )


# -- operations -------------------------------------------------------------


def list_layers(model: ModelHandle) -> list[LayerRef]:
    """Convolutional layers in execution order; the deepest one is the default."""
    if model._layers is not None:
        return list(model._layers)
    fired: list[tuple[str, tuple[int, ...]]] = []
    handles = []
    for name, mod in model.module.named_modules():
        if isinstance(mod, nn.Conv2d):

            def hook(_m, _inp, out, name=name):
                if name not in (n for n, _ in fired):
                    fired.append((name, tuple(out.shape[1:])))

            handles.append(mod.register_forward_hook(hook))
    if not handles:
        raise UnsupportedModel(f"model {model.name!r} contains no convolutional layer")
    try:
        with torch.no_grad():
            model.module(torch.zeros((1, *model.input_shape), dtype=model.dtype))
    finally:
        for h in handles:
            h.remove()
    if not fired:
        raise UnsupportedModel(f"no convolutional layer of {model.name!r} is used in the forward pass")
    layers = [LayerRef(n, s, i == len(fired) - 1) for i, (n, s) in enumerate(fired)]
    model._layers = layers
    return list(layers)


def default_layer(model: ModelHandle) -> LayerRef:
    return list_layers(model)[-1]


def resolve_layer(model: ModelHandle, layer: LayerRef | str | None = "auto") -> LayerRef:
    """Turn ``"auto"``, a module path or a LayerRef into a LayerRef of ``model``."""
    if layer is None or layer == "auto":
        return default_layer(model)
    layer_id = layer.layer_id if isinstance(layer, LayerRef) else str(layer)
    for ref in list_layers(model):
        if ref.layer_id == layer_id:
            return ref
    # non-conv module chosen explicitly, e.g. a residual block
    mod = model.named_module(layer_id)
    shape = []
    h = mod.register_forward_hook(lambda _m, _i, out: shape.append(tuple(out.shape[1:])))
    try:
        with torch.no_grad():
            model.module(torch.zeros((1, *model.input_shape), dtype=model.dtype))
    finally:
        h.remove()
    if not shape or len(shape[0]) != 3:
        raise ParameterError(f"layer {layer_id!r} does not produce a C x I x J feature map")
    return LayerRef(layer_id, shape[0], False)


def predict(model: ModelHandle, image: InputImage) -> Prediction:
    model.check_image(image)
    with torch.no_grad():
        scores = model.module(model.to_tensor(image.pixels))[0]
    scores = scores.double().numpy()
    return Prediction(scores, model.probabilities(scores), model.class_labels, model.multilabel)


def predict_many(model: ModelHandle, pixels: np.ndarray) -> np.ndarray:
    """Class probabilities for a stack of N x H x W x C images.

    Rows are scored ``model.batch_size`` at a time; with the default of one
    every row is bit-identical to :func:`predict` on the same pixels.
    """
    pixels = np.asarray(pixels)
    c, h, w = model.input_shape
    if pixels.ndim != 4 or pixels.shape[1:] != (h, w, c):
        raise InputShapeError(f"expected N x {h} x {w} x {c} stack, got {pixels.shape}")
    out = []
    with torch.no_grad():
        for start in range(0, len(pixels), model.batch_size):
            scores = model.module(model.to_tensor(pixels[start : start + model.batch_size]))
            out.append(model.probabilities(scores.double().numpy()))
    return np.concatenate(out, axis=0)


def capture(
    model: ModelHandle,
    image: InputImage,
    layer: LayerRef | str | None,
    class_ids: Sequence[int],
) -> CaptureResult:
    """One forward pass, then one backward pass per class id.

    Gradients are taken of the pre-softmax score of each class with respect
    to the chosen layer's output.
    """
    model.check_image(image)
    ids = [int(c) for c in class_ids]
    if not ids:
        raise ParameterError("class_ids must be non-empty")
    layer = resolve_layer(model, layer)
    mod = model.named_module(layer.layer_id)
    stored = {}

    def hook(_m, _inp, out):
        stored["a"] = out
        # hand downstream a copy so in-place ops cannot clobber the capture
        return out.clone()

    x = model.to_tensor(image.pixels).requires_grad_(True)
    h = mod.register_forward_hook(hook)
    try:
        with torch.enable_grad():
            scores = model.module(x)
    finally:
        h.remove()
    n_classes = scores.shape[1]
    for c in ids:
        if not 0 <= c < n_classes:
            raise ClassIndexError(f"class id {c} outside [0, {n_classes})")
    a = stored.get("a")
    if a is None or not isinstance(a, torch.Tensor) or a.dim() != 4:
        raise GradientUnavailable(f"layer {layer.layer_id!r} did not yield a feature map")
    if not a.requires_grad:
        raise GradientUnavailable(f"layer {layer.layer_id!r} output is not differentiable")
    grads = []
    for c in ids:
        (g,) = torch.autograd.grad(scores[0, c], a, retain_graph=True, allow_unused=True)
        if g is None:
            raise GradientUnavailable(f"class {c} score does not depend on layer {layer.layer_id!r}")
        grads.append(g[0].detach().numpy().copy())
    raw = scores[0].detach().double().numpy()
    pred = Prediction(raw, model.probabilities(raw), model.class_labels, model.multilabel)
    return CaptureResult(a[0].detach().numpy().copy(), tuple(grads), tuple(ids), pred, layer.layer_id)


def scores_with_activation(
    model: ModelHandle, image: InputImage, layer: LayerRef | str | None, activations: np.ndarray
) -> np.ndarray:
    """Class scores when ``layer``'s output is overridden by ``activations``.

    Lets a finite-difference oracle evaluate the network head as a function
    of the captured feature map without going through autograd.
    """
    layer = resolve_layer(model, layer)
    mod = model.named_module(layer.layer_id)
    replacement = torch.from_numpy(np.asarray(activations)[None]).to(model.dtype)

    def hook(_m, _inp, out):
        if out.shape != replacement.shape:
            raise ShapeError(f"replacement {tuple(replacement.shape)} != layer output {tuple(out.shape)}")
        return replacement

    h = mod.register_forward_hook(hook)
    try:
        with torch.no_grad():
            scores = model.module(model.to_tensor(image.pixels))[0]
    finally:
        h.remove()
    return scores.double().numpy()


def top_k_classes(prediction: Prediction, K: int) -> RankedClasses:
    """The K most probable classes; ties go to the higher score, then the lower id."""
    n = prediction.num_classes
    if not 1 <= K <= n:
        raise ParameterError(f"K={K} outside [1, {n}]")
    ids = np.arange(n)
    order = np.lexsort((ids, -prediction.scores, -prediction.probabilities))[:K]
    return RankedClasses(tuple(int(i) for i in order), prediction.probabilities[order])

