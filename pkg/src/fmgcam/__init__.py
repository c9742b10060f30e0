"""Fused multi-class Grad-CAM saliency maps, rendering and faithfulness metrics."""
from . import testbed  # noqa: F401  (registers the "testbed" adapter)
from .adapter import (
    CaptureResult,
    InputImage,
    LayerRef,
    ModelHandle,
    Prediction,
    RankedClasses,
    capture,
    list_layers,
    load_model,
    predict,
    top_k_classes,
)
from .cam import (
    ClassSaliency,
    FusedSaliency,
    channel_weights,
    class_saliency,
    explain,
    fm_g_cam,
    fuse_filter,
    grad_cam,
    normalize_activate,
)
from .errors import FMGCAMError

__version__ = "0.1.0"
