"""Explain a few images with a torchvision classifier through the pipeline.

No weights are downloaded: pass a state_dict checkpoint to see meaningful
maps, otherwise a seeded random resnet18 is used. Run:
python demos/explain_torchvision.py image_or_dir [checkpoint.pt]
"""
import sys

from fmgcam import pipeline

images = sys.argv[1]
model = {"adapter": "torchvision", "arch": "resnet18", "num_classes": 1000, "image_size": 224}
if len(sys.argv) > 2:
    model["checkpoint"] = sys.argv[2]

for fn in ("relu", "elu", "gelu"):
    cfg = pipeline.load_config(None, {"model": model, "K": 3, "activation": fn, "output_dir": f"demo_out/{fn}"})
    result = pipeline.cmd_explain(cfg, [images])
    top = [r["class_id"] for r in result.manifests[0]["ranked"]] if result.manifests else []
    print(f"{fn}: {len(result.manifests)} explained, {len(result.failures)} failed, first top-K {top} -> {cfg.output_path()}")
print("Grad-CAM columns of the panels match across the three runs; the FM-G-CAM column does not.")
