"""Deletion and insertion curves for an ideal and a random ordering.

A good saliency map drops the class score fast when its top pixels are
removed and raises it fast when they are revealed. Run:
python demos/deletion_insertion.py
"""
import numpy as np

from fmgcam import metrics, testbed

model = testbed.make_model("pixel_sum")
image = testbed.make_quadrant_image(32, 32, (0.9, 0.0, 0.0, 0.7), seed=1)
cfg = metrics.PerturbationConfig(steps=49, insertion_start="black")

orderings = {
    "ideal": testbed.pixel_sum_importance(image, 0),
    "random": np.random.default_rng(0).random((32, 32)),
}
print(f"{'ordering':8} {'DAUC':>7} {'IAUC':>7} {'DC':>7} {'IC':>7}")
for name, sal in orderings.items():
    d = metrics.deletion_curve(model, image, sal, 0, cfg)
    i = metrics.insertion_curve(model, image, sal, 0, cfg)
    print(f"{name:8} {metrics.auc(d):7.4f} {metrics.auc(i):7.4f} "
          f"{metrics.step_correlation(d, 'deletion'):7.3f} {metrics.step_correlation(i, 'insertion'):7.3f}")

d = metrics.deletion_curve(model, image, orderings["ideal"], 0, cfg)
print("\nideal deletion curve, every 7th step:")
for x, y in zip(d.xs[::7], d.ys[::7]):
    print(f"  {x:5.2f} removed -> p = {y:.4f}  " + "#" * int(y * 60))
