"""Two quadrants, two classes: where does each FM-G-CAM channel put its mass?

The pixel_sum testbed scores class q by the mean of quadrant q, so the right
answer is known. Run: python demos/quadrant_testbed.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from fmgcam import cam, render, testbed

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

model = testbed.make_model("pixel_sum")
image = testbed.make_quadrant_image(32, 32, (0.9, 0.0, 0.0, 0.7), seed=0)
ex = cam.explain(model, image, K=2)
print("top classes:", ex.ranked.class_ids, "probabilities:", np.round(ex.ranked.probabilities, 3))

masks = testbed.quadrant_masks(32, 32)
for k, q in enumerate(ex.ranked.class_ids):
    ch = ex.fused.channel(k)
    print(f"rank {k + 1} (quadrant {q}): {ch[masks[q]].sum() / ch.sum():.1%} of the channel mass in place")

# render at 8x so the quadrants are visible
big = render.upsample_fused(ex.fused, (256, 256))
heat = render.colorize_fused(big, render.default_palette(2))
rgb = render._to_uint8(render.upsample(image.pixels.mean(-1), (256, 256))[..., None].repeat(3, -1) * 255)
render.save_png(out / "quadrants_fmgcam.png", render.overlay(rgb, heat, 0.6).pixels)
print("wrote", out / "quadrants_fmgcam.png")
