"""
Warping an image with a displacement field
==========================================

A field stores, for every pixel p, the offset phi(p) at which the output
samples its input: out(p) = image(p + phi(p)). Offsets are in pixels and
samples that fall outside the grid read zeros.
"""

from pathlib import Path

import numpy as np

from deform_attrib.viz import QuiverStyle, render_difference, render_quiver, side_by_side
from deform_attrib.warp import apply_deformation, difference_map

out = Path(__file__).with_name("output")
out.mkdir(exist_ok=True)

# a bright disc on a dim background
rows, cols = np.mgrid[0:64, 0:64]
r = np.hypot(rows - 32, cols - 32)
image = np.where(r < 12, 0.9, 0.3)

# a field pointing at the centre makes the disc grow: each pixel near the
# rim looks inward, where the disc is
field = np.stack([32 - rows, 32 - cols]).astype(float)
field *= 2.0 * np.exp(-((r - 12) / 5) ** 2) / np.maximum(r, 1)

grown = apply_deformation(image, field)
diff = difference_map(image, grown)
print("pixels brightened:", int((diff > 0.05).sum()), "darkened:", int((diff < -0.05).sum()))

# arrows drawn twice as long as the offsets they represent
svg = render_quiver(image, field, QuiverStyle(scale=2.0, stride=3))
(out / "disc_quiver.svg").write_text(svg)

# pink where the image got brighter, green where it got darker
render_difference(diff, out / "disc_difference.png")
side_by_side(image, grown, diff, out / "disc_panel.png")

# the identity field changes nothing, bit for bit
assert apply_deformation(image, np.zeros_like(field)).tobytes() == image.tobytes()
