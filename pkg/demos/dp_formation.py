# How a dual-pixel sensor sees defocus.
#
# Run:  python demos/dp_formation.py [out_dir]
#
# A point light behind the focal plane lands on the sensor as a disc. Each
# DP photodiode sees one half of it, so the left and right views are the
# two half discs. In front of the focal plane the halves swap sides.

import sys
from pathlib import Path

import numpy as np

from dualpix.optics import (LensParams, coc_radius_px, dp_signed_difference, horizontal_moment,
                            make_dp_psf_pair, synthesize_dp_views)
from dualpix.scenes import make_scene_record, write_png

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/formation")
out.mkdir(parents=True, exist_ok=True)

# a 50 mm f/4 lens focused at 1 m; blur radius for a few depths
lens = LensParams(focal_length_mm=50.0, f_number=4.0, focus_distance_mm=1000.0, pixel_pitch_mm=0.03)
for depth in (600, 900, 1000, 1500, 4000):
    print(f"depth {depth:5d} mm -> CoC radius {coc_radius_px(lens, depth):+6.2f} px")

# the two half-disc kernels at radius 4, printed coarsely
pair = make_dp_psf_pair(4.0, leakage=0.0)
print("\nleft half of a radius-4 disc (x100):")
print(np.round(pair.left * 100).astype(int))
print("sums:", pair.left.sum(), pair.right.sum())

# point source behind and in front of focus
point = np.zeros((41, 41, 3))
point[20, 20] = 1.0
for sign, name in ((+1, "back"), (-1, "front")):
    left, right, combined = synthesize_dp_views(point, np.full((41, 41), 6.0 * sign), leakage=0.15)
    diff = dp_signed_difference(left, right)
    print(f"{name:5s} focus: left-minus-right centroid {horizontal_moment(diff, 20):+.2f} px")
    write_png(out / f"point_{name}_l.png", left / left.max())
    write_png(out / f"point_{name}_r.png", right / right.max())

# a full synthetic record: sharp, combined and the two views
rec = make_scene_record(3, size=128)
for key in ("sharp", "combined", "left", "right"):
    img = getattr(rec, key)
    write_png(out / f"scene_{key}.png", img * (2 if key in ("left", "right") else 1))
print(f"\nscene: f/{rec.lens.f_number:g}, focus {rec.lens.focus_distance_mm:.0f} mm, "
      f"|radius| up to {np.abs(rec.defocus).max():.1f} px; images in {out}")
