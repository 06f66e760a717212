# Eight aperture directions from one photo by rotating the input.
#
# Run:  python demos/eight_views.py [checkpoint.mdp] [out_dir]
#
# The network only predicts a left/right split. Rotating the input by 45,
# 90 and 135 degrees and rotating the predicted views back gives eight
# directions around the aperture; played in order they wobble like a tiny
# light field. Without a checkpoint an untrained network is used: the
# plumbing runs, but its views are noise rather than motion.

import sys
from pathlib import Path

import numpy as np

from dualpix.model import MdpConfig, build, load_checkpoint
from dualpix.nimat import synthesize_eight_views, write_animation_frames
from dualpix.scenes import make_scene_record

ckpt = sys.argv[1] if len(sys.argv) > 1 else None
out = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_out/nimat")
model = load_checkpoint(ckpt)[0] if ckpt else build(MdpConfig(seed=0))

image = make_scene_record(11, size=128).combined
views = synthesize_eight_views(model, image, source_id="scene 11")
paths = write_animation_frames(views, out)

for angle, view in views.frames:
    shift = np.mean(np.abs(view - views.view(0)))
    print(f"{angle:3d} deg  mean |view - view(0)| = {shift * 255:5.2f}/255")
print(f"{len(paths)} frames and order.txt in {out}")
