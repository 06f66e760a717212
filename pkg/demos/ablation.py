# Do the DP losses and the extra decoders help deblurring?
#
# Run:  python demos/ablation.py [data_dir] [seeds]
#
# Trains three variants with the same budget (full recipe, no DP loss
# terms, deblurring only) for each seed, then the three stitching options,
# and prints test PSNRs. At the default budget each run takes ~4 minutes.
# Expects a dataset from `dualpix gen-data` (see demos/train_desk.py).

import logging
import sys

from dualpix.ablation import Budget, run_loss_ablation, run_stitch_ablation
from dualpix.scenes import load_split

logging.basicConfig(level=logging.INFO, format="%(message)s")
data = sys.argv[1] if len(sys.argv) > 1 else "demo_out/desk/data"
seeds = [int(s) for s in sys.argv[2].split(",")] if len(sys.argv) > 2 else [0]

train, test = load_split(data, "train"), load_split(data, "test")
budget = Budget(patches_per_epoch=96)

losses = run_loss_ablation(train, test, seeds=seeds, budget=budget)
print(losses.table())
for variant, margin in losses.margins().items():
    print(f"full recipe minus {variant}: {margin:+.3f} dB (median over seeds)")

stitch = run_stitch_ablation(train, test, seed=seeds[0], budget=budget, known=losses.runs)
for mode, run in stitch.items():
    print(f"stitch {mode:6s} {run.params:7d} params  {run.psnr:.3f} dB")
