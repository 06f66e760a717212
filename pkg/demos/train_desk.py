# The two training steps on a small synthetic dataset, through the CLI.
#
# Run:  python demos/train_desk.py [work_dir] [--full]
#
# Without --full this uses a 40-scene dataset and a few epochs, under a
# minute on one core. With --full it is the desk protocol (232 scenes,
# 12 + 16 epochs), about ten minutes.

import sys
from pathlib import Path

from dualpix.cli import main

args = [a for a in sys.argv[1:] if not a.startswith("--")]
full = "--full" in sys.argv
work = Path(args[0] if args else "demo_out/desk")
data, runs = work / "data", work / "runs"

scenes = [] if full else ["--scenes", "40", "--test", "8"]
short = [] if full else ["--epochs", "3", "--patches-per-epoch", "64"]

# 1. render the dataset (sharp image, both DP views, combined input, defocus map)
main(["gen-data", "--out", str(data), "--force"] + scenes)

# 2. step 1: learn the DP views; the deblurring decoder stays frozen
main(["train", "--data", str(data), "--out", str(runs), "--step", "1"] + short)

# 3. step 2: everything trainable, deblurring loss plus weighted DP terms
main(["train", "--data", str(data), "--out", str(runs), "--step", "2",
      "--init", str(runs / "step1_last.mdp")] + short)

# 4. compare with doing nothing at all
print("\nidentity baseline (the blurry input itself):")
main(["eval", "--identity", "--data", str(data)])
print("\ntrained network:")
main(["eval", "--checkpoint", str(runs / "step2_last.mdp"), "--data", str(data),
      "--csv", str(work / "eval.csv")])
print(f"\nper-epoch history in {runs}/history_step1.csv and history_step2.csv")
