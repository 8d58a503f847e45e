"""Segment one biased phantom by minimizing the unsupervised energy directly.

Run with ``python3 demos/direct_segmentation.py [OUT_DIR]``; the overlay and
the estimated bias field are written as netpbm images.
"""

# %% imports
import sys
from pathlib import Path

import numpy as np

from msvar.evaluation import overlay
from msvar.fields import write_pgm, write_ppm
from msvar.metrics import matched_dice
from msvar.synth import SynthConfig, generate_pair, index_from_labels
from msvar.variational import SolveConfig, solve

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

# %% a 64x64 phantom with a strong multiplicative bias and mild noise
pair = generate_pair(SynthConfig(size=64, bias_amplitude=0.3, noise_sigma=0.02), seed=7)
truth = index_from_labels(pair.labels)
print("class intensities drawn:", np.round(pair.provenance["intensities"], 3))

# %% three seeded restarts; the lowest final energy wins
res = solve(pair.image, SolveConfig(restarts=3))
print("restart energies:", ", ".join(f"{e:.5f}" for e in res.restart_energies))
print("iterations of the kept run:", res.state.iteration)

# %% the labeling has no class identity, so score it after a one-to-one matching
scores, assign = matched_dice(res.labels, truth, 4, 4)
for name, s, a in zip(("LV", "Myo", "RV", "background"), scores, assign):
    print(f"{name:<11} Dice {s:.3f}  (predicted label {a})")

# %% how much of the inhomogeneity did the bias head explain?
# The reference field is recovered from a noise-free twin (same seed, so the
# same geometry, intensities and bias draw). At the default weights the
# estimate stays close to flat: the segmentation is carried by the class
# intensities, not by bias correction.
clean_twin = generate_pair(SynthConfig(size=64, bias_amplitude=0.3, noise_sigma=0.0), seed=7)
piecewise = np.einsum("n,nij->ij", pair.provenance["intensities"], pair.labels)
true_bias = clean_twin.image / piecewise
print("estimated bias range: %.3f to %.3f" % (res.bias.min(), res.bias.max()))
print("correlation with the true field: %.3f"
      % np.corrcoef(res.bias.ravel(), true_bias.ravel())[0, 1])

write_ppm(out / "direct_overlay.ppm", overlay(pair.image, res.labels) / 255.0)
write_pgm(out / "direct_bias.pgm", res.bias, bits=16)
print("wrote", out / "direct_overlay.ppm", "and", out / "direct_bias.pgm")
