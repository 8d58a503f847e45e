"""Diagnostics for the parametric label-to-image generator.

The intensity constraint measures within-label spread, the position
classifier checks that slice position is recoverable from label maps, and
the histogram distance compares image sets.
"""

# %% imports
import numpy as np

from msvar.energies import intensity_constraint
from msvar.metrics import histogram_distance
from msvar.synth import PositionClassifier, SynthConfig, generate_pair

nominal = SynthConfig(size=32)
wide = nominal.spread_scaled(2)

# %% within-label spread with and without noise and bias
clean = generate_pair(nominal.replace(noise_sigma=0.0, bias_amplitude=0.0), 1)
noisy = generate_pair(nominal, 1)
print("intensity constraint, clean pair:", intensity_constraint(clean.image, clean.labels).value)
print("intensity constraint, default pair: %.2e"
      % intensity_constraint(noisy.image, noisy.labels).value)

# %% nominal vs doubled intensity spread against a held-out phantom set
held = [generate_pair(nominal, 10_000 + i).image for i in range(50)]
tight = [generate_pair(nominal, i).image for i in range(50)]
spread = [generate_pair(wide, i).image for i in range(50)]
print("histogram distance nominal: %.3f" % histogram_distance(tight, held))
print("histogram distance doubled spread: %.3f" % histogram_distance(spread, held))

# %% slice position from label maps
train_pairs = [generate_pair(nominal, 20_000 + i) for i in range(300)]
test_pairs = [generate_pair(nominal, 30_000 + i) for i in range(100)]
clf = PositionClassifier().fit(train_pairs)
print("position accuracy on held-out pairs: %.3f" % clf.accuracy(test_pairs))
print("mean position cross-entropy: %.3f (uniform guess %.3f)"
      % (clf.loss(test_pairs), np.log(5)))
