"""Train the segmenter on synthetic pairs plus unlabeled confusable images.

A shortened schedule (about a minute on one core); the acceptance suite uses
2000 steps over five seeds.
"""

# %% imports
import numpy as np

from msvar.energies import LossWeights
from msvar.evaluation import evaluate
from msvar.segmenter import SegModel, TrainConfig, train
from msvar.synth import SynthConfig, dataset

# %% 10 labeled synthetic pairs, 15 unlabeled and 10 test target images
bundle = dataset(SynthConfig(size=32, confusable=True), 10, 15, 10, seed=0)
cfg = TrainConfig(learning_rate=3e-3, pretrain_iters=300, total_iters=800,
                  weights=LossWeights(gamma=1e-3), seed=0)

# %% supervised warm-up, then mixed batches under the full objective
model, log = train(SegModel(3, seed=0), bundle.labeled, bundle.unlabeled, cfg)
for rec in log[::100] + [log[-1]]:
    print(f"step {rec['step']:>4} {rec['phase']:<8} total {rec['total']:.4f}  "
          f"sup {rec['sup']:.4f}  un {rec['un']:.2e}  ai {rec['ai']:.2e}")

# %% held-out scores
report = evaluate(model, bundle)
print(report.to_text())
print("confusable classes (LV, RV):", np.round(report.dice[[0, 2]], 3))
