"""Multi-class Mumford-Shah segmentation with a bias field, mask mapping and
semi-supervised training on synthetic phantoms."""

from .energies import LossWeights, segmentation_loss, unsupervised_loss
from .maskmap import BINARY, CARDIAC, MaskMapSpec, apply_mapping, mapping_backward
from .segmenter import SegModel, TrainConfig, predict, train
from .synth import SynthConfig, dataset, generate_confusable_phantom, generate_pair
from .variational import SolveConfig, solve

__version__ = "0.1.0"

__all__ = [
    "LossWeights",
    "segmentation_loss",
    "unsupervised_loss",
    "BINARY",
    "CARDIAC",
    "MaskMapSpec",
    "apply_mapping",
    "mapping_backward",
    "SegModel",
    "TrainConfig",
    "predict",
    "train",
    "SynthConfig",
    "dataset",
    "generate_confusable_phantom",
    "generate_pair",
    "SolveConfig",
    "solve",
]
