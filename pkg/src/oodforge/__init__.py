"""Confidence-calibrated classifiers trained jointly with a boundary-seeking GAN.

Modules:

* :mod:`oodforge.autograd` - reverse-mode differentiation tape
* :mod:`oodforge.nets` - MLP classifier / generator / discriminator, checkpoints
* :mod:`oodforge.losses` - cross entropy, KL-to-uniform, GAN and K+1 objectives
* :mod:`oodforge.data` - Gaussian mixtures, rejection-sampled OOD, dataset files
* :mod:`oodforge.training` - Adam, classifier training, alternating joint training
* :mod:`oodforge.detect` - max-softmax, ODIN, K+1 and density-proxy scores
* :mod:`oodforge.metrics` - TNR@TPR95, AUROC, AUPR, detection accuracy, ECE
* :mod:`oodforge.cli` - ``oodforge`` command line
"""

from .autograd import Tape, finite_difference
from .data import Dataset, MixtureSpec, BoxSpec
from .nets import LatentPrior, MlpSpec, ParamSet, init_params
from .training import TrainConfig, train_classifier, train_gan, train_joint

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "finite_difference",
    "Dataset",
    "MixtureSpec",
    "BoxSpec",
    "LatentPrior",
    "MlpSpec",
    "ParamSet",
    "init_params",
    "TrainConfig",
    "train_classifier",
    "train_gan",
    "train_joint",
]
