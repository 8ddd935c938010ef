"""Linear backpropagation for transferable adversarial examples."""

from .attacks import AdvResult, AttackSpec, ensemble_grad, fgsm, ifgsm, ila, input_diversity
from .data import Dataset, load_cifar10_bin, make_synthetic
from .engine import LINEAR, MASKED, BackpropPlan, ReluMode, backward, compute_alpha, relu_backward
from .lab import TrainSpec, build_model, lins_remove_relus, load, save, train
from .nn import LayerSpec, Network, accuracy, forward, loss_ce, predict, split

__version__ = "0.1.0"

__all__ = [
    "AdvResult", "AttackSpec", "BackpropPlan", "Dataset", "LINEAR", "LayerSpec", "MASKED",
    "Network", "ReluMode", "TrainSpec", "accuracy", "backward", "build_model", "compute_alpha",
    "ensemble_grad", "fgsm", "forward", "ifgsm", "ila", "input_diversity", "lins_remove_relus",
    "load", "load_cifar10_bin", "loss_ce", "make_synthetic", "predict", "relu_backward", "save",
    "split", "train",
]
