"""Federated-learning simulator for studying obfuscation defenses against gradient inversion."""
from .aggregation import AggregationSpec, aggregate
from .attack import AttackConfig, AttackResult, capture_gradient, infer_label, run_attack
from .bundle import MASK_EXEMPT, MASKABLE, ParameterBundle
from .data import Dataset, load_cifar10, load_mnist, load_named, synth_dataset
from .metrics import LeakageReport, SsimConfig, assess_leakage, brightness_sweep, ssim
from .nn import (ModelConfig, OptimizerSpec, build_model, default_cnn, dense_model, evaluate,
                 input_gradient_of_matching_loss, loss_and_gradients, train_epochs)
from .obfuscation import ObfuscationSpec, clip, mask, noise, obfuscate, prune
from .protocol import PartitionSpec, RoundConfig, partition, run_round, run_training

__version__ = "0.1.0"

__all__ = [
    "AggregationSpec",
    "AttackConfig",
    "AttackResult",
    "Dataset",
    "LeakageReport",
    "MASKABLE",
    "MASK_EXEMPT",
    "ModelConfig",
    "ObfuscationSpec",
    "OptimizerSpec",
    "ParameterBundle",
    "PartitionSpec",
    "RoundConfig",
    "SsimConfig",
    "aggregate",
    "assess_leakage",
    "brightness_sweep",
    "build_model",
    "capture_gradient",
    "clip",
    "default_cnn",
    "dense_model",
    "evaluate",
    "infer_label",
    "input_gradient_of_matching_loss",
    "load_cifar10",
    "load_mnist",
    "load_named",
    "loss_and_gradients",
    "mask",
    "noise",
    "obfuscate",
    "partition",
    "prune",
    "run_attack",
    "run_round",
    "run_training",
    "ssim",
    "synth_dataset",
    "train_epochs",
]
