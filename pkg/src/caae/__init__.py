"""Conditional adversarial autoencoder for label-controlled premise
generation, with its own reverse-mode autodiff engine."""

from . import data, evaluation, fusion, gradcheck, model, seqnet, tensor, training

__version__ = "0.1.0"

__all__ = ["data", "evaluation", "fusion", "gradcheck", "model", "seqnet",
           "tensor", "training", "__version__"]
