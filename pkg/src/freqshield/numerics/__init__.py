"""Minimal tensor engine: reverse-mode autodiff, layers, optimizers."""

from .tensor import Tensor, apply, as_tensor, dot, get_dtype, mean, precision, relu, sigmoid, square, tsum
from .layers import (LAYER_KINDS, Conv2d, ConvTranspose2d, Dense, Flatten, Layer, LayerSpec, MaxPool2d, ReLU,
                     Sequential, ShapeError, Sigmoid, Unflatten, Upsample2x, forward, layer_from_spec)
from .optim import SGD, Adam, NonFiniteGradient, Optimizer, OptimizerState, optimizer_step
from .gradcheck import gradcheck

__all__ = [
    "Tensor", "apply", "as_tensor", "dot", "get_dtype", "mean", "precision", "relu", "sigmoid", "square", "tsum",
    "LAYER_KINDS", "Conv2d", "ConvTranspose2d", "Dense", "Flatten", "Layer", "LayerSpec", "MaxPool2d", "ReLU",
    "Sequential", "ShapeError", "Sigmoid", "Unflatten", "Upsample2x", "forward", "layer_from_spec",
    "SGD", "Adam", "NonFiniteGradient", "Optimizer", "OptimizerState", "optimizer_step", "gradcheck",
]
