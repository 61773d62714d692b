"""Minimal numpy neural-network substrate with reverse-mode autodiff."""
from catw.nn.checkpoint import CheckpointError, load_adapters, load_checkpoint, save_checkpoint
from catw.nn.functional import adapted_matmul, attention, conv2d, linear, mse, upsample2x
from catw.nn.graph import Adam, AdapterError, Layer, LowRankAdapter, ModelGraph, Param, backward
from catw.nn.tensor import ShapeError, Tensor, as_tensor, sigmoid, silu, softmax, square

__all__ = [
    "Adam",
    "AdapterError",
    "CheckpointError",
    "Layer",
    "LowRankAdapter",
    "ModelGraph",
    "Param",
    "ShapeError",
    "Tensor",
    "adapted_matmul",
    "as_tensor",
    "attention",
    "backward",
    "conv2d",
    "linear",
    "load_adapters",
    "load_checkpoint",
    "mse",
    "save_checkpoint",
    "sigmoid",
    "silu",
    "softmax",
    "square",
    "upsample2x",
]
