"""Desk-scale workbench for protective perturbations and contrastive adversarial training."""

__version__ = "0.1.0"
