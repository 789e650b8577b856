"""Constrained, min-max and reweighted-distillation training on plain numpy."""

__version__ = "0.1.0"
