"""Reasoning-distillation pipeline toolkit."""

__version__ = "0.1.0"
