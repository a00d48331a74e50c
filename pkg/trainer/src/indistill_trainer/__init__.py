"""Thin LoRA SFT + ORPO bridge over emitted distillation corpora."""

__version__ = "0.1.0"
