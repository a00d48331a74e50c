"""Minimal LoRA: frozen base weights plus trainable low-rank A/B adapters.

Adapters wrap named target modules (GPT-2's fused attention projection
`c_attn` by default) and add `(scaling / rank) * x @ A @ B` to the wrapped
module's output. Only A and B train. State dicts round-trip through
`adapter_state` / `load_adapter_state` so a later stage can resume from an
earlier checkpoint.
"""

from __future__ import annotations

import math

import torch
from torch import nn


class LoraAdapter(nn.Module):
    def __init__(self, wrapped: nn.Module, in_features: int, out_features: int,
                 rank: int, scaling: float, dtype: torch.dtype):
        super().__init__()
        self.wrapped = wrapped
        self.rank = rank
        self.scale = scaling / rank
        self.lora_a = nn.Parameter(torch.empty(in_features, rank, dtype=dtype))
        self.lora_b = nn.Parameter(torch.zeros(rank, out_features, dtype=dtype))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))

    def forward(self, x):
        return self.wrapped(x) + self.scale * (x @ self.lora_a @ self.lora_b)


def _linear_shape(module: nn.Module) -> tuple[int, int] | None:
    weight = getattr(module, "weight", None)
    if weight is None or weight.dim() != 2:
        return None
    if isinstance(module, nn.Linear):
        return module.in_features, module.out_features
    # transformers Conv1D stores weight as (in_features, out_features).
    return weight.shape[0], weight.shape[1]


def apply_lora(model: nn.Module, rank: int, scaling: float, target_modules) -> list[str]:
    """Freeze the base model and wrap every target module; returns wrapped names."""
    for param in model.parameters():
        param.requires_grad_(False)
    dtype = next(model.parameters()).dtype
    wrapped_names = []
    targets = tuple(target_modules)
    for name, module in list(model.named_modules()):
        if not name or not name.split(".")[-1] in targets:
            continue
        shape = _linear_shape(module)
        if shape is None:
            continue
        parent = model.get_submodule(name.rsplit(".", 1)[0]) if "." in name else model
        child_name = name.split(".")[-1]
        adapter = LoraAdapter(module, shape[0], shape[1], rank, scaling, dtype)
        setattr(parent, child_name, adapter)
        wrapped_names.append(name)
    if not wrapped_names:
        raise ValueError(f"no modules matched LoRA targets {targets}")
    return wrapped_names


def trainable_parameters(model: nn.Module):
    return [p for p in model.parameters() if p.requires_grad]


def adapter_state(model: nn.Module) -> dict[str, torch.Tensor]:
    return {
        name: tensor.detach().clone()
        for name, tensor in model.state_dict().items()
        if "lora_a" in name or "lora_b" in name
    }


def load_adapter_state(model: nn.Module, state: dict[str, torch.Tensor]) -> None:
    missing, unexpected = model.load_state_dict(state, strict=False)
    unexpected = [k for k in unexpected]
    if unexpected:
        raise ValueError(f"checkpoint has unknown adapter tensors: {unexpected[:3]}")
    loaded = {k for k in state}
    expected = {k for k in adapter_state(model)}
    if loaded != expected:
        raise ValueError("checkpoint adapter tensors do not match the model's adapters")
