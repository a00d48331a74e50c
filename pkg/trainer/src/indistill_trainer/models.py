"""Model and tokenizer construction.

`tiny-gpt2` builds a small GPT-2-architecture model from a config with a
byte-level tokenizer, entirely offline, for smoke tests; any other id is
passed to the transformers auto classes and uses that model's own tokenizer.
The tiny path runs in float64 so that small loss improvements at the
published learning rates stay numerically resolvable.
"""

from __future__ import annotations

import torch
from transformers import GPT2Config, GPT2LMHeadModel

TINY_MODEL_ID = "tiny-gpt2"

BOS_ID = 256
EOS_ID = 257
TINY_VOCAB = 258


class ByteTokenizer:
    """UTF-8 bytes as token ids, plus BOS/EOS markers."""

    bos_token_id = BOS_ID
    eos_token_id = EOS_ID
    vocab_size = TINY_VOCAB

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids) -> str:
        return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")


def build_tiny_model(seed: int = 0):
    torch.manual_seed(seed)
    config = GPT2Config(
        vocab_size=TINY_VOCAB,
        n_positions=2048,
        n_embd=32,
        n_layer=2,
        n_head=2,
        bos_token_id=BOS_ID,
        eos_token_id=EOS_ID,
    )
    model = GPT2LMHeadModel(config).double()
    model.eval()
    return model, ByteTokenizer()


def build_model(base_model: str, seed: int = 0):
    if base_model == TINY_MODEL_ID:
        return build_tiny_model(seed)
    from transformers import AutoModelForCausalLM, AutoTokenizer

    tokenizer = AutoTokenizer.from_pretrained(base_model, use_fast=True)
    model = AutoModelForCausalLM.from_pretrained(base_model)
    model.eval()
    return model, tokenizer
