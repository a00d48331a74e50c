"""LoRA SFT and ORPO training stages over emitted corpora.

Each stage freezes the base model, trains only the low-rank adapters with
Adam at the published hyperparameters (rank 8, scaling 16, SFT 4 epochs at
1e-4, alignment 5 epochs at 5e-6, batch 1 with 8 accumulation steps), logs
the loss per optimizer step, and writes an adapter checkpoint plus a job
manifest that echoes those hyperparameters and the chat template verbatim.
`max_steps` replaces the epoch schedule with an exact optimizer-step count
for smoke runs without touching the published defaults.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .lora import adapter_state, apply_lora, load_adapter_state, trainable_parameters
from .models import TINY_MODEL_ID, build_model
from .schema import CHAT_TEMPLATE, PrefRecord, SftRecord, load_pref_corpus, load_sft_corpus


@dataclass
class TrainJobSpec:
    sft_corpus: Path
    pref_corpus: Path
    output_dir: Path
    base_model: str = TINY_MODEL_ID
    lora_rank: int = 8
    lora_scaling: int = 16
    target_modules: tuple[str, ...] = ("c_attn",)
    sft_epochs: int = 4
    sft_learning_rate: float = 1e-4
    align_epochs: int = 5
    align_learning_rate: float = 5e-6
    batch_size: int = 1
    grad_accum: int = 8
    orpo_weight: float = 1.0
    max_steps: int | None = None
    max_length: int = 2048
    seed: int = 0

    def hyperparameters(self) -> dict:
        return {
            "lora_rank": self.lora_rank,
            "lora_scaling": self.lora_scaling,
            "sft_epochs": self.sft_epochs,
            "sft_learning_rate": self.sft_learning_rate,
            "alignment_epochs": self.align_epochs,
            "alignment_learning_rate": self.align_learning_rate,
            "per_device_batch_size": self.batch_size,
            "gradient_accumulation_steps": self.grad_accum,
        }


def _encode(tokenizer, text: str) -> list[int]:
    try:
        return tokenizer.encode(text, add_special_tokens=False)
    except TypeError:
        return tokenizer.encode(text)


def _sequence_ids(tokenizer, prompt: str, target: str, max_length: int):
    prompt_ids = list(_encode(tokenizer, prompt))
    bos = getattr(tokenizer, "bos_token_id", None)
    if bos is not None:
        prompt_ids = [bos] + prompt_ids
    target_ids = list(_encode(tokenizer, target))
    eos = getattr(tokenizer, "eos_token_id", None)
    if eos is not None:
        target_ids = target_ids + [eos]
    full = (prompt_ids + target_ids)[:max_length]
    n_target = len(full) - len(prompt_ids)
    return full, len(prompt_ids), n_target


def target_logprob(model, tokenizer, prompt: str, target: str, max_length: int) -> torch.Tensor:
    """Length-normalized log-likelihood of the target tokens given the prompt."""
    full, n_prompt, n_target = _sequence_ids(tokenizer, prompt, target, max_length)
    if n_target <= 0:
        raise ValueError("record truncated to an empty target; raise max_length")
    device = next(model.parameters()).device
    ids = torch.tensor([full], dtype=torch.long, device=device)
    logits = model(input_ids=ids[:, :-1]).logits[0]
    logprobs = F.log_softmax(logits, dim=-1)
    positions = torch.arange(n_prompt - 1, len(full) - 1, device=device)
    labels = ids[0, n_prompt:]
    return logprobs[positions, labels].mean()


def _log1mexp(x: torch.Tensor) -> torch.Tensor:
    # log(1 - exp(x)) for a scalar x < 0; branch chosen outside autograd.
    if x.item() > -math.log(2.0):
        return torch.log(-torch.expm1(x))
    return torch.log1p(-torch.exp(x))


def _log_odds(logp: torch.Tensor) -> torch.Tensor:
    return logp - _log1mexp(logp)


def sft_record_loss(model, tokenizer, record: SftRecord, max_length: int) -> torch.Tensor:
    return -target_logprob(model, tokenizer, record.prompt, record.target, max_length)


def orpo_record_loss(
    model, tokenizer, record: PrefRecord, max_length: int, orpo_weight: float
) -> torch.Tensor:
    lp_chosen = target_logprob(model, tokenizer, record.prompt, record.chosen, max_length)
    lp_rejected = target_logprob(model, tokenizer, record.prompt, record.rejected, max_length)
    ratio = _log_odds(lp_chosen) - _log_odds(lp_rejected)
    return -lp_chosen + orpo_weight * F.softplus(-ratio)


def _steps_for(spec: TrainJobSpec, n_records: int, epochs: int) -> int:
    if spec.max_steps is not None:
        return spec.max_steps
    return max(1, math.ceil(n_records / spec.grad_accum)) * epochs


def _mean_corpus_loss(model, tokenizer, records, loss_fn) -> float:
    with torch.no_grad():
        total = sum(float(loss_fn(model, tokenizer, record)) for record in records)
    return total / len(records)


def _train_stage(model, tokenizer, records, loss_fn, steps: int, lr: float, grad_accum: int):
    optimizer = torch.optim.Adam(trainable_parameters(model), lr=lr)
    log = []
    cursor = 0
    for step in range(steps):
        optimizer.zero_grad()
        batch_loss = 0.0
        for _ in range(grad_accum):
            record = records[cursor % len(records)]
            cursor += 1
            loss = loss_fn(model, tokenizer, record) / grad_accum
            loss.backward()
            batch_loss += float(loss.detach())
        optimizer.step()
        log.append({"step": step, "loss": batch_loss})
    return log


def _write_stage_outputs(spec, stage, out_dir, model, log, initial_loss, final_loss,
                         corpus_path, n_records, steps):
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / "adapter.pt"
    torch.save(
        {
            "adapter": adapter_state(model),
            "lora_rank": spec.lora_rank,
            "lora_scaling": spec.lora_scaling,
            "target_modules": list(spec.target_modules),
            "base_model": spec.base_model,
        },
        checkpoint_path,
    )
    with open(out_dir / "loss_log.json", "w", encoding="utf-8") as fh:
        json.dump(log, fh, indent=2)
        fh.write("\n")
    manifest = {
        "stage": stage,
        "base_model": spec.base_model,
        "corpus": str(corpus_path),
        "records": n_records,
        "hyperparameters": spec.hyperparameters(),
        "orpo_weight": spec.orpo_weight,
        "chat_template": CHAT_TEMPLATE,
        "steps_run": steps,
        "max_steps": spec.max_steps,
        "seed": spec.seed,
        "initial_loss": initial_loss,
        "final_loss": final_loss,
        "checkpoint": str(checkpoint_path),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return checkpoint_path


def _prepare_model(spec: TrainJobSpec, checkpoint: str | Path | None = None):
    torch.manual_seed(spec.seed)
    model, tokenizer = build_model(spec.base_model, seed=spec.seed)
    apply_lora(model, spec.lora_rank, spec.lora_scaling, spec.target_modules)
    if checkpoint is not None:
        stored = torch.load(checkpoint, weights_only=True)
        load_adapter_state(model, stored["adapter"])
    return model, tokenizer


def run_sft(spec: TrainJobSpec):
    """Supervised fine-tuning over the merged rule-generation + rule-following
    corpus; returns (checkpoint path, per-step loss log)."""
    records = load_sft_corpus(spec.sft_corpus)
    model, tokenizer = _prepare_model(spec)
    loss_fn = lambda m, t, r: sft_record_loss(m, t, r, spec.max_length)
    initial = _mean_corpus_loss(model, tokenizer, records, loss_fn)
    steps = _steps_for(spec, len(records), spec.sft_epochs)
    log = _train_stage(model, tokenizer, records, loss_fn, steps, spec.sft_learning_rate, spec.grad_accum)
    final = _mean_corpus_loss(model, tokenizer, records, loss_fn)
    checkpoint = _write_stage_outputs(
        spec, "sft", Path(spec.output_dir) / "sft", model, log,
        initial, final, spec.sft_corpus, len(records), steps,
    )
    return checkpoint, log


def run_orpo(spec: TrainJobSpec, sft_checkpoint: str | Path):
    """Preference alignment on rule generation, resuming from the SFT adapter."""
    records = load_pref_corpus(spec.pref_corpus)
    model, tokenizer = _prepare_model(spec, checkpoint=sft_checkpoint)
    loss_fn = lambda m, t, r: orpo_record_loss(m, t, r, spec.max_length, spec.orpo_weight)
    initial = _mean_corpus_loss(model, tokenizer, records, loss_fn)
    steps = _steps_for(spec, len(records), spec.align_epochs)
    log = _train_stage(model, tokenizer, records, loss_fn, steps, spec.align_learning_rate, spec.grad_accum)
    final = _mean_corpus_loss(model, tokenizer, records, loss_fn)
    checkpoint = _write_stage_outputs(
        spec, "orpo", Path(spec.output_dir) / "orpo", model, log,
        initial, final, spec.pref_corpus, len(records), steps,
    )
    return checkpoint, log
