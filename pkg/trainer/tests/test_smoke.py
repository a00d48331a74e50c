import json
from pathlib import Path

import pytest
import torch

from indistill_trainer.cli import main
from indistill_trainer.lora import adapter_state, apply_lora, load_adapter_state
from indistill_trainer.models import build_tiny_model
from indistill_trainer.schema import CHAT_TEMPLATE
from indistill_trainer.train import TrainJobSpec, run_orpo, run_sft, target_logprob

DATA = Path(__file__).parent / "data"


def smoke_spec(tmp_path, max_steps=20):
    return TrainJobSpec(
        sft_corpus=DATA / "sft_10.jsonl",
        pref_corpus=DATA / "pref_10.jsonl",
        output_dir=tmp_path / "ckpt",
        max_steps=max_steps,
        seed=0,
    )


class TestLora:
    def test_wraps_attention_and_freezes_base(self):
        model, _ = build_tiny_model(seed=0)
        wrapped = apply_lora(model, rank=8, scaling=16, target_modules=("c_attn",))
        assert wrapped == ["transformer.h.0.attn.c_attn", "transformer.h.1.attn.c_attn"]
        trainable = [n for n, p in model.named_parameters() if p.requires_grad]
        assert trainable and all("lora_" in n for n in trainable)

    def test_zero_b_means_identity_at_init(self):
        torch.manual_seed(0)
        ids = torch.randint(0, 250, (1, 12))
        base, _ = build_tiny_model(seed=3)
        with torch.no_grad():
            before = base(input_ids=ids).logits.clone()
        apply_lora(base, rank=8, scaling=16, target_modules=("c_attn",))
        with torch.no_grad():
            after = base(input_ids=ids).logits
        assert torch.equal(before, after)

    def test_adapter_state_round_trip(self):
        model, _ = build_tiny_model(seed=1)
        apply_lora(model, rank=4, scaling=8, target_modules=("c_attn",))
        state = adapter_state(model)
        with torch.no_grad():
            for p in model.parameters():
                if p.requires_grad:
                    p.add_(1.0)
        load_adapter_state(model, state)
        assert all(torch.equal(adapter_state(model)[k], v) for k, v in state.items())

    def test_missing_targets_rejected(self):
        model, _ = build_tiny_model(seed=1)
        with pytest.raises(ValueError):
            apply_lora(model, 8, 16, ("no_such_module",))


class TestTargetLogprob:
    def test_normalized_and_negative(self):
        model, tokenizer = build_tiny_model(seed=2)
        lp = target_logprob(model, tokenizer, "a prompt\n", "[1, 2]", max_length=256)
        assert lp.item() < 0

    def test_prompt_conditioning_matters(self):
        model, tokenizer = build_tiny_model(seed=2)
        a = target_logprob(model, tokenizer, "prompt one\n", "[1]", 256)
        b = target_logprob(model, tokenizer, "another prompt entirely\n", "[1]", 256)
        assert a.item() != b.item()


class TestSmoke:
    def test_sft_then_orpo_improves_loss(self, tmp_path):
        spec = smoke_spec(tmp_path, max_steps=20)
        sft_checkpoint, sft_log = run_sft(spec)
        assert len(sft_log) == 20
        sft_manifest = json.loads((tmp_path / "ckpt" / "sft" / "manifest.json").read_text())
        assert sft_manifest["final_loss"] < sft_manifest["initial_loss"]

        orpo_checkpoint, orpo_log = run_orpo(spec, sft_checkpoint)
        assert len(orpo_log) == 20
        orpo_manifest = json.loads((tmp_path / "ckpt" / "orpo" / "manifest.json").read_text())
        assert orpo_manifest["final_loss"] < orpo_manifest["initial_loss"]
        assert orpo_checkpoint.exists()

    def test_manifest_echoes_published_hyperparameters(self, tmp_path):
        spec = smoke_spec(tmp_path, max_steps=2)
        run_sft(spec)
        manifest = json.loads((tmp_path / "ckpt" / "sft" / "manifest.json").read_text())
        assert manifest["hyperparameters"] == {
            "lora_rank": 8,
            "lora_scaling": 16,
            "sft_epochs": 4,
            "sft_learning_rate": 1e-4,
            "alignment_epochs": 5,
            "alignment_learning_rate": 5e-6,
            "per_device_batch_size": 1,
            "gradient_accumulation_steps": 8,
        }
        assert manifest["chat_template"] == CHAT_TEMPLATE
        assert manifest["records"] == 10

    def test_checkpoint_reloads_into_fresh_model(self, tmp_path):
        spec = smoke_spec(tmp_path, max_steps=3)
        checkpoint, _ = run_sft(spec)
        stored = torch.load(checkpoint, weights_only=True)
        assert stored["lora_rank"] == 8 and stored["lora_scaling"] == 16
        model, _ = build_tiny_model(seed=spec.seed)
        apply_lora(model, stored["lora_rank"], stored["lora_scaling"], stored["target_modules"])
        load_adapter_state(model, stored["adapter"])
        reloaded = adapter_state(model)
        assert all(torch.equal(reloaded[k], v) for k, v in stored["adapter"].items())

    def test_epoch_schedule_without_max_steps(self, tmp_path):
        spec = smoke_spec(tmp_path, max_steps=None)
        checkpoint, log = run_sft(spec)
        # 10 records, accumulation 8 -> 2 steps per epoch, 4 epochs.
        assert len(log) == 8

    def test_deterministic_across_runs(self, tmp_path):
        a_log = run_sft(smoke_spec(tmp_path / "a", max_steps=5))[1]
        b_log = run_sft(smoke_spec(tmp_path / "b", max_steps=5))[1]
        assert a_log == b_log


class TestCli:
    def test_validate_ok(self, capsys):
        assert main(["validate", "--corpus", str(DATA / "sft_10.jsonl")]) == 0
        assert "10 records OK" in capsys.readouterr().out

    def test_validate_schema_error_exit_code(self, tmp_path, capsys):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        assert main(["validate", "--corpus", str(empty)]) == 2

    def test_sft_and_orpo_commands(self, tmp_path, capsys):
        args = [
            "--sft-corpus", str(DATA / "sft_10.jsonl"),
            "--pref-corpus", str(DATA / "pref_10.jsonl"),
            "--out", str(tmp_path / "run"),
            "--max-steps", "2",
        ]
        assert main(["sft", *args]) == 0
        checkpoint = tmp_path / "run" / "sft" / "adapter.pt"
        assert checkpoint.exists()
        assert main(["orpo", *args, "--checkpoint", str(checkpoint)]) == 0
        assert (tmp_path / "run" / "orpo" / "adapter.pt").exists()

    def test_missing_corpus_exit_code(self, tmp_path):
        assert main(["validate", "--corpus", str(tmp_path / "nope.jsonl")]) == 3
