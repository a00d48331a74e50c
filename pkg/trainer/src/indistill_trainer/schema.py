"""Corpus-file schema validation and record loading.

The trainer consumes the pipeline's emitted JSONL corpora and nothing else.
Two record layouts are accepted: chat (role-tagged messages) and plain
(prompt/target strings). Preference records carry a prompt plus chosen and
rejected targets. Validation failures name the first offending line; an
empty corpus is a schema error, not a training run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

SFT_KINDS = ("sft-rg", "sft-rf", "io-fewshot")
PREF_KIND = "pref"

# How chat messages are packed into one model input. Recorded in the job
# manifest; the message contents are used byte-identically as emitted.
CHAT_TEMPLATE = "<|system|>\n{system}\n<|user|>\n{user}\n<|assistant|>\n"


class SchemaError(ValueError):
    """Corpus file violates the documented record schema."""


@dataclass(frozen=True)
class SftRecord:
    prompt: str
    target: str


@dataclass(frozen=True)
class PrefRecord:
    prompt: str
    chosen: str
    rejected: str


def _fail(path, lineno, message):
    raise SchemaError(f"{path}: line {lineno}: {message}")


def _chat_prompt(record: dict, path, lineno, key: str) -> str:
    messages = record[key]
    if not isinstance(messages, list) or not messages:
        _fail(path, lineno, f"{key} must be a non-empty message list")
    for message in messages:
        if not isinstance(message, dict) or "role" not in message or "content" not in message:
            _fail(path, lineno, "every message needs 'role' and 'content'")
        if not isinstance(message["content"], str):
            _fail(path, lineno, "message content must be a string")
    roles = [m["role"] for m in messages]
    by_role = {m["role"]: m["content"] for m in messages}
    if "user" not in by_role:
        _fail(path, lineno, f"{key} is missing a user message (roles: {roles})")
    return CHAT_TEMPLATE.format(system=by_role.get("system", ""), user=by_role["user"])


def _parse_line(record: dict, path, lineno):
    kind = record.get("kind")
    if kind in SFT_KINDS:
        if "messages" in record:
            messages = record["messages"]
            prompt = _chat_prompt(record, path, lineno, "messages")
            assistant = [m["content"] for m in messages if m.get("role") == "assistant"]
            if not assistant:
                _fail(path, lineno, "sft record has no assistant message")
            return SftRecord(prompt=prompt, target=assistant[0])
        if "prompt" in record and "target" in record:
            if not isinstance(record["prompt"], str) or not isinstance(record["target"], str):
                _fail(path, lineno, "plain records need string 'prompt' and 'target'")
            return SftRecord(prompt=record["prompt"] + "\n", target=record["target"])
        _fail(path, lineno, "sft record needs 'messages' or 'prompt'+'target'")
    if kind == PREF_KIND:
        for side in ("chosen", "rejected"):
            if not isinstance(record.get(side), str) or not record[side]:
                _fail(path, lineno, f"pref record needs a non-empty {side!r} string")
        if isinstance(record.get("prompt"), list):
            prompt = _chat_prompt(record, path, lineno, "prompt")
        elif isinstance(record.get("prompt"), str):
            prompt = record["prompt"] + "\n"
        else:
            _fail(path, lineno, "pref record needs a 'prompt'")
        return PrefRecord(prompt=prompt, chosen=record["chosen"], rejected=record["rejected"])
    _fail(path, lineno, f"unknown record kind {kind!r}")


def load_corpus(path: str | Path):
    """Validate and load one corpus file; returns Sft/Pref records in file order."""
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                _fail(path, lineno, f"invalid JSON ({exc})")
            if not isinstance(record, dict):
                _fail(path, lineno, "record must be a JSON object")
            records.append(_parse_line(record, path, lineno))
    if not records:
        raise SchemaError(f"{path}: corpus is empty")
    return records


def load_sft_corpus(path: str | Path) -> list[SftRecord]:
    records = load_corpus(path)
    bad = next((r for r in records if not isinstance(r, SftRecord)), None)
    if bad is not None:
        raise SchemaError(f"{path}: expected an SFT corpus but found preference records")
    return records


def load_pref_corpus(path: str | Path) -> list[PrefRecord]:
    records = load_corpus(path)
    bad = next((r for r in records if not isinstance(r, PrefRecord)), None)
    if bad is not None:
        raise SchemaError(f"{path}: expected a preference corpus but found SFT records")
    return records
