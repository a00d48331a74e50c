"""Training-corpus construction from scored hypothesis tables.

Three filtered corpora are built from the scored table: rule-generation SFT
records (hypotheses scoring at least half the demonstrations), rule-following
SFT records (one per kept hypothesis and demonstration), and preference pairs
(ordered pairs whose score difference strictly exceeds the per-family margin).
A fourth corpus of direct few-shot records is built straight from the tasks.
Every emitted record carries the scores needed to re-check its filter
predicate, and building is a pure function of (table, config).
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .augment import Hypothesis, ScoredTable
from .tasks import (
    ARC1D,
    ACRE,
    LIST_FUNCTION,
    MINISCAN,
    IclTask,
    PromptTemplates,
    render_examples,
    render_value,
    split_instruction,
)

SFT_RG = "sft-rg"
SFT_RF = "sft-rf"
PREF = "pref"
IO_FEWSHOT = "io-fewshot"

# Per-family preference margins matching the published score-difference settings.
DEFAULT_MARGINS: dict[str, int] = {LIST_FUNCTION: 3, ARC1D: 1, ACRE: 2, MINISCAN: 4}


class CorpusError(ValueError):
    """Invalid corpus configuration or record."""


@dataclass(frozen=True)
class CorpusConfig:
    """Margins are per family; the SFT threshold is fixed at half the demos."""

    margins: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_MARGINS))
    dedup_rule_following: bool = False

    def __post_init__(self):
        for family, d in self.margins.items():
            if d < 0:
                raise CorpusError(f"margin for {family} must be >= 0: {d}")

    def margin_for(self, family: str) -> int:
        try:
            return self.margins[family]
        except KeyError:
            raise CorpusError(f"no preference margin configured for family {family!r}") from None


def keeps_sft(score: int, n_demos: int) -> bool:
    """The 'at least half the demonstrations' filter, exact for odd n."""
    return 2 * score >= n_demos


@dataclass(frozen=True)
class CorpusRecord:
    kind: str
    task_id: str
    family: str
    n_demos: int
    system: str
    user: str
    target: str | None = None
    score: int | None = None
    demo_index: int | None = None
    chosen: str | None = None
    rejected: str | None = None
    chosen_score: int | None = None
    rejected_score: int | None = None
    margin: int | None = None

    def validate(self) -> None:
        if self.kind in (SFT_RG, SFT_RF):
            if self.score is None or not keeps_sft(self.score, self.n_demos):
                raise CorpusError(
                    f"{self.kind} record for task {self.task_id} fails the half-of-"
                    f"{self.n_demos} threshold with score {self.score}"
                )
            if not self.target:
                raise CorpusError(f"{self.kind} record for task {self.task_id} has no target")
        elif self.kind == PREF:
            if self.chosen is None or self.rejected is None:
                raise CorpusError(f"pref record for task {self.task_id} is missing a side")
            if self.chosen == self.rejected:
                raise CorpusError(f"pref record for task {self.task_id} pairs identical texts")
            assert self.chosen_score is not None and self.rejected_score is not None
            assert self.margin is not None
            if not self.chosen_score > self.rejected_score + self.margin:
                raise CorpusError(
                    f"pref record for task {self.task_id} violates the margin: "
                    f"{self.chosen_score} <= {self.rejected_score} + {self.margin}"
                )
        elif self.kind == IO_FEWSHOT:
            if not self.target:
                raise CorpusError(f"io record for task {self.task_id} has no target")
        else:
            raise CorpusError(f"unknown record kind {self.kind!r}")


def _scored(hypothesis: Hypothesis) -> int:
    if hypothesis.fitness is None:
        raise CorpusError(
            f"hypothesis {hypothesis.sample_index} for task {hypothesis.task_id} is unscored"
        )
    return hypothesis.fitness


def _rg_parts(templates: PromptTemplates, task: IclTask) -> tuple[str, str]:
    instruction, _ = split_instruction(templates.rule_generation)
    return instruction, render_examples(task.demonstrations)


def _by_task(table: ScoredTable):
    for task_id, task in table.tasks.items():
        yield task, [h for h in table.hypotheses if h.task_id == task_id]


def build_sft_rg(
    table: ScoredTable,
    templates_by_family: dict[str, PromptTemplates],
    config: CorpusConfig,
) -> list[CorpusRecord]:
    """Rule-generation SFT records; duplicate (task, text) pairs collapse to one."""
    records = []
    for task, hypotheses in _by_task(table):
        instruction, examples = _rg_parts(templates_by_family[task.family], task)
        seen: set[str] = set()
        for h in hypotheses:
            if not keeps_sft(_scored(h), task.n_demos) or h.text in seen:
                continue
            seen.add(h.text)
            records.append(
                CorpusRecord(
                    kind=SFT_RG,
                    task_id=task.task_id,
                    family=task.family,
                    n_demos=task.n_demos,
                    system=instruction,
                    user=examples,
                    target=h.text,
                    score=h.fitness,
                )
            )
    return records


def build_sft_rf(
    table: ScoredTable,
    templates_by_family: dict[str, PromptTemplates],
    config: CorpusConfig,
) -> list[CorpusRecord]:
    """Rule-following SFT records: every (kept hypothesis, demonstration) pair.

    With config.dedup_rule_following, identical (rule, input, output) triples
    within a task are emitted once.
    """
    records = []
    for task, hypotheses in _by_task(table):
        templates = templates_by_family[task.family]
        instruction, _ = split_instruction(templates.rule_following)
        seen: set[tuple[str, str, str]] = set()
        for h in hypotheses:
            if not keeps_sft(_scored(h), task.n_demos):
                continue
            for i, demo in enumerate(task.demonstrations):
                if config.dedup_rule_following:
                    triple = (h.text, render_value(demo.input), render_value(demo.output))
                    if triple in seen:
                        continue
                    seen.add(triple)
                records.append(
                    CorpusRecord(
                        kind=SFT_RF,
                        task_id=task.task_id,
                        family=task.family,
                        n_demos=task.n_demos,
                        system=instruction,
                        user=f"Rule: {h.text}\nInput: {render_value(demo.input)}\nOutput:",
                        target=render_value(demo.output),
                        score=h.fitness,
                        demo_index=i,
                    )
                )
    return records


def build_pref(
    table: ScoredTable,
    templates_by_family: dict[str, PromptTemplates],
    config: CorpusConfig,
) -> list[CorpusRecord]:
    """All ordered hypothesis pairs whose score gap strictly exceeds the margin."""
    records = []
    for task, hypotheses in _by_task(table):
        d = config.margin_for(task.family)
        instruction, examples = _rg_parts(templates_by_family[task.family], task)
        for chosen in hypotheses:
            for rejected in hypotheses:
                if chosen is rejected or chosen.text == rejected.text:
                    continue
                if _scored(chosen) > _scored(rejected) + d:
                    records.append(
                        CorpusRecord(
                            kind=PREF,
                            task_id=task.task_id,
                            family=task.family,
                            n_demos=task.n_demos,
                            system=instruction,
                            user=examples,
                            chosen=chosen.text,
                            rejected=rejected.text,
                            chosen_score=chosen.fitness,
                            rejected_score=rejected.fitness,
                            margin=d,
                        )
                    )
    return records


def build_io_fewshot(
    tasks,
    templates_by_family: dict[str, PromptTemplates],
) -> list[CorpusRecord]:
    """One record per (task, demonstration), with the remaining demos as context."""
    records = []
    for task in tasks:
        templates = templates_by_family[task.family]
        instruction, _ = split_instruction(templates.direct_fewshot)
        for i, demo in enumerate(task.demonstrations):
            context = task.demonstrations[:i] + task.demonstrations[i + 1:]
            examples = render_examples(context)
            query = f"Input: {render_value(demo.input)}\nOutput:"
            user = f"{examples}\n\n{query}" if examples else query
            records.append(
                CorpusRecord(
                    kind=IO_FEWSHOT,
                    task_id=task.task_id,
                    family=task.family,
                    n_demos=task.n_demos,
                    system=instruction,
                    user=user,
                    target=render_value(demo.output),
                    demo_index=i,
                )
            )
    return records


def record_to_json(record: CorpusRecord, fmt: str = "chat") -> dict:
    meta = {
        "kind": record.kind,
        "task_id": record.task_id,
        "family": record.family,
        "n_demos": record.n_demos,
    }
    if record.score is not None:
        meta["score"] = record.score
    if record.demo_index is not None:
        meta["demo_index"] = record.demo_index
    if record.kind == PREF:
        meta.update(
            chosen_score=record.chosen_score,
            rejected_score=record.rejected_score,
            margin=record.margin,
        )
        if fmt == "chat":
            meta["prompt"] = [
                {"role": "system", "content": record.system},
                {"role": "user", "content": record.user},
            ]
            meta["chosen"] = record.chosen
            meta["rejected"] = record.rejected
        else:
            meta["prompt"] = f"{record.system}\n\n{record.user}"
            meta["chosen"] = record.chosen
            meta["rejected"] = record.rejected
        return meta
    if fmt == "chat":
        meta["messages"] = [
            {"role": "system", "content": record.system},
            {"role": "user", "content": record.user},
            {"role": "assistant", "content": record.target},
        ]
    else:
        meta["prompt"] = f"{record.system}\n\n{record.user}"
        meta["target"] = record.target
    return meta


def emit_corpus(records, path: str | Path, fmt: str = "chat") -> dict:
    """Write records as line-delimited JSON; validates each and returns stats."""
    if fmt not in ("chat", "plain"):
        raise CorpusError(f"unknown corpus format {fmt!r}")
    records = list(records)
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            record.validate()
            fh.write(json.dumps(record_to_json(record, fmt), ensure_ascii=False) + "\n")
    return corpus_stats(records)


def corpus_stats(records) -> dict:
    """Per-kind and per-family counts plus the chosen/rejected score histograms."""
    by_kind = Counter()
    by_family_kind: dict[str, Counter] = {}
    sft_scores = Counter()
    chosen_scores = Counter()
    rejected_scores = Counter()
    for record in records:
        by_kind[record.kind] += 1
        by_family_kind.setdefault(record.family, Counter())[record.kind] += 1
        if record.kind in (SFT_RG, SFT_RF):
            sft_scores[record.score] += 1
        elif record.kind == PREF:
            chosen_scores[record.chosen_score] += 1
            rejected_scores[record.rejected_score] += 1

    def as_sorted(counter: Counter) -> dict:
        return {str(k): counter[k] for k in sorted(counter)}

    return {
        "counts": as_sorted(by_kind),
        "per_family": {fam: as_sorted(c) for fam, c in sorted(by_family_kind.items())},
        "score_histograms": {
            "sft": as_sorted(sft_scores),
            "chosen": as_sorted(chosen_scores),
            "rejected": as_sorted(rejected_scores),
        },
    }


def write_stats(stats: dict, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")
