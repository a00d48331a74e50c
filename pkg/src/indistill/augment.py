"""Teacher-driven hypothesis generation and noisy fitness estimation.

For each task, m candidate rules are sampled at the rule-generation decoding
settings; each candidate is then scored by asking the backend to apply it to
every demonstration input and counting exact matches against the demonstrated
outputs. The rule-follower is imperfect, so the resulting score is a noisy
fitness estimate; parse failures and gateway failures count as mismatches and
never abort a task.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .gateway import DEFAULT_MAX_TOKENS, ChatRequest, Gateway, UsageStats, count_tokens_mock
from .tasks import (
    RULE_FOLLOWING,
    RULE_GENERATION,
    IclTask,
    ParseFailure,
    PromptTemplates,
    parse_output,
    render_prompt,
    values_equal,
)

MATCH = "match"
MISMATCH = "mismatch"
PARSE_FAILURE = "parse-failure"


class AugmentationError(RuntimeError):
    """Raised when every sample for a task failed."""


@dataclass(frozen=True)
class Hypothesis:
    """One candidate rule for one task, with its per-demonstration verdicts."""

    task_id: str
    family: str
    n_demos: int
    sample_index: int
    text: str
    length_tokens: int
    fitness: int | None = None
    verdicts: tuple[str, ...] = ()
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if self.fitness is not None:
            if len(self.verdicts) != self.n_demos:
                raise ValueError(
                    f"hypothesis for task {self.task_id}: {len(self.verdicts)} verdicts "
                    f"for {self.n_demos} demonstrations"
                )
            matches = sum(1 for v in self.verdicts if v == MATCH)
            if self.fitness != matches:
                raise ValueError(
                    f"hypothesis for task {self.task_id}: fitness {self.fitness} "
                    f"does not equal match count {matches}"
                )


@dataclass(frozen=True)
class AugmentationConfig:
    m: int = 50
    model: str = "teacher"
    rule_gen_temperature: float = 0.9
    rule_gen_top_p: float = 1.0
    rule_follow_temperature: float = 0.7
    rule_follow_top_p: float = 1.0
    max_tokens: int = DEFAULT_MAX_TOKENS
    max_in_flight: int = 8

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"m must be >= 1: {self.m}")


def _batch_usage(batch) -> UsageStats:
    total = UsageStats()
    for exchange in batch.exchanges:
        if exchange is not None:
            total = total + exchange.usage
    return total


def generate_hypotheses(
    task: IclTask,
    templates: PromptTemplates,
    config: AugmentationConfig,
    gateway: Gateway,
) -> list[Hypothesis]:
    """Sample m rule candidates; duplicates are kept, texts stored verbatim (trimmed)."""
    hypotheses, _ = generate_hypotheses_with_usage(task, templates, config, gateway)
    return hypotheses


def generate_hypotheses_with_usage(
    task: IclTask,
    templates: PromptTemplates,
    config: AugmentationConfig,
    gateway: Gateway,
) -> tuple[list[Hypothesis], UsageStats]:
    prompt = render_prompt(RULE_GENERATION, templates, task)
    requests = [
        ChatRequest(
            model=config.model,
            prompt=prompt,
            temperature=config.rule_gen_temperature,
            top_p=config.rule_gen_top_p,
            max_tokens=config.max_tokens,
            sample_index=j,
        )
        for j in range(config.m)
    ]
    batch = gateway.complete_many(requests, config.max_in_flight)
    hypotheses = []
    for j, exchange in enumerate(batch.exchanges):
        if exchange is None:
            continue
        text = exchange.completion.strip()
        if not text:
            batch.failures[j] = "empty completion"
            continue
        hypotheses.append(
            Hypothesis(
                task_id=task.task_id,
                family=task.family,
                n_demos=task.n_demos,
                sample_index=j,
                text=text,
                length_tokens=count_tokens_mock(text),
            )
        )
    if not hypotheses:
        raise AugmentationError(
            f"all {config.m} hypothesis samples failed for task {task.task_id}: "
            f"{sorted(batch.failures.items())}"
        )
    return hypotheses, _batch_usage(batch)


def _follow_request(config: AugmentationConfig, prompt: str) -> ChatRequest:
    return ChatRequest(
        model=config.model,
        prompt=prompt,
        temperature=config.rule_follow_temperature,
        top_p=config.rule_follow_top_p,
        max_tokens=config.max_tokens,
        sample_index=0,
    )


def _verdicts_from_batch(task, batch, offset: int):
    verdicts = []
    flags = []
    for i, demo in enumerate(task.demonstrations):
        exchange = batch.exchanges[offset + i]
        if exchange is None:
            verdicts.append(MISMATCH)
            flags.append(f"demo{i}:gateway-failure")
            continue
        parsed = parse_output(task.family, exchange.completion)
        if isinstance(parsed, ParseFailure):
            verdicts.append(PARSE_FAILURE)
        elif values_equal(parsed, demo.output):
            verdicts.append(MATCH)
        else:
            verdicts.append(MISMATCH)
    return tuple(verdicts), tuple(flags)


def estimate_fitness(
    hypothesis: Hypothesis,
    task: IclTask,
    templates: PromptTemplates,
    config: AugmentationConfig,
    gateway: Gateway,
) -> Hypothesis:
    """Score one hypothesis: one rule-following call per demonstration."""
    if not hypothesis.text:
        raise ValueError("hypothesis text must be non-empty")
    requests = [
        _follow_request(
            config,
            render_prompt(RULE_FOLLOWING, templates, task, rule=hypothesis.text, test_input=demo.input),
        )
        for demo in task.demonstrations
    ]
    batch = gateway.complete_many(requests, config.max_in_flight)
    verdicts, flags = _verdicts_from_batch(task, batch, 0)
    return replace(
        hypothesis,
        fitness=sum(1 for v in verdicts if v == MATCH),
        verdicts=verdicts,
        flags=hypothesis.flags + flags,
    )


def score_task_hypotheses(
    hypotheses: list[Hypothesis],
    task: IclTask,
    templates: PromptTemplates,
    config: AugmentationConfig,
    gateway: Gateway,
) -> list[Hypothesis]:
    """Score all hypotheses of one task through a single bounded-parallel batch."""
    scored, _ = score_task_hypotheses_with_usage(hypotheses, task, templates, config, gateway)
    return scored


def score_task_hypotheses_with_usage(
    hypotheses: list[Hypothesis],
    task: IclTask,
    templates: PromptTemplates,
    config: AugmentationConfig,
    gateway: Gateway,
) -> tuple[list[Hypothesis], UsageStats]:
    requests = []
    for hypothesis in hypotheses:
        if not hypothesis.text:
            raise ValueError("hypothesis text must be non-empty")
        for demo in task.demonstrations:
            requests.append(
                _follow_request(
                    config,
                    render_prompt(
                        RULE_FOLLOWING, templates, task, rule=hypothesis.text, test_input=demo.input
                    ),
                )
            )
    batch = gateway.complete_many(requests, config.max_in_flight)
    scored = []
    for h_index, hypothesis in enumerate(hypotheses):
        verdicts, flags = _verdicts_from_batch(task, batch, h_index * task.n_demos)
        scored.append(
            replace(
                hypothesis,
                fitness=sum(1 for v in verdicts if v == MATCH),
                verdicts=verdicts,
                flags=hypothesis.flags + flags,
            )
        )
    return scored, _batch_usage(batch)


@dataclass
class ScoredTable:
    """Scored hypotheses plus the tasks they refer to."""

    tasks: dict[str, IclTask] = field(default_factory=dict)
    hypotheses: list[Hypothesis] = field(default_factory=list)

    def for_task(self, task_id: str) -> list[Hypothesis]:
        return [h for h in self.hypotheses if h.task_id == task_id]


def augment_dataset(
    tasks,
    templates_by_family: dict[str, PromptTemplates],
    config: AugmentationConfig,
    gateway: Gateway,
) -> ScoredTable:
    """Generate and score hypotheses for every task; rows are ordered by
    (task order, sample_index) so the table is deterministic and resumable."""
    table = ScoredTable()
    for task in tasks:
        templates = templates_by_family[task.family]
        generated = generate_hypotheses(task, templates, config, gateway)
        scored = score_task_hypotheses(generated, task, templates, config, gateway)
        table.tasks[task.task_id] = task
        table.hypotheses.extend(scored)
    return table


def hypothesis_to_record(h: Hypothesis) -> dict:
    return {
        "task_id": h.task_id,
        "family": h.family,
        "n_demos": h.n_demos,
        "sample_index": h.sample_index,
        "text": h.text,
        "length_tokens": h.length_tokens,
        "fitness": h.fitness,
        "verdicts": list(h.verdicts),
        "flags": list(h.flags),
    }


def save_scored_table(table: ScoredTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h in table.hypotheses:
            fh.write(json.dumps(hypothesis_to_record(h), ensure_ascii=False) + "\n")


def load_scored_table(path: str | Path, tasks) -> ScoredTable:
    """Rebuild a table from its file plus the tasks it was computed from."""
    by_id = {task.task_id: task for task in tasks}
    table = ScoredTable()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            row = json.loads(line)
            try:
                task = by_id[row["task_id"]]
            except KeyError:
                raise ValueError(
                    f"{path}: line {lineno} references unknown task {row['task_id']!r}"
                ) from None
            table.tasks[task.task_id] = task
            table.hypotheses.append(
                Hypothesis(
                    task_id=row["task_id"],
                    family=row["family"],
                    n_demos=row["n_demos"],
                    sample_index=row["sample_index"],
                    text=row["text"],
                    length_tokens=row["length_tokens"],
                    fitness=row["fitness"],
                    verdicts=tuple(row["verdicts"]),
                    flags=tuple(row.get("flags", ())),
                )
            )
    return table
