"""Evaluation-time execution: direct few-shot prompting and hypothesis search.

Hypothesis search samples m candidate rules, scores each against the
demonstrations with single-sample rule-following calls (the same procedure as
training-time fitness estimation), selects the best-fitting candidate with a
first-generated tie-break, and applies it to every test input. Rule
generation and rule following may be served by different gateways so the two
stages can run on different checkpoints. Candidate samples are keyed by
sample_index in the gateway cache, so accuracies for smaller search sizes are
prefixes of one larger run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .augment import (
    AugmentationConfig,
    AugmentationError,
    generate_hypotheses_with_usage,
    score_task_hypotheses_with_usage,
)
from .gateway import DEFAULT_MAX_TOKENS, ChatRequest, Gateway, UsageStats
from .tasks import (
    DIRECT_FEWSHOT,
    RULE_FOLLOWING,
    IclTask,
    ParseFailure,
    PromptTemplates,
    parse_output,
    render_prompt,
    values_equal,
)

MODE_IO = "io"
MODE_HS = "hypothesis-search"


@dataclass(frozen=True)
class DecodingParams:
    temperature: float
    top_p: float = 1.0


@dataclass(frozen=True)
class InferenceConfig:
    mode: str = MODE_HS
    m: int = 10
    model: str = "student"
    rule_gen: DecodingParams = DecodingParams(0.9, 1.0)
    rule_follow: DecodingParams = DecodingParams(0.7, 1.0)
    io: DecodingParams = DecodingParams(0.7, 1.0)
    max_tokens: int = DEFAULT_MAX_TOKENS
    max_in_flight: int = 8
    tie_break: str = "first"

    def __post_init__(self):
        if self.mode not in (MODE_IO, MODE_HS):
            raise ValueError(f"unknown inference mode {self.mode!r}")
        if self.mode == MODE_HS and self.m < 1:
            raise ValueError(f"hypothesis-search needs m >= 1: {self.m}")
        if self.tie_break != "first":
            raise ValueError(f"unsupported tie_break policy {self.tie_break!r}")


@dataclass(frozen=True)
class Prediction:
    test_index: int
    completion: str | None
    correct: bool


@dataclass(frozen=True)
class CandidateInfo:
    sample_index: int
    text: str
    fitness: int


@dataclass(frozen=True)
class TaskResult:
    """Per-task outcome; correctness is decided only by parse + value equality."""

    task_id: str
    family: str
    mode: str
    predictions: tuple[Prediction, ...]
    prompt_tokens: int
    completion_tokens: int
    selected: CandidateInfo | None = None
    candidates: tuple[CandidateInfo, ...] = ()
    error: str | None = None

    @property
    def n_outputs(self) -> int:
        return len(self.predictions)

    @property
    def n_correct(self) -> int:
        return sum(1 for p in self.predictions if p.correct)

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


def _augmentation_config(config: InferenceConfig) -> AugmentationConfig:
    return AugmentationConfig(
        m=config.m,
        model=config.model,
        rule_gen_temperature=config.rule_gen.temperature,
        rule_gen_top_p=config.rule_gen.top_p,
        rule_follow_temperature=config.rule_follow.temperature,
        rule_follow_top_p=config.rule_follow.top_p,
        max_tokens=config.max_tokens,
        max_in_flight=config.max_in_flight,
    )


def _score_predictions(task: IclTask, batch) -> tuple[tuple[Prediction, ...], UsageStats]:
    predictions = []
    usage = UsageStats()
    for i, test in enumerate(task.tests):
        exchange = batch.exchanges[i]
        if exchange is None:
            # Failed call after retries: conservatively incorrect, zero usage.
            predictions.append(Prediction(test_index=i, completion=None, correct=False))
            continue
        usage = usage + exchange.usage
        parsed = parse_output(task.family, exchange.completion)
        correct = not isinstance(parsed, ParseFailure) and values_equal(parsed, test.output)
        predictions.append(
            Prediction(test_index=i, completion=exchange.completion, correct=correct)
        )
    return tuple(predictions), usage


def run_io(
    task: IclTask,
    templates: PromptTemplates,
    config: InferenceConfig,
    gateway: Gateway,
) -> TaskResult:
    """Direct few-shot prompting: one call per test input, no intermediate rule."""
    requests = [
        ChatRequest(
            model=config.model,
            prompt=render_prompt(DIRECT_FEWSHOT, templates, task, test_input=test.input),
            temperature=config.io.temperature,
            top_p=config.io.top_p,
            max_tokens=config.max_tokens,
            sample_index=0,
        )
        for test in task.tests
    ]
    batch = gateway.complete_many(requests, config.max_in_flight)
    predictions, usage = _score_predictions(task, batch)
    return TaskResult(
        task_id=task.task_id,
        family=task.family,
        mode=MODE_IO,
        predictions=predictions,
        prompt_tokens=usage.prompt_tokens,
        completion_tokens=usage.completion_tokens,
    )


def run_hypothesis_search(
    task: IclTask,
    templates: PromptTemplates,
    config: InferenceConfig,
    gateway: Gateway,
    rf_gateway: Gateway | None = None,
) -> TaskResult:
    """Sample, score, select (first-generated wins ties), and apply one rule."""
    if not task.tests:
        raise ValueError(f"task {task.task_id} has no test inputs")
    rf_gateway = rf_gateway if rf_gateway is not None else gateway
    aug_config = _augmentation_config(config)

    try:
        hypotheses, gen_usage = generate_hypotheses_with_usage(
            task, templates, aug_config, gateway
        )
    except AugmentationError as exc:
        # Every generation sample failed: counted as all-incorrect.
        predictions = tuple(
            Prediction(test_index=i, completion=None, correct=False)
            for i in range(len(task.tests))
        )
        return TaskResult(
            task_id=task.task_id,
            family=task.family,
            mode=MODE_HS,
            predictions=predictions,
            prompt_tokens=0,
            completion_tokens=0,
            error=str(exc),
        )

    scored, score_usage = score_task_hypotheses_with_usage(
        hypotheses, task, templates, aug_config, rf_gateway
    )
    candidates = tuple(
        CandidateInfo(sample_index=h.sample_index, text=h.text, fitness=h.fitness)
        for h in scored
    )
    selected = candidates[0]
    for candidate in candidates[1:]:
        if candidate.fitness > selected.fitness:
            selected = candidate
    assert all(selected.fitness >= c.fitness for c in candidates)

    apply_requests = [
        ChatRequest(
            model=config.model,
            prompt=render_prompt(
                RULE_FOLLOWING, templates, task, rule=selected.text, test_input=test.input
            ),
            temperature=config.rule_follow.temperature,
            top_p=config.rule_follow.top_p,
            max_tokens=config.max_tokens,
            sample_index=0,
        )
        for test in task.tests
    ]
    batch = rf_gateway.complete_many(apply_requests, config.max_in_flight)
    predictions, apply_usage = _score_predictions(task, batch)
    total = gen_usage + score_usage + apply_usage
    return TaskResult(
        task_id=task.task_id,
        family=task.family,
        mode=MODE_HS,
        predictions=predictions,
        prompt_tokens=total.prompt_tokens,
        completion_tokens=total.completion_tokens,
        selected=selected,
        candidates=candidates,
    )


def run_tasks(
    tasks,
    templates_by_family: dict[str, PromptTemplates],
    config: InferenceConfig,
    gateway: Gateway,
    rf_gateway: Gateway | None = None,
) -> list[TaskResult]:
    """Run every task in order; per-task batches use the gateway's bounded pool."""
    results = []
    for task in tasks:
        templates = templates_by_family[task.family]
        if config.mode == MODE_IO:
            results.append(run_io(task, templates, config, gateway))
        else:
            results.append(run_hypothesis_search(task, templates, config, gateway, rf_gateway))
    return results


@dataclass(frozen=True)
class SweepPoint:
    m: int
    rg_temperature: float
    rf_temperature: float
    results: tuple[TaskResult, ...]


def sweep(
    tasks,
    templates_by_family: dict[str, PromptTemplates],
    config: InferenceConfig,
    gateway: Gateway,
    m_values,
    rg_temperatures=None,
    rf_temperatures=None,
    rf_gateway: Gateway | None = None,
) -> list[SweepPoint]:
    """Grid over search size and decoding temperatures.

    Within one rule-generation temperature, candidate samples for smaller m are
    cache-prefixes of the largest m, so the whole m-curve costs one full run.
    """
    rg_temperatures = list(rg_temperatures or [config.rule_gen.temperature])
    rf_temperatures = list(rf_temperatures or [config.rule_follow.temperature])
    m_values = list(m_values)
    if any(m < 1 for m in m_values):
        raise ValueError(f"sweep m values must be >= 1: {m_values}")
    points = []
    for rg_t in rg_temperatures:
        for rf_t in rf_temperatures:
            for m in m_values:
                point_config = InferenceConfig(
                    mode=MODE_HS,
                    m=m,
                    model=config.model,
                    rule_gen=DecodingParams(rg_t, config.rule_gen.top_p),
                    rule_follow=DecodingParams(rf_t, config.rule_follow.top_p),
                    io=config.io,
                    max_tokens=config.max_tokens,
                    max_in_flight=config.max_in_flight,
                    tie_break=config.tie_break,
                )
                results = run_tasks(
                    tasks, templates_by_family, point_config, gateway, rf_gateway
                )
                points.append(
                    SweepPoint(
                        m=m,
                        rg_temperature=rg_t,
                        rf_temperature=rf_t,
                        results=tuple(results),
                    )
                )
    return points


def result_to_record(result: TaskResult) -> dict:
    record = {
        "task_id": result.task_id,
        "family": result.family,
        "mode": result.mode,
        "predictions": [
            {"test_index": p.test_index, "completion": p.completion, "correct": p.correct}
            for p in result.predictions
        ],
        "n_correct": result.n_correct,
        "n_outputs": result.n_outputs,
        "prompt_tokens": result.prompt_tokens,
        "completion_tokens": result.completion_tokens,
        "error": result.error,
    }
    if result.selected is not None:
        record["selected"] = {
            "sample_index": result.selected.sample_index,
            "text": result.selected.text,
            "fitness": result.selected.fitness,
        }
    if result.candidates:
        record["candidates"] = [
            {"sample_index": c.sample_index, "text": c.text, "fitness": c.fitness}
            for c in result.candidates
        ]
    return record


def _candidate_from(record: dict | None) -> CandidateInfo | None:
    if record is None:
        return None
    return CandidateInfo(
        sample_index=record["sample_index"], text=record["text"], fitness=record["fitness"]
    )


def save_results(results, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for result in results:
            fh.write(json.dumps(result_to_record(result), ensure_ascii=False) + "\n")


def load_results(path: str | Path) -> list[TaskResult]:
    results = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            results.append(
                TaskResult(
                    task_id=record["task_id"],
                    family=record["family"],
                    mode=record["mode"],
                    predictions=tuple(
                        Prediction(
                            test_index=p["test_index"],
                            completion=p["completion"],
                            correct=p["correct"],
                        )
                        for p in record["predictions"]
                    ),
                    prompt_tokens=record["prompt_tokens"],
                    completion_tokens=record["completion_tokens"],
                    selected=_candidate_from(record.get("selected")),
                    candidates=tuple(
                        _candidate_from(c) for c in record.get("candidates", [])
                    ),
                    error=record.get("error"),
                )
            )
    return results
