"""Task domain model: values, tasks, dataset IO, output parsing, prompt rendering.

Four task families are supported. Values are immutable and normalized at
construction; equality is structural on the normalized payload, never on raw
text. Model completions are parsed leniently (first parseable candidate) and
parse failures are values, not exceptions, so a noisy completion can never
abort a run.
"""

from __future__ import annotations

import ast
import json
import random
import re
from dataclasses import dataclass
from pathlib import Path

INT_LIST = "int-list"
TOKEN_SEQUENCE = "token-sequence"
LIGHT_STATE = "light-state"
OBJECT_SET = "object-set"

VALUE_KINDS = (INT_LIST, TOKEN_SEQUENCE, LIGHT_STATE, OBJECT_SET)

LIGHT_STATES = ("on", "off", "undetermined")

LIST_FUNCTION = "list-function"
ARC1D = "arc1d"
ACRE = "acre"
MINISCAN = "miniscan"


@dataclass(frozen=True)
class FamilySpec:
    name: str
    input_kind: str
    output_kind: str
    max_demos: int


FAMILIES: dict[str, FamilySpec] = {
    LIST_FUNCTION: FamilySpec(LIST_FUNCTION, INT_LIST, INT_LIST, max_demos=8),
    ARC1D: FamilySpec(ARC1D, INT_LIST, INT_LIST, max_demos=3),
    ACRE: FamilySpec(ACRE, OBJECT_SET, LIGHT_STATE, max_demos=6),
    MINISCAN: FamilySpec(MINISCAN, TOKEN_SEQUENCE, TOKEN_SEQUENCE, max_demos=14),
}


class TaskError(ValueError):
    """Invalid task, value, or prompt construction."""


class DatasetError(ValueError):
    """Malformed dataset file; carries the offending task id and field."""

    def __init__(self, message: str, task_id: str | None = None, field_name: str | None = None):
        self.task_id = task_id
        self.field_name = field_name
        where = []
        if task_id is not None:
            where.append(f"task {task_id!r}")
        if field_name is not None:
            where.append(f"field {field_name!r}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)


def family_spec(family: str) -> FamilySpec:
    try:
        return FAMILIES[family]
    except KeyError:
        raise TaskError(f"unknown task family: {family!r}") from None


@dataclass(frozen=True)
class TaskValue:
    """One normalized task value; payload is a tuple keyed by `kind`."""

    kind: str
    payload: tuple

    def __post_init__(self):
        if self.kind == INT_LIST:
            if not all(isinstance(x, int) and not isinstance(x, bool) for x in self.payload):
                raise TaskError(f"int-list payload must contain only integers: {self.payload!r}")
        elif self.kind == TOKEN_SEQUENCE:
            for tok in self.payload:
                if not isinstance(tok, str) or not tok or re.search(r"\s", tok):
                    raise TaskError(f"token-sequence tokens must be non-empty and whitespace-free: {tok!r}")
        elif self.kind == LIGHT_STATE:
            if len(self.payload) != 1 or self.payload[0] not in LIGHT_STATES:
                raise TaskError(f"light-state must be one of {LIGHT_STATES}: {self.payload!r}")
        elif self.kind == OBJECT_SET:
            for name in self.payload:
                if not isinstance(name, str) or not name.strip():
                    raise TaskError(f"object names must be non-empty strings: {name!r}")
        else:
            raise TaskError(f"unknown value kind: {self.kind!r}")

    @staticmethod
    def int_list(values) -> "TaskValue":
        return TaskValue(INT_LIST, tuple(values))

    @staticmethod
    def tokens(tokens) -> "TaskValue":
        return TaskValue(TOKEN_SEQUENCE, tuple(tokens))

    @staticmethod
    def light(state: str) -> "TaskValue":
        return TaskValue(LIGHT_STATE, (state.strip().lower(),))

    @staticmethod
    def objects(names) -> "TaskValue":
        return TaskValue(OBJECT_SET, tuple(n.strip() for n in names))


@dataclass(frozen=True)
class ParseFailure:
    """Unparseable completion; scored as incorrect downstream."""

    raw_text: str


def values_equal(a: TaskValue | ParseFailure, b: TaskValue | ParseFailure) -> bool:
    """Structural equality on normalized payloads; parse failures match nothing."""
    if isinstance(a, ParseFailure) or isinstance(b, ParseFailure):
        return False
    return a.kind == b.kind and a.payload == b.payload


def render_value(value: TaskValue) -> str:
    """Surface syntax: Python list literal, space-joined tokens, or a bare state."""
    if value.kind == INT_LIST:
        return repr(list(value.payload))
    if value.kind == TOKEN_SEQUENCE:
        return " ".join(value.payload)
    if value.kind == LIGHT_STATE:
        return value.payload[0]
    if value.kind == OBJECT_SET:
        return repr(list(value.payload))
    raise TaskError(f"unknown value kind: {value.kind!r}")


_INT_LIST_RE = re.compile(r"\[\s*(?:[+-]?\d+(?:\s*,\s*[+-]?\d+)*\s*)?\]")
_OBJECT_SET_RE = re.compile(r"\[[^\[\]]*\]")
_PUNCT_STRIP = " \t\r\n.,;:!?'\"`"


def parse_value(kind: str, text: str) -> TaskValue | ParseFailure:
    """Parse the first candidate of `kind` out of free text."""
    if kind == INT_LIST:
        m = _INT_LIST_RE.search(text)
        if not m:
            return ParseFailure(text)
        inner = m.group(0)[1:-1].strip()
        items = [int(part) for part in inner.split(",")] if inner else []
        return TaskValue.int_list(items)
    if kind == LIGHT_STATE:
        candidate = text.strip(_PUNCT_STRIP).lower()
        if candidate in LIGHT_STATES:
            return TaskValue.light(candidate)
        return ParseFailure(text)
    if kind == TOKEN_SEQUENCE:
        tokens = text.split()
        if not tokens:
            return ParseFailure(text)
        return TaskValue.tokens(tokens)
    if kind == OBJECT_SET:
        m = _OBJECT_SET_RE.search(text)
        if not m:
            return ParseFailure(text)
        try:
            items = ast.literal_eval(m.group(0))
        except (ValueError, SyntaxError):
            return ParseFailure(text)
        if not isinstance(items, list) or not all(isinstance(x, str) and x.strip() for x in items):
            return ParseFailure(text)
        return TaskValue.objects(items)
    raise TaskError(f"unknown value kind: {kind!r}")


def parse_output(family: str, raw_text: str) -> TaskValue | ParseFailure:
    """Parse a verbatim model completion into the family's output value."""
    return parse_value(family_spec(family).output_kind, raw_text)


@dataclass(frozen=True)
class Example:
    input: TaskValue
    output: TaskValue


@dataclass(frozen=True)
class IclTask:
    """One inductive-reasoning task: demonstrations plus held-out test pairs."""

    task_id: str
    family: str
    demonstrations: tuple[Example, ...]
    tests: tuple[Example, ...]

    def __post_init__(self):
        spec = family_spec(self.family)
        if not self.task_id:
            raise TaskError("task_id must be non-empty")
        n = len(self.demonstrations)
        if n < 1:
            raise TaskError(f"task {self.task_id}: needs at least one demonstration")
        if n > spec.max_demos:
            raise TaskError(
                f"task {self.task_id}: {n} demonstrations exceeds the "
                f"{self.family} maximum of {spec.max_demos}"
            )
        for ex in self.demonstrations + self.tests:
            if ex.input.kind != spec.input_kind or ex.output.kind != spec.output_kind:
                raise TaskError(
                    f"task {self.task_id}: example kinds ({ex.input.kind}, {ex.output.kind}) "
                    f"do not match family {self.family}"
                )

    @property
    def n_demos(self) -> int:
        return len(self.demonstrations)


def _value_to_json(value: TaskValue):
    if value.kind in (INT_LIST, OBJECT_SET):
        return list(value.payload)
    if value.kind == TOKEN_SEQUENCE:
        return " ".join(value.payload)
    return value.payload[0]


def _value_from_json(kind: str, obj, task_id: str, field_name: str) -> TaskValue:
    try:
        if kind == INT_LIST:
            if not isinstance(obj, list):
                raise TaskError("expected a list of integers")
            return TaskValue.int_list(obj)
        if kind == OBJECT_SET:
            if not isinstance(obj, list):
                raise TaskError("expected a list of object names")
            return TaskValue.objects(obj)
        if kind == TOKEN_SEQUENCE:
            if not isinstance(obj, str):
                raise TaskError("expected a space-joined token string")
            return parse_or_raise(TOKEN_SEQUENCE, obj)
        if isinstance(obj, str):
            return TaskValue.light(obj)
        raise TaskError("expected a light-state string")
    except TaskError as exc:
        raise DatasetError(str(exc), task_id=task_id, field_name=field_name) from None


def parse_or_raise(kind: str, text: str) -> TaskValue:
    parsed = parse_value(kind, text)
    if isinstance(parsed, ParseFailure):
        raise TaskError(f"cannot parse {kind} from {text!r}")
    return parsed


def task_to_record(task: IclTask) -> dict:
    def pairs(examples):
        return [
            {"input": _value_to_json(ex.input), "output": _value_to_json(ex.output)}
            for ex in examples
        ]

    return {
        "id": task.task_id,
        "family": task.family,
        "demonstrations": pairs(task.demonstrations),
        "tests": pairs(task.tests),
    }


def task_from_record(record: dict) -> IclTask:
    task_id = str(record.get("id", ""))
    family = record.get("family")
    if family not in FAMILIES:
        raise DatasetError(f"unknown family {family!r}", task_id=task_id, field_name="family")
    spec = FAMILIES[family]

    def pairs(field_name: str) -> tuple[Example, ...]:
        raw = record.get(field_name)
        if not isinstance(raw, list):
            raise DatasetError("expected a list of examples", task_id=task_id, field_name=field_name)
        out = []
        for i, item in enumerate(raw):
            if not isinstance(item, dict) or "input" not in item or "output" not in item:
                raise DatasetError(
                    "example must carry 'input' and 'output'",
                    task_id=task_id,
                    field_name=f"{field_name}[{i}]",
                )
            out.append(
                Example(
                    input=_value_from_json(spec.input_kind, item["input"], task_id, f"{field_name}[{i}].input"),
                    output=_value_from_json(spec.output_kind, item["output"], task_id, f"{field_name}[{i}].output"),
                )
            )
        return tuple(out)

    try:
        return IclTask(task_id=task_id, family=family, demonstrations=pairs("demonstrations"), tests=pairs("tests"))
    except TaskError as exc:
        raise DatasetError(str(exc), task_id=task_id) from None


def load_dataset(family: str, path: str | Path) -> list[IclTask]:
    """Load one line-delimited JSON task file, validating every record."""
    family_spec(family)
    tasks = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON: {exc}") from None
            task = task_from_record(record)
            if task.family != family:
                raise DatasetError(
                    f"family {task.family!r} does not match requested {family!r}",
                    task_id=task.task_id,
                    field_name="family",
                )
            if task.task_id in seen:
                raise DatasetError("duplicate task id", task_id=task.task_id, field_name="id")
            seen.add(task.task_id)
            tasks.append(task)
    return tasks


def save_dataset(tasks, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for task in tasks:
            fh.write(json.dumps(task_to_record(task), ensure_ascii=False) + "\n")


def split_tasks(tasks, test_fraction: float, seed: int):
    """Deterministic train/test partition; |test| = round(test_fraction * |tasks|)."""
    if not 0.0 <= test_fraction <= 1.0:
        raise TaskError(f"test_fraction must be within [0, 1]: {test_fraction}")
    tasks = list(tasks)
    n_test = int(test_fraction * len(tasks) + 0.5)
    rng = random.Random(seed)
    test_indices = set(rng.sample(range(len(tasks)), n_test))
    train = [t for i, t in enumerate(tasks) if i not in test_indices]
    test = [t for i, t in enumerate(tasks) if i in test_indices]
    return train, test


RULE_GENERATION = "rule-generation"
RULE_FOLLOWING = "rule-following"
DIRECT_FEWSHOT = "direct-fewshot"

PROMPT_KINDS = (RULE_GENERATION, RULE_FOLLOWING, DIRECT_FEWSHOT)

# Instruction texts per family. The first paragraph of every template is the
# instruction; the remainder is the body layout with named placeholders.
_LIST_RG = (
    "Consider the following input-output examples. Both the input and the output are "
    "Python lists. Based on the example shown below, identify the rule that can be used "
    "to convert the input into the output. Your output should solely contain the rule."
)
_LIST_RF = (
    "The following problem contains a rule and an input. Use the rule to produce the "
    "output from the given input. Your output should solely be a valid Python list that "
    "represents the output. No other text or description should be present."
)
_LIST_IO = (
    "Consider the following input-output examples. Both the input and the output are "
    "Python lists. Based on the example shown above, produce the output from the "
    "following input. No other text or description should be present."
)
_ACRE_RG = (
    "Generate a rule that maps the following inputs to their corresponding outputs. "
    "Each example is an input-output pair. The input is a list of objects. The presence "
    "of certain objects will trigger the light to turn on. The output is either 'on', "
    "'off', or 'undetermined', indicating the state of the light or if the state of the "
    "light cannot be determined. Your output should solely contain the rule."
)
_ACRE_RF = (
    "Generate an output corresponding to the given input based on the following rule. "
    "Each example is an input-output pair. The input is a list of objects. The presence "
    "of certain objects will trigger the light to turn on. The output is either 'on', "
    "'off', or 'undetermined', indicating the state of the light or if the state of the "
    "light cannot be determined."
)
_ACRE_IO = (
    "Consider the following few-shot examples. Each example is an input-output pair. "
    "The input is a list of objects. The presence of certain objects will trigger the "
    "light to turn on. The output is either 'on', 'off', or 'undetermined', indicating "
    "the state of the light or if the state of the light cannot be determined. Based on "
    "the example shown above, produce the output from the following input. No other "
    "text or description should be present."
)
_MINISCAN_RG = (
    "Generate rules that map the following inputs to their corresponding outputs. "
    "Specify the priority of the rules if necessary. Try to make your rules as minimal "
    "and generally applicable as possible."
)
_MINISCAN_RF = (
    "Generate an output corresponding to the given input based on the following rules. "
    "The output is a sequence of tokens joined by spaces."
)
_MINISCAN_IO = (
    "Consider the following input-output few-shot examples. Based on the example shown "
    "above, produce the output from the following input. No other text or description "
    "should be present."
)

_RG_BODY = "{examples}"
_RF_BODY = "Rule: {rule}\nInput: {input}\nOutput:"
_IO_BODY = "{examples}\n\nInput: {input}\nOutput:"


@dataclass(frozen=True)
class PromptTemplates:
    """Per-family prompt templates; instruction paragraph + placeholder body."""

    rule_generation: str
    rule_following: str
    direct_fewshot: str

    def __post_init__(self):
        for name, text, needed in (
            ("rule_generation", self.rule_generation, ("{examples}",)),
            ("rule_following", self.rule_following, ("{rule}", "{input}")),
            ("direct_fewshot", self.direct_fewshot, ("{examples}", "{input}")),
        ):
            for placeholder in needed:
                if placeholder not in text:
                    raise TaskError(f"template {name} is missing placeholder {placeholder}")

    def template_for(self, kind: str) -> str:
        if kind == RULE_GENERATION:
            return self.rule_generation
        if kind == RULE_FOLLOWING:
            return self.rule_following
        if kind == DIRECT_FEWSHOT:
            return self.direct_fewshot
        raise TaskError(f"unknown prompt kind: {kind!r}")


def _templates(rg: str, rf: str, io: str) -> PromptTemplates:
    return PromptTemplates(
        rule_generation=f"{rg}\n\n{_RG_BODY}",
        rule_following=f"{rf}\n\n{_RF_BODY}",
        direct_fewshot=f"{io}\n\n{_IO_BODY}",
    )


DEFAULT_TEMPLATES: dict[str, PromptTemplates] = {
    LIST_FUNCTION: _templates(_LIST_RG, _LIST_RF, _LIST_IO),
    ARC1D: _templates(_LIST_RG, _LIST_RF, _LIST_IO),
    ACRE: _templates(_ACRE_RG, _ACRE_RF, _ACRE_IO),
    MINISCAN: _templates(_MINISCAN_RG, _MINISCAN_RF, _MINISCAN_IO),
}


def load_templates(path: str | Path) -> dict[str, PromptTemplates]:
    """Load template overrides: JSON mapping family -> {kind: template text}."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    templates = dict(DEFAULT_TEMPLATES)
    for family, entry in raw.items():
        family_spec(family)
        base = templates[family]
        templates[family] = PromptTemplates(
            rule_generation=entry.get("rule_generation", base.rule_generation),
            rule_following=entry.get("rule_following", base.rule_following),
            direct_fewshot=entry.get("direct_fewshot", base.direct_fewshot),
        )
    return templates


def split_instruction(template_text: str) -> tuple[str, str]:
    """Split a template into (instruction paragraph, body layout)."""
    head, sep, tail = template_text.partition("\n\n")
    return (head, tail) if sep else (template_text, "")


def render_examples(examples) -> str:
    blocks = [
        f"Input: {render_value(ex.input)}\nOutput: {render_value(ex.output)}"
        for ex in examples
    ]
    return "\n\n".join(blocks)


def render_prompt(
    kind: str,
    templates: PromptTemplates,
    task: IclTask,
    rule: str | None = None,
    test_input: TaskValue | None = None,
) -> str:
    """Render one prompt; embeds the instruction verbatim and demonstrations in order."""
    template = templates.template_for(kind)
    fields: dict[str, str] = {}
    if kind in (RULE_GENERATION, DIRECT_FEWSHOT):
        fields["examples"] = render_examples(task.demonstrations)
    if kind == RULE_FOLLOWING:
        if rule is None:
            raise TaskError("rule-following prompt requires a rule")
        fields["rule"] = rule
    if kind in (RULE_FOLLOWING, DIRECT_FEWSHOT):
        if test_input is None:
            raise TaskError(f"{kind} prompt requires a test input")
        fields["input"] = render_value(test_input)
    try:
        return template.format(**fields)
    except (KeyError, IndexError) as exc:
        raise TaskError(f"template for {kind} has unresolved placeholder: {exc}") from None


def render_prompt_parts(
    kind: str,
    templates: PromptTemplates,
    task: IclTask,
    rule: str | None = None,
    test_input: TaskValue | None = None,
) -> tuple[str, str]:
    """(instruction, rendered body) for chat-style corpus emission."""
    full = render_prompt(kind, templates, task, rule=rule, test_input=test_input)
    instruction, _ = split_instruction(templates.template_for(kind))
    body = full[len(instruction):].lstrip("\n")
    return instruction, body
