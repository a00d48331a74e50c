"""Executable list-transformation rules.

A tiny total rule language over integer lists. It provides ground-truth task
generation, a brute-force fitness oracle, and a deterministic mock teacher so
the whole pipeline can run and be verified without any language model.

Serialized form (one-to-one with the AST):
    identity | reverse | sort-asc | sort-desc | filter-even | filter-odd
    take(k) | drop(k) | repeat-each(k) | append-const(c) | remove-value(v) | map-add(c)
    compose(<rule>, <rule>)    # apply the first rule, then the second

Every rule also has a deterministic natural-language rendering ("reverse the
list, then keep only the first 2 elements") that parses back to an equivalent
rule; the mock teacher trades in these renderings.
"""

from __future__ import annotations

import hashlib
import random
import re
from dataclasses import dataclass

from .tasks import (
    LIST_FUNCTION,
    Example,
    IclTask,
    ParseFailure,
    TaskValue,
    render_examples,
    render_value,
)

# Primitives taking a count argument (must be >= 0) vs. a value argument.
_COUNT_OPS = ("take", "drop", "repeat-each")
_VALUE_OPS = ("append-const", "remove-value", "map-add")
_PLAIN_OPS = ("identity", "reverse", "sort-asc", "sort-desc", "filter-even", "filter-odd")
COMPOSE = "compose"

# Hard cap on the number of composed primitives in one rule.
MAX_RULE_SIZE = 3


class RuleError(ValueError):
    """Invalid rule construction or serialization."""


@dataclass(frozen=True)
class DslRule:
    op: str
    arg: int | None = None
    children: tuple["DslRule", ...] = ()

    def __post_init__(self):
        if self.op == COMPOSE:
            if len(self.children) != 2 or self.arg is not None:
                raise RuleError("compose takes exactly two sub-rules and no argument")
        elif self.op in _COUNT_OPS:
            if not isinstance(self.arg, int) or self.arg < 0 or self.children:
                raise RuleError(f"{self.op} takes one count argument >= 0")
        elif self.op in _VALUE_OPS:
            if not isinstance(self.arg, int) or self.children:
                raise RuleError(f"{self.op} takes one integer argument")
        elif self.op in _PLAIN_OPS:
            if self.arg is not None or self.children:
                raise RuleError(f"{self.op} takes no argument")
        else:
            raise RuleError(f"unknown primitive: {self.op!r}")
        if rule_size(self) > MAX_RULE_SIZE:
            raise RuleError(f"rule exceeds the composition cap of {MAX_RULE_SIZE}")


def rule(op: str, arg: int | None = None) -> DslRule:
    return DslRule(op, arg)


def compose(first: DslRule, second: DslRule) -> DslRule:
    """Apply `first`, then `second`."""
    return DslRule(COMPOSE, None, (first, second))


def rule_size(r: DslRule) -> int:
    if r.op == COMPOSE:
        return sum(rule_size(c) for c in r.children)
    return 1


def rule_leaves(r: DslRule) -> list[DslRule]:
    if r.op == COMPOSE:
        return rule_leaves(r.children[0]) + rule_leaves(r.children[1])
    return [r]


def eval_rule(r: DslRule, values) -> list[int]:
    """Evaluate a rule on an integer list. Total: defined on every input."""
    values = list(values)
    if r.op == COMPOSE:
        return eval_rule(r.children[1], eval_rule(r.children[0], values))
    if r.op == "identity":
        return values
    if r.op == "reverse":
        return values[::-1]
    if r.op == "sort-asc":
        return sorted(values)
    if r.op == "sort-desc":
        return sorted(values, reverse=True)
    if r.op == "take":
        return values[: r.arg]
    if r.op == "drop":
        return values[r.arg :]
    if r.op == "repeat-each":
        return [x for x in values for _ in range(r.arg)]
    if r.op == "append-const":
        return values + [r.arg]
    if r.op == "remove-value":
        return [x for x in values if x != r.arg]
    if r.op == "map-add":
        return [x + r.arg for x in values]
    if r.op == "filter-even":
        return [x for x in values if x % 2 == 0]
    if r.op == "filter-odd":
        return [x for x in values if x % 2 != 0]
    raise RuleError(f"unknown primitive: {r.op!r}")


def serialize_rule(r: DslRule) -> str:
    if r.op == COMPOSE:
        return f"compose({serialize_rule(r.children[0])}, {serialize_rule(r.children[1])})"
    if r.arg is not None:
        return f"{r.op}({r.arg})"
    return r.op


def parse_rule(text: str) -> DslRule:
    """Parse the serialized form back into a rule."""
    pos = 0

    def skip_ws():
        nonlocal pos
        while pos < len(text) and text[pos].isspace():
            pos += 1

    def parse_expr() -> DslRule:
        nonlocal pos
        skip_ws()
        m = re.match(r"[a-z-]+", text[pos:])
        if not m:
            raise RuleError(f"expected a primitive name at offset {pos} in {text!r}")
        name = m.group(0)
        pos += len(name)
        skip_ws()
        if name == COMPOSE:
            expect("(")
            first = parse_expr()
            expect(",")
            second = parse_expr()
            expect(")")
            return compose(first, second)
        if pos < len(text) and text[pos] == "(":
            expect("(")
            skip_ws()
            m = re.match(r"[+-]?\d+", text[pos:])
            if not m:
                raise RuleError(f"expected an integer argument at offset {pos} in {text!r}")
            arg = int(m.group(0))
            pos += len(m.group(0))
            expect(")")
            return DslRule(name, arg)
        return DslRule(name)

    def expect(ch: str):
        nonlocal pos
        skip_ws()
        if pos >= len(text) or text[pos] != ch:
            raise RuleError(f"expected {ch!r} at offset {pos} in {text!r}")
        pos += 1

    result = parse_expr()
    skip_ws()
    if pos != len(text):
        raise RuleError(f"trailing input at offset {pos} in {text!r}")
    return result


_NL_PLAIN = {
    "identity": "keep the list unchanged",
    "reverse": "reverse the list",
    "sort-asc": "sort the list in ascending order",
    "sort-desc": "sort the list in descending order",
    "filter-even": "keep only the even numbers",
    "filter-odd": "keep only the odd numbers",
}
_NL_ARG = {
    "take": "keep only the first {} elements",
    "drop": "remove the first {} elements",
    "repeat-each": "repeat each element {} times",
    "append-const": "append {} to the end of the list",
    "remove-value": "remove every occurrence of {}",
    "map-add": "add {} to every element",
}
_NL_ARG_RE = [
    (op, re.compile("^" + template.replace("{}", r"([+-]?\d+)") + "$"))
    for op, template in _NL_ARG.items()
]
_CLAUSE_SEP = ", then "


def render_rule_text(r: DslRule) -> str:
    """Deterministic natural-language rendering; composed rules read left to right."""
    clauses = []
    for leaf in rule_leaves(r):
        if leaf.op in _NL_PLAIN:
            clauses.append(_NL_PLAIN[leaf.op])
        else:
            clauses.append(_NL_ARG[leaf.op].format(leaf.arg))
    return _CLAUSE_SEP.join(clauses)


def parse_rule_text(text: str) -> DslRule | None:
    """Parse a natural-language rendering; None if any clause is unrecognized."""
    clauses = text.strip().split(_CLAUSE_SEP)
    if len(clauses) > MAX_RULE_SIZE:
        return None
    parsed: DslRule | None = None
    for clause in clauses:
        clause = clause.strip()
        leaf = None
        for op, nl in _NL_PLAIN.items():
            if clause == nl:
                leaf = DslRule(op)
                break
        if leaf is None:
            for op, pattern in _NL_ARG_RE:
                m = pattern.match(clause)
                if m:
                    arg = int(m.group(1))
                    if op in _COUNT_OPS and arg < 0:
                        return None
                    leaf = DslRule(op, arg)
                    break
        if leaf is None:
            return None
        parsed = leaf if parsed is None else compose(parsed, leaf)
    return parsed


def _prf(*parts) -> random.Random:
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def task_key(task: IclTask) -> str:
    """Digest of the rendered demonstrations; identifies a task to the mock teacher."""
    return hashlib.sha256(render_examples(task.demonstrations).encode("utf-8")).hexdigest()


def random_rule(rng: random.Random, max_size: int) -> DslRule:
    if not 1 <= max_size <= MAX_RULE_SIZE:
        raise RuleError(f"max_size must be within [1, {MAX_RULE_SIZE}]")
    size = rng.randint(1, max_size)
    built = _random_leaf(rng)
    for _ in range(size - 1):
        built = compose(built, _random_leaf(rng))
    return built


def _random_leaf(rng: random.Random) -> DslRule:
    op = rng.choice(_PLAIN_OPS + _COUNT_OPS + _VALUE_OPS)
    if op in _COUNT_OPS:
        return DslRule(op, rng.randint(0, 4))
    if op in _VALUE_OPS:
        return DslRule(op, rng.randint(-9, 9))
    return DslRule(op)


def _random_input(rng: random.Random) -> list[int]:
    return [rng.randint(-9, 9) for _ in range(rng.randint(1, 6))]


def generate_task(seed: int, rule_depth: int, n_demos: int, n_tests: int) -> tuple[IclTask, DslRule]:
    """Deterministically generate one list task together with its ground-truth rule."""
    if n_demos < 1:
        raise RuleError("n_demos must be >= 1")
    rng = random.Random(seed)
    true_rule = random_rule(rng, rule_depth)
    inputs = [_random_input(rng) for _ in range(n_demos + n_tests)]
    # Guarantee at least two distinct inputs whenever there is room for them.
    if len(inputs) >= 2 and all(x == inputs[0] for x in inputs):
        inputs[1] = inputs[1] + [rng.randint(-9, 9)]
    examples = [
        Example(TaskValue.int_list(x), TaskValue.int_list(eval_rule(true_rule, x)))
        for x in inputs
    ]
    task = IclTask(
        task_id=f"dsl-{seed}",
        family=LIST_FUNCTION,
        demonstrations=tuple(examples[:n_demos]),
        tests=tuple(examples[n_demos:]),
    )
    return task, true_rule


def generate_task_suite(
    seed: int, count: int, rule_depth: int, n_demos: int, n_tests: int
) -> list[tuple[IclTask, DslRule]]:
    """Generate `count` tasks with unique ids and unique demonstration sets."""
    rng = random.Random(seed)
    suite: list[tuple[IclTask, DslRule]] = []
    seen_keys: set[str] = set()
    for index in range(count):
        while True:
            task, true_rule = generate_task(rng.randrange(2**32), rule_depth, n_demos, n_tests)
            key = task_key(task)
            if key not in seen_keys:
                break
        seen_keys.add(key)
        task = IclTask(
            task_id=f"dsl-{seed:04d}-{index:04d}",
            family=task.family,
            demonstrations=task.demonstrations,
            tests=task.tests,
        )
        suite.append((task, true_rule))
    return suite


@dataclass(frozen=True)
class MockTeacherConfig:
    """Deterministic noisy-teacher knobs; a fixed seed fixes all behavior."""

    correct_rule_probability: float = 1.0
    follow_error_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("correct_rule_probability", "follow_error_rate"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise RuleError(f"{name} must be within [0, 1]: {p}")


def _mutate(r: DslRule, rng: random.Random) -> DslRule:
    """One random structural edit; retries edits rejected by rule validation."""
    for _ in range(20):
        try:
            candidate = _mutate_once(r, rng)
        except RuleError:
            continue
        if candidate != r:
            return candidate
    return _random_leaf(rng)


def _mutate_once(r: DslRule, rng: random.Random) -> DslRule:
    if r.op == COMPOSE and rng.random() < 0.6:
        which = rng.randrange(2)
        children = list(r.children)
        children[which] = _mutate_once(children[which], rng)
        return DslRule(COMPOSE, None, tuple(children))
    choice = rng.random()
    if r.arg is not None and choice < 0.4:
        new_arg = r.arg + rng.choice([-1, 1])
        if r.op in _COUNT_OPS and new_arg < 0:
            new_arg = r.arg + 1
        return DslRule(r.op, new_arg)
    if choice < 0.8:
        return _random_leaf(rng)
    extra = _random_leaf(rng)
    return compose(r, extra) if rng.random() < 0.5 else compose(extra, r)


def perturb_rule(true_rule: DslRule, demo_inputs: list[list[int]], rng: random.Random) -> DslRule:
    """A rule that renders differently from the true rule and disagrees with it on
    at least one demonstration input (so its noise-free fitness is < n)."""
    true_text = render_rule_text(true_rule)

    def acceptable(candidate: DslRule) -> bool:
        if render_rule_text(candidate) == true_text:
            return False
        return any(
            eval_rule(candidate, x) != eval_rule(true_rule, x) for x in demo_inputs
        )

    for _ in range(40):
        candidate = _mutate(true_rule, rng)
        if acceptable(candidate):
            return candidate
    # append-const(c) and append-const(c') disagree with each other on every
    # input, so at most one c can coincide with the true rule on all demos.
    for c in range(10):
        candidate = DslRule("append-const", c)
        if acceptable(candidate):
            return candidate
    raise RuleError("could not construct a distinguishable perturbation")  # pragma: no cover


def mock_teacher_generate(
    task: IclTask, true_rule: DslRule, m: int, config: MockTeacherConfig
) -> list[str]:
    """m deterministic hypothesis texts: the true rule's rendering with probability
    correct_rule_probability, otherwise a demonstration-distinguishable perturbation."""
    if m < 1:
        raise RuleError("m must be >= 1")
    demo_inputs = [list(ex.input.payload) for ex in task.demonstrations]
    key = task_key(task)
    texts = []
    for j in range(m):
        rng = _prf(config.seed, "generate", key, j)
        if rng.random() < config.correct_rule_probability:
            texts.append(render_rule_text(true_rule))
        else:
            texts.append(render_rule_text(perturb_rule(true_rule, demo_inputs, rng)))
    return texts


def mock_teacher_follow(
    rule_text: str, input_value: TaskValue, config: MockTeacherConfig
) -> TaskValue | ParseFailure:
    """Apply a rendered rule to an input; with probability follow_error_rate the
    output has one element perturbed. Deterministic in (seed, rule text, input)."""
    parsed = parse_rule_text(rule_text)
    if parsed is None:
        return ParseFailure(rule_text)
    out = eval_rule(parsed, list(input_value.payload))
    rng = _prf(config.seed, "follow", rule_text, render_value(input_value))
    if config.follow_error_rate > 0 and rng.random() < config.follow_error_rate:
        if out:
            idx = rng.randrange(len(out))
            out[idx] += rng.choice([-2, -1, 1, 2])
        else:
            out = [rng.randint(-9, 9)]
    return TaskValue.int_list(out)
