"""Declarative pipeline configuration.

One YAML file defines datasets (files or generated mock suites), backends,
and the knobs for every stage. Validation failures name the offending key.
Secrets never live in the file: live backends name an environment variable
instead of carrying a key.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .corpus import DEFAULT_MARGINS
from .inference import MODE_HS, MODE_IO
from .tasks import FAMILIES

_REQUIRED = object()


class ConfigError(Exception):
    """Invalid configuration; the message names the offending key."""


def _typename(expected) -> str:
    if isinstance(expected, tuple):
        return " or ".join(t.__name__ for t in expected)
    return expected.__name__


def _get(mapping: dict, key: str, expected, default=_REQUIRED, path: str = ""):
    where = f"{path}.{key}" if path else key
    if key not in mapping:
        if default is _REQUIRED:
            raise ConfigError(f"missing required key: {where}")
        return default
    value = mapping[key]
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, expected) or (expected in (int, float) and isinstance(value, bool)):
        raise ConfigError(f"{where}: expected {_typename(expected)}, got {type(value).__name__}")
    return value


def _check_keys(mapping: dict, allowed, path: str):
    unknown = set(mapping) - set(allowed)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {sorted(unknown)}")


@dataclass(frozen=True)
class GenerateSpec:
    seed: int
    count: int
    rule_depth: int = 2
    n_demos: int = 4
    n_tests: int = 2


@dataclass(frozen=True)
class DatasetSource:
    family: str
    path: Path | None = None
    generate: GenerateSpec | None = None


@dataclass(frozen=True)
class BackendSpec:
    name: str
    type: str
    base_url: str = ""
    api_key_env: str = "OPENAI_API_KEY"
    path: Path | None = None
    seed: int = 0
    correct_rule_probability: float = 1.0
    follow_error_rate: float = 0.0


@dataclass(frozen=True)
class DecodingSpec:
    temperature: float
    top_p: float = 1.0


@dataclass(frozen=True)
class AugmentSettings:
    backend: str
    model: str = "teacher"
    m: int = 50
    rule_gen: DecodingSpec = DecodingSpec(0.9, 1.0)
    rule_follow: DecodingSpec = DecodingSpec(0.7, 1.0)
    max_tokens: int = 1024


@dataclass(frozen=True)
class CorpusSettings:
    format: str = "chat"
    dedup_rule_following: bool = False
    margins: dict = field(default_factory=lambda: dict(DEFAULT_MARGINS))


@dataclass(frozen=True)
class InferSettings:
    rg_backend: str
    rf_backend: str
    run_id: str = "run"
    mode: str = MODE_HS
    m: int = 10
    model: str = "student"
    rule_gen: DecodingSpec = DecodingSpec(0.9, 1.0)
    rule_follow: DecodingSpec = DecodingSpec(0.7, 1.0)
    io: DecodingSpec = DecodingSpec(0.7, 1.0)
    max_tokens: int = 1024
    method_label: str = ""
    tuning_label: str = "none"


@dataclass(frozen=True)
class EvalSettings:
    runs: tuple[str, ...] = ()
    bootstrap_seed: int = 0
    tokens: str = "total"


@dataclass(frozen=True)
class ToySettings:
    objective: str = "orpo"
    steps: int = 200
    step_size: float = 0.5
    seed: int = 3
    vocab_size: int = 8
    context_width: int = 2
    n_train: int = 64
    n_heldout: int = 64
    orpo_weight: float = 1.0
    beta: float = 0.1
    length_normalize: bool = True


@dataclass(frozen=True)
class SweepSettings:
    m_values: tuple[int, ...] = (1, 3, 5, 7, 10)
    rg_temperatures: tuple[float, ...] = ()
    rf_temperatures: tuple[float, ...] = ()


@dataclass(frozen=True)
class PipelineConfig:
    source_path: Path
    output_dir: Path
    cache_dir: Path | None
    max_in_flight: int
    datasets: tuple[DatasetSource, ...]
    split_fraction: float
    split_seed: int
    backends: dict[str, BackendSpec]
    augmentation: AugmentSettings | None
    corpus: CorpusSettings
    inference: InferSettings | None
    eval: EvalSettings
    toy: ToySettings
    sweep: SweepSettings
    templates_path: Path | None

    def backend(self, name: str) -> BackendSpec:
        try:
            return self.backends[name]
        except KeyError:
            raise ConfigError(f"backend {name!r} is not defined under 'backends'") from None


def _parse_decoding(raw: dict, path: str, default: DecodingSpec) -> DecodingSpec:
    if raw is None:
        return default
    _check_keys(raw, ("temperature", "top_p"), path)
    return DecodingSpec(
        temperature=_get(raw, "temperature", float, default.temperature, path),
        top_p=_get(raw, "top_p", float, default.top_p, path),
    )


def _parse_dataset(raw: dict, index: int, base: Path) -> DatasetSource:
    path = f"datasets[{index}]"
    _check_keys(raw, ("family", "path", "generate"), path)
    family = _get(raw, "family", str, path=path)
    if family not in FAMILIES:
        raise ConfigError(f"{path}.family: unknown family {family!r}")
    if ("path" in raw) == ("generate" in raw):
        raise ConfigError(f"{path}: exactly one of 'path' or 'generate' is required")
    if "path" in raw:
        return DatasetSource(family=family, path=base / _get(raw, "path", str, path=path))
    gen_raw = _get(raw, "generate", dict, path=path)
    gpath = f"{path}.generate"
    _check_keys(gen_raw, ("seed", "count", "rule_depth", "n_demos", "n_tests"), gpath)
    spec = GenerateSpec(
        seed=_get(gen_raw, "seed", int, path=gpath),
        count=_get(gen_raw, "count", int, path=gpath),
        rule_depth=_get(gen_raw, "rule_depth", int, 2, gpath),
        n_demos=_get(gen_raw, "n_demos", int, 4, gpath),
        n_tests=_get(gen_raw, "n_tests", int, 2, gpath),
    )
    if spec.count < 1:
        raise ConfigError(f"{gpath}.count must be >= 1")
    return DatasetSource(family=family, generate=spec)


def _parse_backend(name: str, raw: dict, base: Path) -> BackendSpec:
    path = f"backends.{name}"
    kind = _get(raw, "type", str, path=path)
    if kind == "http":
        _check_keys(raw, ("type", "base_url", "api_key_env"), path)
        return BackendSpec(
            name=name,
            type=kind,
            base_url=_get(raw, "base_url", str, path=path),
            api_key_env=_get(raw, "api_key_env", str, "OPENAI_API_KEY", path),
        )
    if kind == "scripted":
        _check_keys(raw, ("type", "path"), path)
        return BackendSpec(name=name, type=kind, path=base / _get(raw, "path", str, path=path))
    if kind == "dsl-mock":
        _check_keys(
            raw, ("type", "seed", "correct_rule_probability", "follow_error_rate"), path
        )
        return BackendSpec(
            name=name,
            type=kind,
            seed=_get(raw, "seed", int, 0, path),
            correct_rule_probability=_get(raw, "correct_rule_probability", float, 1.0, path),
            follow_error_rate=_get(raw, "follow_error_rate", float, 0.0, path),
        )
    raise ConfigError(f"{path}.type: unknown backend type {kind!r}")


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    base = path.parent

    _check_keys(
        raw,
        (
            "output_dir",
            "cache_dir",
            "max_in_flight",
            "datasets",
            "split",
            "backends",
            "augmentation",
            "corpus",
            "inference",
            "eval",
            "toy_train",
            "sweep",
            "templates_path",
        ),
        "",
    )

    datasets_raw = _get(raw, "datasets", list, [], "")
    datasets = tuple(
        _parse_dataset(_require_map(item, f"datasets[{i}]"), i, base)
        for i, item in enumerate(datasets_raw)
    )

    split_raw = _get(raw, "split", dict, {}, "")
    _check_keys(split_raw, ("test_fraction", "seed"), "split")
    split_fraction = _get(split_raw, "test_fraction", float, 0.1, "split")
    if not 0.0 <= split_fraction <= 1.0:
        raise ConfigError("split.test_fraction must be within [0, 1]")
    split_seed = _get(split_raw, "seed", int, 0, "split")

    backends_raw = _get(raw, "backends", dict, {}, "")
    backends = {
        name: _parse_backend(name, _require_map(spec, f"backends.{name}"), base)
        for name, spec in backends_raw.items()
    }

    augmentation = None
    if "augmentation" in raw:
        aug_raw = _get(raw, "augmentation", dict, path="")
        apath = "augmentation"
        _check_keys(
            aug_raw, ("backend", "model", "m", "rule_gen", "rule_follow", "max_tokens"), apath
        )
        augmentation = AugmentSettings(
            backend=_get(aug_raw, "backend", str, path=apath),
            model=_get(aug_raw, "model", str, "teacher", apath),
            m=_get(aug_raw, "m", int, 50, apath),
            rule_gen=_parse_decoding(aug_raw.get("rule_gen"), f"{apath}.rule_gen", DecodingSpec(0.9, 1.0)),
            rule_follow=_parse_decoding(aug_raw.get("rule_follow"), f"{apath}.rule_follow", DecodingSpec(0.7, 1.0)),
            max_tokens=_get(aug_raw, "max_tokens", int, 1024, apath),
        )
        if augmentation.m < 1:
            raise ConfigError("augmentation.m must be >= 1")
        if augmentation.backend not in backends:
            raise ConfigError(f"augmentation.backend: backend {augmentation.backend!r} is not defined")

    corpus_raw = _get(raw, "corpus", dict, {}, "")
    _check_keys(corpus_raw, ("format", "dedup_rule_following", "margins"), "corpus")
    margins = dict(DEFAULT_MARGINS)
    margins_raw = _get(corpus_raw, "margins", dict, {}, "corpus")
    for family, d in margins_raw.items():
        if family not in FAMILIES:
            raise ConfigError(f"corpus.margins: unknown family {family!r}")
        if not isinstance(d, int) or isinstance(d, bool) or d < 0:
            raise ConfigError(f"corpus.margins.{family}: expected an integer >= 0")
        margins[family] = d
    corpus = CorpusSettings(
        format=_get(corpus_raw, "format", str, "chat", "corpus"),
        dedup_rule_following=_get(corpus_raw, "dedup_rule_following", bool, False, "corpus"),
        margins=margins,
    )
    if corpus.format not in ("chat", "plain"):
        raise ConfigError(f"corpus.format: unknown format {corpus.format!r}")

    inference = None
    if "inference" in raw:
        inf_raw = _get(raw, "inference", dict, path="")
        ipath = "inference"
        _check_keys(
            inf_raw,
            (
                "run_id",
                "mode",
                "m",
                "rg_backend",
                "rf_backend",
                "model",
                "rule_gen",
                "rule_follow",
                "io",
                "max_tokens",
                "method_label",
                "tuning_label",
            ),
            ipath,
        )
        mode = _get(inf_raw, "mode", str, MODE_HS, ipath)
        if mode not in (MODE_IO, MODE_HS):
            raise ConfigError(f"inference.mode: unknown mode {mode!r}")
        rg_backend = _get(inf_raw, "rg_backend", str, path=ipath)
        inference = InferSettings(
            run_id=_get(inf_raw, "run_id", str, "run", ipath),
            mode=mode,
            m=_get(inf_raw, "m", int, 10, ipath),
            rg_backend=rg_backend,
            rf_backend=_get(inf_raw, "rf_backend", str, rg_backend, ipath),
            model=_get(inf_raw, "model", str, "student", ipath),
            rule_gen=_parse_decoding(inf_raw.get("rule_gen"), f"{ipath}.rule_gen", DecodingSpec(0.9, 1.0)),
            rule_follow=_parse_decoding(inf_raw.get("rule_follow"), f"{ipath}.rule_follow", DecodingSpec(0.7, 1.0)),
            io=_parse_decoding(inf_raw.get("io"), f"{ipath}.io", DecodingSpec(0.7, 1.0)),
            max_tokens=_get(inf_raw, "max_tokens", int, 1024, ipath),
            method_label=_get(inf_raw, "method_label", str, mode, ipath),
            tuning_label=_get(inf_raw, "tuning_label", str, "none", ipath),
        )
        for backend_name, key in ((inference.rg_backend, "rg_backend"), (inference.rf_backend, "rf_backend")):
            if backend_name not in backends:
                raise ConfigError(f"inference.{key}: backend {backend_name!r} is not defined")
        if inference.m < 1:
            raise ConfigError("inference.m must be >= 1")

    eval_raw = _get(raw, "eval", dict, {}, "")
    _check_keys(eval_raw, ("runs", "bootstrap_seed", "tokens"), "eval")
    eval_settings = EvalSettings(
        runs=tuple(_get(eval_raw, "runs", list, [], "eval")),
        bootstrap_seed=_get(eval_raw, "bootstrap_seed", int, 0, "eval"),
        tokens=_get(eval_raw, "tokens", str, "total", "eval"),
    )
    if eval_settings.tokens not in ("total", "prompt", "completion"):
        raise ConfigError(f"eval.tokens: unknown convention {eval_settings.tokens!r}")

    toy_raw = _get(raw, "toy_train", dict, {}, "")
    _check_keys(
        toy_raw,
        (
            "objective",
            "steps",
            "step_size",
            "seed",
            "vocab_size",
            "context_width",
            "n_train",
            "n_heldout",
            "orpo_weight",
            "beta",
            "length_normalize",
        ),
        "toy_train",
    )
    toy = ToySettings(
        objective=_get(toy_raw, "objective", str, "orpo", "toy_train"),
        steps=_get(toy_raw, "steps", int, 200, "toy_train"),
        step_size=_get(toy_raw, "step_size", float, 0.5, "toy_train"),
        seed=_get(toy_raw, "seed", int, 3, "toy_train"),
        vocab_size=_get(toy_raw, "vocab_size", int, 8, "toy_train"),
        context_width=_get(toy_raw, "context_width", int, 2, "toy_train"),
        n_train=_get(toy_raw, "n_train", int, 64, "toy_train"),
        n_heldout=_get(toy_raw, "n_heldout", int, 64, "toy_train"),
        orpo_weight=_get(toy_raw, "orpo_weight", float, 1.0, "toy_train"),
        beta=_get(toy_raw, "beta", float, 0.1, "toy_train"),
        length_normalize=_get(toy_raw, "length_normalize", bool, True, "toy_train"),
    )
    if toy.objective not in ("sft", "orpo", "dpo", "kto"):
        raise ConfigError(f"toy_train.objective: unknown objective {toy.objective!r}")

    sweep_raw = _get(raw, "sweep", dict, {}, "")
    _check_keys(sweep_raw, ("m_values", "rg_temperatures", "rf_temperatures"), "sweep")
    sweep = SweepSettings(
        m_values=tuple(_get(sweep_raw, "m_values", list, [1, 3, 5, 7, 10], "sweep")),
        rg_temperatures=tuple(_get(sweep_raw, "rg_temperatures", list, [], "sweep")),
        rf_temperatures=tuple(_get(sweep_raw, "rf_temperatures", list, [], "sweep")),
    )
    for m in sweep.m_values:
        if not isinstance(m, int) or isinstance(m, bool) or m < 1:
            raise ConfigError(f"sweep.m_values: entries must be integers >= 1, got {m!r}")

    templates_path = raw.get("templates_path")
    output_dir = base / _get(raw, "output_dir", str, "out", "")
    cache_dir = raw.get("cache_dir")
    return PipelineConfig(
        source_path=path,
        output_dir=output_dir,
        cache_dir=base / cache_dir if cache_dir is not None else None,
        max_in_flight=_get(raw, "max_in_flight", int, 8, ""),
        datasets=datasets,
        split_fraction=split_fraction,
        split_seed=split_seed,
        backends=backends,
        augmentation=augmentation,
        corpus=corpus,
        inference=inference,
        eval=eval_settings,
        toy=toy,
        sweep=sweep,
        templates_path=base / templates_path if templates_path is not None else None,
    )


def _require_map(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return value


def config_digest(path: str | Path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def file_digest(path: str | Path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
