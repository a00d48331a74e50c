"""Command-line pipeline driver.

    indistill <augment|build-corpus|infer|eval|toy-train|sweep> --config <file> [--out <dir>]

Each command reads one declarative YAML config, writes its artifacts under the
output directory, and drops a manifest (config digest, input digests, tool
version, network-call count) next to them. Commands are idempotent given a
warm completion cache, and a dsl-mock config runs the whole pipeline with
zero network calls. Exit codes: 0 success, 2 config error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import __version__, dsl, metrics
from .augment import (
    AugmentationConfig,
    AugmentationError,
    augment_dataset,
    load_scored_table,
    save_scored_table,
)
from .config import ConfigError, PipelineConfig, file_digest, load_config
from .corpus import (
    CorpusConfig,
    CorpusError,
    build_io_fewshot,
    build_pref,
    build_sft_rf,
    build_sft_rg,
    corpus_stats,
    emit_corpus,
    write_stats,
)
from .gateway import (
    BackendConfigError,
    DslMockBackend,
    Gateway,
    GatewayError,
    HttpBackend,
    HttpBackendConfig,
    ScriptedBackend,
)
from .inference import (
    DecodingParams,
    InferenceConfig,
    load_results,
    run_tasks,
    save_results,
    sweep as run_sweep,
)
from .losses import (
    LabeledRecord,
    LossConfig,
    SequenceRecord,
    ToyModel,
    ranking_accuracy,
    synthetic_preference_corpus,
    train_toy,
)
from .tasks import (
    DEFAULT_TEMPLATES,
    DatasetError,
    TaskError,
    load_dataset,
    load_templates,
    save_dataset,
    split_tasks,
)


class StageFailure(RuntimeError):
    """A pipeline stage failed after configuration was accepted."""


def _resolve_datasets(config: PipelineConfig):
    """Materialize every dataset source; returns (per-source task lists, mock suite)."""
    per_source = []
    suite = []
    for source in config.datasets:
        if source.path is not None:
            tasks = load_dataset(source.family, source.path)
        else:
            gen = source.generate
            pairs = dsl.generate_task_suite(
                gen.seed, gen.count, gen.rule_depth, gen.n_demos, gen.n_tests
            )
            suite.extend(pairs)
            tasks = [task for task, _ in pairs]
        per_source.append(tasks)
    return per_source, suite


def _split_all(config: PipelineConfig, per_source):
    train, test = [], []
    for tasks in per_source:
        tr, te = split_tasks(tasks, config.split_fraction, config.split_seed)
        train.extend(tr)
        test.extend(te)
    return train, test


def _templates(config: PipelineConfig):
    if config.templates_path is not None:
        return load_templates(config.templates_path)
    return dict(DEFAULT_TEMPLATES)


def _build_gateway(config: PipelineConfig, backend_name: str, suite) -> Gateway:
    spec = config.backend(backend_name)
    if spec.type == "http":
        backend = HttpBackend(HttpBackendConfig(base_url=spec.base_url, api_key_env=spec.api_key_env))
    elif spec.type == "scripted":
        backend = ScriptedBackend.from_file(spec.path)
    else:
        if not suite:
            raise ConfigError(
                f"backends.{backend_name}: dsl-mock requires at least one generated dataset"
            )
        backend = DslMockBackend(
            suite,
            dsl.MockTeacherConfig(
                correct_rule_probability=spec.correct_rule_probability,
                follow_error_rate=spec.follow_error_rate,
                seed=spec.seed,
            ),
        )
    return Gateway(backend, cache_dir=config.cache_dir)


def _input_digests(config: PipelineConfig, extra_paths=()) -> dict[str, str]:
    digests = {str(config.source_path): file_digest(config.source_path)}
    for source in config.datasets:
        if source.path is not None:
            digests[str(source.path)] = file_digest(source.path)
    for path in extra_paths:
        digests[str(path)] = file_digest(path)
    return digests


def _write_manifest(config: PipelineConfig, command: str, out_dir: Path, gateways=(), extra_inputs=()):
    manifest = {
        "tool": "indistill",
        "version": __version__,
        "command": command,
        "config_digest": file_digest(config.source_path),
        "inputs": _input_digests(config, extra_inputs),
        "network_calls": sum(g.network_calls for g in gateways),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


def _out_dir(config: PipelineConfig, override: str | None, stage: str) -> Path:
    root = Path(override) if override else config.output_dir
    out = root / stage
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_augment(config: PipelineConfig, out_override: str | None = None) -> Path:
    if config.augmentation is None:
        raise ConfigError("missing required section: augmentation")
    per_source, suite = _resolve_datasets(config)
    train, test = _split_all(config, per_source)
    if not train:
        raise StageFailure("no training tasks after the split")
    gateway = _build_gateway(config, config.augmentation.backend, suite)
    aug = config.augmentation
    aug_config = AugmentationConfig(
        m=aug.m,
        model=aug.model,
        rule_gen_temperature=aug.rule_gen.temperature,
        rule_gen_top_p=aug.rule_gen.top_p,
        rule_follow_temperature=aug.rule_follow.temperature,
        rule_follow_top_p=aug.rule_follow.top_p,
        max_tokens=aug.max_tokens,
        max_in_flight=config.max_in_flight,
    )
    table = augment_dataset(train, _templates(config), aug_config, gateway)
    out = _out_dir(config, out_override, "augment")
    save_scored_table(table, out / "scored.jsonl")
    save_dataset(train, out / "train_tasks.jsonl")
    save_dataset(test, out / "test_tasks.jsonl")
    _write_manifest(config, "augment", out, gateways=[gateway])
    return out


def cmd_build_corpus(config: PipelineConfig, out_override: str | None = None) -> Path:
    per_source, _ = _resolve_datasets(config)
    train, _ = _split_all(config, per_source)
    root = Path(out_override) if out_override else config.output_dir
    table_path = root / "augment" / "scored.jsonl"
    if not table_path.exists():
        raise StageFailure(f"scored table not found at {table_path}; run 'augment' first")
    table = load_scored_table(table_path, train)
    templates = _templates(config)
    corpus_config = CorpusConfig(
        margins=dict(config.corpus.margins),
        dedup_rule_following=config.corpus.dedup_rule_following,
    )
    rg = build_sft_rg(table, templates, corpus_config)
    rf = build_sft_rf(table, templates, corpus_config)
    pref = build_pref(table, templates, corpus_config)
    io = build_io_fewshot(train, templates)
    out = _out_dir(config, out_override, "corpus")
    fmt = config.corpus.format
    emit_corpus(rg + rf, out / "sft.jsonl", fmt)
    emit_corpus(pref, out / "pref.jsonl", fmt)
    emit_corpus(io, out / "io.jsonl", fmt)
    write_stats(corpus_stats(rg + rf + pref + io), out / "stats.json")
    _write_manifest(config, "build-corpus", out, extra_inputs=[table_path])
    return out


def cmd_infer(config: PipelineConfig, out_override: str | None = None) -> Path:
    if config.inference is None:
        raise ConfigError("missing required section: inference")
    per_source, suite = _resolve_datasets(config)
    _, test = _split_all(config, per_source)
    if not test:
        raise StageFailure("no test tasks after the split")
    inf = config.inference
    rg_gateway = _build_gateway(config, inf.rg_backend, suite)
    rf_gateway = (
        rg_gateway
        if inf.rf_backend == inf.rg_backend
        else _build_gateway(config, inf.rf_backend, suite)
    )
    inference_config = InferenceConfig(
        mode=inf.mode,
        m=inf.m,
        model=inf.model,
        rule_gen=DecodingParams(inf.rule_gen.temperature, inf.rule_gen.top_p),
        rule_follow=DecodingParams(inf.rule_follow.temperature, inf.rule_follow.top_p),
        io=DecodingParams(inf.io.temperature, inf.io.top_p),
        max_tokens=inf.max_tokens,
        max_in_flight=config.max_in_flight,
    )
    results = run_tasks(test, _templates(config), inference_config, rg_gateway, rf_gateway)
    out = _out_dir(config, out_override, "infer") / inf.run_id
    out.mkdir(parents=True, exist_ok=True)
    save_results(results, out / "results.jsonl")
    _write_manifest(config, "infer", out, gateways=[rg_gateway, rf_gateway])
    return out


def cmd_eval(config: PipelineConfig, out_override: str | None = None) -> Path:
    root = Path(out_override) if out_override else config.output_dir
    run_ids = list(config.eval.runs)
    if not run_ids and config.inference is not None:
        run_ids = [config.inference.run_id]
    if not run_ids:
        raise ConfigError("eval.runs is empty and no inference section is present")
    out = _out_dir(config, out_override, "eval")
    reports = []
    result_paths = []
    for run_id in run_ids:
        results_path = root / "infer" / run_id / "results.jsonl"
        if not results_path.exists():
            raise StageFailure(f"results not found at {results_path}; run 'infer' first")
        result_paths.append(results_path)
        results = load_results(results_path)
        if not results:
            raise StageFailure(f"no results in {results_path}")
        method = results[0].mode
        tuning = "none"
        if config.inference is not None and run_id == config.inference.run_id:
            method = config.inference.method_label
            tuning = config.inference.tuning_label
        report = metrics.build_report(
            run_id,
            results,
            method=method,
            tuning=tuning,
            config={"run_id": run_id},
            bootstrap_seed=config.eval.bootstrap_seed,
            tokens=config.eval.tokens,
        )
        metrics.save_report(report, out / f"report-{run_id}.json")
        reports.append(report)
    text, rows = metrics.compare_runs(reports)
    (out / "comparison.txt").write_text(text, encoding="utf-8")
    with open(out / "comparison.json", "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")
    _write_manifest(config, "eval", out, extra_inputs=result_paths)
    return out


def cmd_toy_train(config: PipelineConfig, out_override: str | None = None) -> Path:
    toy = config.toy
    train_pairs, heldout_pairs = synthetic_preference_corpus(
        seed=toy.seed,
        n_train=toy.n_train,
        n_heldout=toy.n_heldout,
        vocab_size=toy.vocab_size,
        width=toy.context_width,
    )
    if toy.objective == "sft":
        records = [SequenceRecord(p.context, p.chosen) for p in train_pairs]
    elif toy.objective == "kto":
        records = [LabeledRecord(p.context, p.chosen, True) for p in train_pairs] + [
            LabeledRecord(p.context, p.rejected, False) for p in train_pairs
        ]
    else:
        records = list(train_pairs)
    loss_config = LossConfig(
        orpo_weight=toy.orpo_weight,
        beta=toy.beta,
        length_normalize=toy.length_normalize,
    )
    model = ToyModel.uniform(toy.vocab_size, toy.context_width)
    initial_ranking = ranking_accuracy(model, heldout_pairs, loss_config)
    trained, trace = train_toy(
        model, records, toy.objective, toy.steps, toy.step_size, loss_config
    )
    final_ranking = ranking_accuracy(trained, heldout_pairs, loss_config)

    out = _out_dir(config, out_override, "toy-train")
    with open(out / "trace.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "mean_log_odds_ratio"])
        for entry in trace:
            writer.writerow(
                [
                    entry.step,
                    f"{entry.loss:.10g}",
                    "" if entry.mean_log_odds_ratio is None else f"{entry.mean_log_odds_ratio:.10g}",
                ]
            )
    ranking = {
        "objective": toy.objective,
        "steps": toy.steps,
        "heldout_pairs": len(heldout_pairs),
        "initial_loss": trace[0].loss if trace else None,
        "final_loss": trace[-1].loss if trace else None,
        "initial_mean_log_odds_ratio": trace[0].mean_log_odds_ratio if trace else None,
        "final_mean_log_odds_ratio": trace[-1].mean_log_odds_ratio if trace else None,
        "initial_ranking_accuracy": initial_ranking,
        "final_ranking_accuracy": final_ranking,
    }
    with open(out / "ranking.json", "w", encoding="utf-8") as fh:
        json.dump(ranking, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")
    _write_manifest(config, "toy-train", out)
    return out


def cmd_sweep(config: PipelineConfig, out_override: str | None = None) -> Path:
    if config.inference is None:
        raise ConfigError("missing required section: inference")
    per_source, suite = _resolve_datasets(config)
    _, test = _split_all(config, per_source)
    if not test:
        raise StageFailure("no test tasks after the split")
    inf = config.inference
    rg_gateway = _build_gateway(config, inf.rg_backend, suite)
    rf_gateway = (
        rg_gateway
        if inf.rf_backend == inf.rg_backend
        else _build_gateway(config, inf.rf_backend, suite)
    )
    base = InferenceConfig(
        mode="hypothesis-search",
        m=max(config.sweep.m_values),
        model=inf.model,
        rule_gen=DecodingParams(inf.rule_gen.temperature, inf.rule_gen.top_p),
        rule_follow=DecodingParams(inf.rule_follow.temperature, inf.rule_follow.top_p),
        io=DecodingParams(inf.io.temperature, inf.io.top_p),
        max_tokens=inf.max_tokens,
        max_in_flight=config.max_in_flight,
    )
    points = run_sweep(
        test,
        _templates(config),
        base,
        rg_gateway,
        config.sweep.m_values,
        rg_temperatures=config.sweep.rg_temperatures or None,
        rf_temperatures=config.sweep.rf_temperatures or None,
        rf_gateway=rf_gateway,
    )
    out = _out_dir(config, out_override, "sweep")
    grid = []
    for point in points:
        name = f"results-m{point.m}-rg{point.rg_temperature}-rf{point.rf_temperature}.jsonl"
        save_results(point.results, out / name)
        acc, se = metrics.accuracy(point.results, bootstrap_seed=config.eval.bootstrap_seed)
        grid.append(
            {
                "m": point.m,
                "rg_temperature": point.rg_temperature,
                "rf_temperature": point.rf_temperature,
                "accuracy": acc,
                "se": se,
                "avg_tokens_per_output": metrics.avg_tokens_per_output(point.results),
                "cp": metrics.cp_ratio(point.results),
                "results_file": name,
            }
        )
    with open(out / "grid.json", "w", encoding="utf-8") as fh:
        json.dump(grid, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")
    _write_manifest(config, "sweep", out, gateways=[rg_gateway, rf_gateway])
    return out


COMMANDS = {
    "augment": cmd_augment,
    "build-corpus": cmd_build_corpus,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "toy-train": cmd_toy_train,
    "sweep": cmd_sweep,
}


def _write_failure(config: PipelineConfig | None, out_override: str | None, command: str, exc: Exception):
    if config is None:
        return
    try:
        root = Path(out_override) if out_override else config.output_dir
        root.mkdir(parents=True, exist_ok=True)
        with open(root / "failure.json", "w", encoding="utf-8") as fh:
            json.dump(
                {"command": command, "error": str(exc), "type": type(exc).__name__},
                fh,
                indent=2,
                ensure_ascii=False,
            )
            fh.write("\n")
    except OSError:
        pass


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="indistill",
        description="Reasoning-distillation pipeline: augment, filter, align, search, report.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="pipeline YAML config file")
    parser.add_argument("--out", default=None, help="override the configured output directory")
    args = parser.parse_args(argv)

    config = None
    try:
        config = load_config(args.config)
        COMMANDS[args.command](config, args.out)
    except (ConfigError, BackendConfigError, TaskError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (StageFailure, DatasetError, GatewayError, AugmentationError, CorpusError, OSError) as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        _write_failure(config, args.out, args.command, exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
