"""Run metrics and reports: accuracy, cost-to-performance, length/quality
correlation, and cross-run comparison tables.

Accuracy is the fraction of correctly predicted test outputs over all tasks;
its uncertainty is a seeded task-level bootstrap standard error. The
cost-to-performance ratio divides average tokens per output by accuracy and
is undefined (rendered "--") at zero accuracy. Prompt and completion tokens
are tracked separately so either counting convention is computable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import ScoredTable

CP_UNDEFINED = "--"

TOKENS_TOTAL = "total"
TOKENS_PROMPT = "prompt"
TOKENS_COMPLETION = "completion"


def _tokens(result, which: str) -> int:
    if which == TOKENS_TOTAL:
        return result.prompt_tokens + result.completion_tokens
    if which == TOKENS_PROMPT:
        return result.prompt_tokens
    if which == TOKENS_COMPLETION:
        return result.completion_tokens
    raise ValueError(f"unknown token convention {which!r}")


def accuracy(results, bootstrap_seed: int = 0, n_resamples: int = 1000) -> tuple[float, float]:
    """(accuracy, bootstrap standard error) over all test outputs.

    The standard error is the standard deviation of the accuracy over
    n_resamples task-level bootstrap resamples with a fixed seed.
    """
    results = list(results)
    pairs = np.array([(r.n_correct, r.n_outputs) for r in results], dtype=np.int64)
    if len(pairs) == 0 or pairs[:, 1].sum() == 0:
        raise ValueError("accuracy requires at least one test output")
    acc = pairs[:, 0].sum() / pairs[:, 1].sum()
    rng = np.random.default_rng(bootstrap_seed)
    samples = np.empty(n_resamples)
    for b in range(n_resamples):
        idx = rng.integers(0, len(pairs), size=len(pairs))
        correct = pairs[idx, 0].sum()
        outputs = pairs[idx, 1].sum()
        samples[b] = correct / outputs if outputs > 0 else 0.0
    return float(acc), float(samples.std())


def avg_tokens_per_output(results, tokens: str = TOKENS_TOTAL) -> float:
    results = list(results)
    n_outputs = sum(r.n_outputs for r in results)
    if n_outputs == 0:
        raise ValueError("no test outputs")
    return sum(_tokens(r, tokens) for r in results) / n_outputs


def cp_ratio(results, tokens: str = TOKENS_TOTAL) -> float | None:
    """Average token consumption per output divided by accuracy; None at zero."""
    results = list(results)
    pairs = [(r.n_correct, r.n_outputs) for r in results]
    total_outputs = sum(n for _, n in pairs)
    if total_outputs == 0:
        raise ValueError("cp_ratio requires at least one test output")
    acc = sum(c for c, _ in pairs) / total_outputs
    if acc == 0:
        return None
    return avg_tokens_per_output(results, tokens) / acc


def format_cp(cp: float | None) -> str:
    return CP_UNDEFINED if cp is None else f"{cp:.0f}"


def pearson(xs, ys) -> float | None:
    """Pearson correlation; None when either variable has zero variance."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.size != y.size or x.size < 2:
        raise ValueError("pearson needs two equal-length samples of size >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = float(np.sqrt((dx * dx).sum()))
    sy = float(np.sqrt((dy * dy).sum()))
    if sx == 0.0 or sy == 0.0:
        return None
    return float((dx * dy).sum() / (sx * sy))


def length_quality_correlation(table: ScoredTable) -> dict[str, float | None]:
    """Pearson r between hypothesis token length and fitness, per family + overall.

    Longer hypotheses tend to score lower on list-transformation families;
    overall correlations near -0.2 are the expected magnitude at production
    scale, with the causal/token-sequence families closer to zero.
    """
    by_family: dict[str, list] = {}
    for h in table.hypotheses:
        if h.fitness is None:
            raise ValueError(f"hypothesis for task {h.task_id} is unscored")
        by_family.setdefault(h.family, []).append(h)
    out: dict[str, float | None] = {}
    everything = [h for rows in by_family.values() for h in rows]
    out["all"] = pearson(
        [h.length_tokens for h in everything], [h.fitness for h in everything]
    )
    for family in sorted(by_family):
        rows = by_family[family]
        out[family] = pearson([h.length_tokens for h in rows], [h.fitness for h in rows])
    return out


@dataclass(frozen=True)
class FamilyMetrics:
    n_tasks: int
    n_outputs: int
    accuracy: float
    se: float
    avg_tokens_per_output: float
    cp: float | None


@dataclass(frozen=True)
class RunReport:
    run_id: str
    method: str
    tuning: str
    overall: FamilyMetrics
    families: dict[str, FamilyMetrics]
    config: dict = field(default_factory=dict)


def _family_metrics(results, bootstrap_seed: int, tokens: str) -> FamilyMetrics:
    acc, se = accuracy(results, bootstrap_seed=bootstrap_seed)
    return FamilyMetrics(
        n_tasks=len(results),
        n_outputs=sum(r.n_outputs for r in results),
        accuracy=acc,
        se=se,
        avg_tokens_per_output=avg_tokens_per_output(results, tokens),
        cp=cp_ratio(results, tokens),
    )


def build_report(
    run_id: str,
    results,
    method: str,
    tuning: str = "none",
    config: dict | None = None,
    bootstrap_seed: int = 0,
    tokens: str = TOKENS_TOTAL,
) -> RunReport:
    results = list(results)
    by_family: dict[str, list] = {}
    for r in results:
        by_family.setdefault(r.family, []).append(r)
    return RunReport(
        run_id=run_id,
        method=method,
        tuning=tuning,
        overall=_family_metrics(results, bootstrap_seed, tokens),
        families={
            fam: _family_metrics(rows, bootstrap_seed, tokens)
            for fam, rows in sorted(by_family.items())
        },
        config=dict(config or {}),
    )


def _metrics_to_json(m: FamilyMetrics) -> dict:
    return {
        "n_tasks": m.n_tasks,
        "n_outputs": m.n_outputs,
        "accuracy": m.accuracy,
        "se": m.se,
        "avg_tokens_per_output": m.avg_tokens_per_output,
        "cp": m.cp,
    }


def report_to_json(report: RunReport) -> dict:
    return {
        "run_id": report.run_id,
        "method": report.method,
        "tuning": report.tuning,
        "overall": _metrics_to_json(report.overall),
        "families": {fam: _metrics_to_json(m) for fam, m in report.families.items()},
        "config": report.config,
    }


def save_report(report: RunReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_to_json(report), fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


def load_report(path: str | Path) -> RunReport:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)

    def metrics(obj) -> FamilyMetrics:
        return FamilyMetrics(
            n_tasks=obj["n_tasks"],
            n_outputs=obj["n_outputs"],
            accuracy=obj["accuracy"],
            se=obj["se"],
            avg_tokens_per_output=obj["avg_tokens_per_output"],
            cp=obj["cp"],
        )

    return RunReport(
        run_id=raw["run_id"],
        method=raw["method"],
        tuning=raw["tuning"],
        overall=metrics(raw["overall"]),
        families={fam: metrics(m) for fam, m in raw["families"].items()},
        config=raw.get("config", {}),
    )


def compare_runs(reports) -> tuple[str, list[dict]]:
    """(rendered text table, machine-readable rows) keyed by (method, tuning, family)."""
    reports = list(reports)
    families = sorted({fam for report in reports for fam in report.families})
    rows = []
    for report in reports:
        for fam in families:
            m = report.families.get(fam)
            if m is None:
                continue
            rows.append(
                {
                    "run_id": report.run_id,
                    "method": report.method,
                    "tuning": report.tuning,
                    "family": fam,
                    "accuracy": m.accuracy,
                    "se": m.se,
                    "cp": m.cp,
                }
            )

    label_width = max(
        [len(f"{r.method} [{r.tuning}]") for r in reports] + [len("method")]
    )
    col_width = max([len(f) for f in families] + [14])
    header = "method".ljust(label_width) + "".join(
        f"  {fam.rjust(col_width)}" for fam in families
    )
    lines = [header, "-" * len(header)]
    for report in reports:
        label = f"{report.method} [{report.tuning}]".ljust(label_width)
        cells = []
        for fam in families:
            m = report.families.get(fam)
            if m is None:
                cells.append("".rjust(col_width))
            else:
                cells.append(f"{m.accuracy:.2f}±{m.se:.2f} ({format_cp(m.cp)})".rjust(col_width))
        lines.append(label + "".join(f"  {cell}" for cell in cells))
    return "\n".join(lines) + "\n", rows
