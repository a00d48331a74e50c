import math
import random

import pytest

from indistill.augment import Hypothesis, ScoredTable
from indistill.inference import Prediction, TaskResult
from indistill.metrics import (
    accuracy,
    avg_tokens_per_output,
    build_report,
    compare_runs,
    cp_ratio,
    format_cp,
    length_quality_correlation,
    load_report,
    pearson,
    save_report,
)


def result(task_id, correct, outputs, prompt_tokens=0, completion_tokens=0, family="list-function"):
    predictions = tuple(
        Prediction(test_index=i, completion="[1]", correct=i < correct)
        for i in range(outputs)
    )
    return TaskResult(
        task_id=task_id, family=family, mode="hypothesis-search",
        predictions=predictions,
        prompt_tokens=prompt_tokens, completion_tokens=completion_tokens,
    )


class TestAccuracy:
    def test_seven_of_ten(self):
        results = [result("a", 3, 5), result("b", 4, 5)]
        acc, _ = accuracy(results)
        assert acc == pytest.approx(0.7)

    def test_zero_accuracy(self):
        results = [result("a", 0, 4)]
        acc, _ = accuracy(results)
        assert acc == 0.0
        assert cp_ratio(results) is None
        assert format_cp(cp_ratio(results)) == "--"

    def test_hand_counted_fixture_of_25_tasks(self):
        rng = random.Random(123)
        results = []
        total_correct = total_outputs = 0
        for i in range(25):
            outputs = rng.randint(1, 4)
            correct = rng.randint(0, outputs)
            total_correct += correct
            total_outputs += outputs
            results.append(result(f"t{i}", correct, outputs))
        acc, se = accuracy(results)
        assert acc == pytest.approx(total_correct / total_outputs, abs=1e-15)
        assert se > 0

    def test_permutation_invariance(self):
        rng = random.Random(5)
        results = [result(f"t{i}", rng.randint(0, 3), 3) for i in range(12)]
        shuffled = list(results)
        rng.shuffle(shuffled)
        assert accuracy(results)[0] == accuracy(shuffled)[0]

    def test_bootstrap_is_deterministic_per_seed(self):
        results = [result(f"t{i}", i % 3, 3) for i in range(10)]
        assert accuracy(results, bootstrap_seed=7) == accuracy(results, bootstrap_seed=7)
        assert accuracy(results, bootstrap_seed=7)[1] != accuracy(results, bootstrap_seed=8)[1]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            accuracy([])


class TestCpRatio:
    def test_published_acre_row(self):
        # 100 outputs, 71 correct, 16685 total tokens: 166.85 tokens/output at
        # accuracy 0.71 must give a CP of 235 after rounding.
        results = [result(f"t{i}", 1 if i < 71 else 0, 1, prompt_tokens=100, completion_tokens=66)
                   for i in range(100)]
        extra = 85  # distribute the remaining fraction: 166.85 * 100 = 16685
        results[0] = result("t0", 1, 1, prompt_tokens=100 + extra, completion_tokens=66)
        assert sum(r.total_tokens for r in results) == 16685
        cp = cp_ratio(results)
        assert round(cp) == 235
        assert abs(cp - 235) <= 1

    def test_published_list_function_row(self):
        # 315.6 tokens/output at accuracy 0.49 -> CP 644.
        results = [result(f"t{i}", 1 if i < 49 else 0, 1, prompt_tokens=300, completion_tokens=15)
                   for i in range(100)]
        results[0] = result("t0", 1, 1, prompt_tokens=300 + 60, completion_tokens=15)
        assert sum(r.total_tokens for r in results) == 31560
        cp = cp_ratio(results)
        assert round(cp) == 644
        assert abs(cp - 644) <= 1

    def test_homogeneous_in_tokens(self):
        results = [result(f"t{i}", 1, 2, prompt_tokens=40, completion_tokens=10) for i in range(5)]
        doubled = [result(f"t{i}", 1, 2, prompt_tokens=80, completion_tokens=20) for i in range(5)]
        assert cp_ratio(doubled) == pytest.approx(2 * cp_ratio(results), rel=1e-12)

    def test_token_conventions(self):
        results = [result("a", 1, 1, prompt_tokens=30, completion_tokens=10)]
        assert avg_tokens_per_output(results, "total") == 40
        assert avg_tokens_per_output(results, "prompt") == 30
        assert avg_tokens_per_output(results, "completion") == 10
        with pytest.raises(ValueError):
            avg_tokens_per_output(results, "chars")


class TestPearson:
    def test_five_point_fixture_matches_closed_form(self):
        xs = [1.0, 2.0, 3.0, 4.0, 5.0]
        ys = [2.0, 1.0, 4.0, 3.0, 5.0]
        n = 5
        sx = sum(xs); sy = sum(ys)
        sxx = sum(x * x for x in xs); syy = sum(y * y for y in ys)
        sxy = sum(x * y for x, y in zip(xs, ys))
        closed = (n * sxy - sx * sy) / math.sqrt((n * sxx - sx * sx) * (n * syy - sy * sy))
        assert pearson(xs, ys) == pytest.approx(closed, abs=1e-12)

    def test_constant_variable_undefined(self):
        assert pearson([1, 1, 1], [1, 2, 3]) is None
        assert pearson([1, 2, 3], [5, 5, 5]) is None

    def test_perfect_correlation(self):
        assert pearson([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0, abs=1e-12)
        assert pearson([1, 2, 3], [30, 20, 10]) == pytest.approx(-1.0, abs=1e-12)


def hypothesis_row(task_id, family, length, fitness):
    return Hypothesis(
        task_id=task_id, family=family, n_demos=4, sample_index=0,
        text="x " * length, length_tokens=length, fitness=fitness,
        verdicts=("match",) * fitness + ("mismatch",) * (4 - fitness),
    )


class TestLengthQualityCorrelation:
    def test_per_family_and_overall(self):
        table = ScoredTable()
        rows = [
            hypothesis_row("a", "list-function", 2, 4),
            hypothesis_row("a", "list-function", 5, 1),
            hypothesis_row("a", "list-function", 8, 0),
            hypothesis_row("b", "arc1d", 3, 3),
            hypothesis_row("b", "arc1d", 6, 2),
        ]
        table.hypotheses.extend(rows)
        corr = length_quality_correlation(table)
        assert corr["list-function"] < 0
        assert corr["arc1d"] < 0
        assert set(corr) == {"all", "list-function", "arc1d"}
        manual = pearson([h.length_tokens for h in rows], [h.fitness for h in rows])
        assert corr["all"] == pytest.approx(manual, abs=1e-15)

    def test_constant_length_undefined(self):
        table = ScoredTable()
        table.hypotheses.extend([
            hypothesis_row("a", "list-function", 3, 4),
            hypothesis_row("a", "list-function", 3, 1),
        ])
        assert length_quality_correlation(table)["all"] is None

    def test_unscored_rejected(self):
        table = ScoredTable()
        table.hypotheses.append(
            Hypothesis(task_id="a", family="list-function", n_demos=4,
                       sample_index=0, text="x", length_tokens=1)
        )
        with pytest.raises(ValueError):
            length_quality_correlation(table)


class TestReports:
    def _results(self):
        return (
            [result(f"lf{i}", 2, 2, prompt_tokens=50, completion_tokens=10) for i in range(4)]
            + [result(f"arc{i}", 0, 2, prompt_tokens=30, completion_tokens=5, family="arc1d")
               for i in range(3)]
        )

    def test_build_report_per_family(self):
        report = build_report("r1", self._results(), method="hypothesis-search")
        assert report.families["list-function"].accuracy == 1.0
        assert report.families["arc1d"].accuracy == 0.0
        assert report.families["arc1d"].cp is None
        assert report.overall.n_tasks == 7
        assert report.overall.n_outputs == 14

    def test_save_load_round_trip(self, tmp_path):
        report = build_report("r1", self._results(), method="io", tuning="sft")
        path = tmp_path / "report.json"
        save_report(report, path)
        assert load_report(path) == report

    def test_compare_runs_table(self):
        a = build_report("a", self._results(), method="io", tuning="none")
        b = build_report("b", self._results(), method="hypothesis-search", tuning="orpo")
        text, rows = compare_runs([a, b])
        assert "io [none]" in text
        assert "hypothesis-search [orpo]" in text
        assert "--" in text  # arc1d zero accuracy renders the dash convention
        assert {(r["method"], r["family"]) for r in rows} == {
            ("io", "list-function"), ("io", "arc1d"),
            ("hypothesis-search", "list-function"), ("hypothesis-search", "arc1d"),
        }
