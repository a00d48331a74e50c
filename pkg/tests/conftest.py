import pytest

from indistill import dsl
from indistill.tasks import DEFAULT_TEMPLATES, Example, IclTask, TaskValue


@pytest.fixture
def templates():
    return DEFAULT_TEMPLATES["list-function"]


@pytest.fixture
def templates_by_family():
    return dict(DEFAULT_TEMPLATES)


def make_list_task(task_id, demos, tests=(), family="list-function"):
    return IclTask(
        task_id=task_id,
        family=family,
        demonstrations=tuple(
            Example(TaskValue.int_list(x), TaskValue.int_list(y)) for x, y in demos
        ),
        tests=tuple(Example(TaskValue.int_list(x), TaskValue.int_list(y)) for x, y in tests),
    )


@pytest.fixture
def mock_suite():
    return dsl.generate_task_suite(seed=7, count=5, rule_depth=2, n_demos=4, n_tests=2)
