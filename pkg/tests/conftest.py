import pytest

from kpgan.synthdata import make_ring_task
from kpgan.train import TrainConfig, finetune, pretrain, transfer_train

ACCEPTANCE_SEEDS = (1, 2, 3, 4, 5)
TRANSFER_ITERATIONS = 2000
TRANSFER_EVAL_EVERY = 25

# criterion number -> (passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size training runs (minutes)")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def default_task():
    return make_ring_task(8, 2, 2.0, 0.15, seed=0)


@pytest.fixture(scope="session")
def single_target_task():
    return make_ring_task(8, 1, 2.0, 0.15, seed=0)


@pytest.fixture(scope="session")
def pretrained_default(default_task):
    """The default desk-scale source generator, trained once per session."""
    return pretrain(default_task, TrainConfig(phase="pretrain", iterations=5000, eval_every=500))


class RunCache:
    """Desk-scale transfer runs computed on first request and shared by tests."""

    def __init__(self, pretrained, tasks):
        self.pretrained = pretrained
        self.tasks = tasks
        self._runs = {}

    def transfer(self, task_name: str, mode: str, seed: int, **flags):
        key = ("transfer", task_name, mode, seed, tuple(sorted(flags.items())))
        if key not in self._runs:
            cfg = TrainConfig(phase="transfer", mode=mode, iterations=TRANSFER_ITERATIONS,
                              eval_every=TRANSFER_EVAL_EVERY, seed=seed, **flags)
            self._runs[key] = transfer_train(self.pretrained.final, self.tasks[task_name], cfg)
        return self._runs[key]

    def finetune(self, seed: int, iterations: int = 500):
        key = ("finetune", seed, iterations)
        if key not in self._runs:
            source = self.transfer("default", "propagate", seed).final
            cfg = TrainConfig(phase="finetune", iterations=iterations, eval_every=TRANSFER_EVAL_EVERY, seed=seed)
            self._runs[key] = finetune(source, self.tasks["default"], cfg)
        return self._runs[key]


@pytest.fixture(scope="session")
def runs(pretrained_default, default_task, single_target_task):
    return RunCache(pretrained_default, {"default": default_task, "single": single_target_task})
