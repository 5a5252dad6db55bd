import numpy as np
import pytest

from pfeddsh import _backend, config


@pytest.fixture(params=_backend.available())
def backend(request):
    """Run the test once per available kernel backend."""
    with _backend.using(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk():
    return config.bundled()


def small_cfg(**overrides):
    """A fast variant of the desk scenario for federation tests."""
    cfg = config.bundled()
    cfg.set("data.per_class", 60)
    cfg.set("schedule.rounds", [6, 4])
    cfg.set("schedule.pretrain_epochs", 3)
    cfg.set("schedule.eval_every", 2)
    cfg.set("replay.iterations", 20)
    cfg.set("replay.images_per_class", 4)
    for k, v in overrides.items():
        cfg.set(k, v)
    return cfg.validate()


ACCEPTANCE_LINES: list[str] = []


def report(n: int, ok: bool, detail: str) -> bool:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
