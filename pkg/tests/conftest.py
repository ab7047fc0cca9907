import time
from contextlib import contextmanager

import pytest
from hypothesis import settings

from pdaudio.denoiser import UNetConfig

settings.register_profile("default", deadline=None)
settings.load_profile("default")

_REPORT = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_REPORT] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_REPORT, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Context manager that times a block and records one PASS/FAIL line for it."""
    report = request.config.stash[_REPORT]

    @contextmanager
    def run(number, title, budget_s=None):
        notes = []
        start = time.perf_counter()
        status = "FAIL"
        try:
            yield notes
            elapsed = time.perf_counter() - start
            if budget_s is not None and elapsed > budget_s:
                notes.append(f"over budget {budget_s:.0f}s")
                raise AssertionError(f"criterion {number} took {elapsed:.1f}s, budget {budget_s}s")
            status = "PASS"
        except BaseException as exc:
            notes.append(f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
            raise
        finally:
            elapsed = time.perf_counter() - start
            detail = "; ".join(notes)
            line = f"{status} criterion {number}: {title} [{elapsed:.1f}s]" + (f" ({detail})" if detail else "")
            report.append(line)
            print(line)

    return run


@pytest.fixture
def tiny_config():
    """A U-Net small enough for double-precision finite differences."""
    return UNetConfig(
        n_channels=1, n_mels=2, length=8, base_width=4, depth=2, channel_mult=(1, 2),
        time_embed_dim=4, attention_heads=2, zero_init_out=False,
    )
