import pytest

from eianet import data
from eianet.config import RunConfig
from eianet.pipeline import train_source

TINY = dict(K=3, d=6, image_size=8, widths=(4, 6), epochs_source=2, epochs_adapt=2, batch_size=8, M=2)

# Benchmark scale used by the acceptance suite: K=10, 100 images per class, 32x32.
BENCH_SEEDS = (0, 1, 2, 3, 4)
BENCH_PER_CLASS = 100
BENCH_SOURCE_EPOCHS = 20

_source_cache = {}


def benchmark_source(seed, mode="standard", **arch):
    """Source-trained checkpoint and its records, trained once per session.

    The source domain does not depend on the shift preset, so one checkpoint
    serves every target shift.
    """
    key = (seed, mode, tuple(sorted(arch.items())))
    if key not in _source_cache:
        cfg = RunConfig(seed=seed, epochs_source=BENCH_SOURCE_EPOCHS, **arch)
        src, _ = data.generate(cfg.K, BENCH_PER_CLASS, "none", seed, mode=mode)
        _source_cache[key] = train_source(cfg, src)
    return _source_cache[key]


@pytest.fixture(scope="session")
def tiny_cfg():
    return RunConfig(**TINY)


@pytest.fixture(scope="session")
def tiny_data():
    return data.generate(3, 8, "default", seed=0, image_size=8, min_per_class=4)


# -- acceptance summary ----------------------------------------------------------------
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
