import pytest

from spy_watermark.config import validate_config


def micro_raw(**overrides):
    """Smallest end-to-end configuration: synthetic data and a handful of steps per stage."""
    raw = {
        "profile": "tiny",
        "dataset": {"synthetic_train": 96, "synthetic_test": 48, "injector_subset": 32, "train_subset": 96},
        "injector": {"embed_dim": 32, "heads": 2},
        "extractor": {"base_channels": 4},
        "schedule": {"iterations": 3, "batch_size": 4, "log_every": 1, "checkpoint_every": 100},
        "victim": {"epochs": 1, "batch_size": 32},
        "defense": {"steps": 2, "batch_size": 16, "clean_budget": 32},
        "evaluation": {"stealth_samples": 8, "lpips_backend": "random"},
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            raw.setdefault(key, {}).update(value)
        else:
            raw[key] = value
    return raw


@pytest.fixture
def micro_config():
    return lambda **kw: validate_config(micro_raw(**kw))


# one line per acceptance criterion, repeated in the terminal summary so it
# survives output capturing
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
