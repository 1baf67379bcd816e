import pytest

from longidiff.config import from_dict
from longidiff.fundus import DataConfig, gen_dataset

TINY_DATA = dict(n_train=6, n_val=2, n_test=4, time_variant_fraction=0.5, min_visits=6, max_visits=7)
TINY_MODEL = dict(base_channels=8, heads=2, groups=2, label_dim=4)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny-data")
    gen_dataset(DataConfig(**TINY_DATA), root, seed=11)
    return root


@pytest.fixture
def tiny_config(tiny_data, tmp_path):
    def make(**kw):
        raw = {
            "seed": 5,
            "data_dir": str(tiny_data),
            "run_dir": str(tmp_path / "run"),
            "steps": 4,
            "checkpoint_every": 2,
            "batch_size": 2,
            "lr": 1e-3,
            "model": dict(TINY_MODEL),
            "data": dict(TINY_DATA),
        }
        raw.update(kw)
        return from_dict(raw)

    return make


# acceptance criterion -> (passed, detail); filled by test_acceptance.py
CRITERIA: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
