import os

import hypothesis
import numpy as np
import pytest

from datasets import DATA_ENV, DATA_FILES, data_dir

hypothesis.settings.register_profile("default", max_examples=25, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=100, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def benchmark_file():
    """Path of a benchmark CSV, skipping the test when it is not installed."""

    def find(name):
        path = data_dir() / DATA_FILES[name]
        if not path.exists():
            pytest.skip(f"{path} not found (set {DATA_ENV})")
        return path

    return find


@pytest.fixture
def write_csv(tmp_path):
    def write(name, header, rows):
        path = tmp_path / name
        lines = [",".join(header)] + [",".join(str(v) for v in row) for row in rows]
        path.write_text("\n".join(lines) + "\n")
        return path

    return write
