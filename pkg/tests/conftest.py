import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from helpers import synth_classification, synth_corpus  # noqa: E402

from smoelab import data as data_mod  # noqa: E402

# lines emitted by the acceptance module, echoed after the run summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_lm_dataset(tmp_path_factory):
    """A ~160 KB byte-level dataset for structural training tests."""
    root = tmp_path_factory.mktemp("small-lm")
    src = root / "corpus.txt"
    src.write_bytes(synth_corpus(160_000, seed=1))
    out = root / "dataset"
    data_mod.ingest(str(src), "char-lm", str(out))
    return out


@pytest.fixture(scope="session")
def small_cls_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("small-cls")
    src = root / "records.tsv"
    src.write_text(synth_classification(320, seed=2))
    out = root / "dataset"
    data_mod.ingest(str(src), "classification", str(out))
    return out
