import sys
from pathlib import Path

import pytest

# make tests/oracles.py importable as a plain module
sys.path.insert(0, str(Path(__file__).parent))

GOLDEN = Path(__file__).parent / "golden"

# acceptance verdict lines, filled by tests/test_acceptance.py
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda v: int(v.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)


def tiny_doc(root: Path, manifest: Path, modes=("vanilla",)) -> dict:
    """A config small enough for a full run in a few seconds."""
    return {
        "task": "crackle2",
        "data": {"kind": "manifest", "manifest": str(manifest)},
        "split": {"scheme": "kfold:5", "seed": 0, "folds": [0]},
        "segment": {"length_s": 2.0},
        "augment": {"enabled": False},
        "backbone": {"depth": 18, "pretrained": "random", "base_width": 4},
        "train": {"epochs": 1, "batch_size": 16},
        "experiment": {"n_runs": 1, "seed": 0, "output_dir": str(root / "runs"),
                       "modes": list(modes), "depths": [18]},
    }


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    from lungsound.synthetic import make_smoke_corpus

    root = tmp_path_factory.mktemp("tiny")
    return root, make_smoke_corpus(root / "corpus", n_clips=40, n_patients=10, seed=3)
