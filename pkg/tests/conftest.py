import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from compseg.cli import main  # noqa: E402

# small enough to train in seconds, large enough to segment seen scenes
DESK = {
    "train_scenes": 80, "test_seen_scenes": 10, "test_unseen_scenes": 36,
    "image_size": 32, "patch": 4, "dim": 32, "heads": 2, "queries": 6, "depth": 1,
    "embed_dim": 16, "pixel_dim": 8, "epochs": 12, "batch_size": 8,
}


def write_config(path: Path, **fields) -> Path:
    path.write_text(json.dumps(fields))
    return path


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Dataset + trained checkpoint produced through the CLI."""
    root = tmp_path_factory.mktemp("desk")
    cfg = write_config(root / "run.json", **DESK, data_dir=str(root / "data"), out_dir=str(root / "run"))
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg)]) == 0
    return root, cfg


# one PASS/FAIL line per acceptance criterion, shown after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":").split(".")[0])):
            terminalreporter.write_line(line)
