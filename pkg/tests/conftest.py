import json
from pathlib import Path
from typing import List

import pytest

from mono_bev3d import logger


@pytest.fixture(autouse=True)
def isolated_logs(tmp_path: Path, monkeypatch) -> Path:
    log_dir = tmp_path / ".logs"
    monkeypatch.setattr(logger, "_LOG_DIR", str(log_dir))
    return log_dir


@pytest.fixture
def read_events(isolated_logs: Path):
    def read() -> List[dict]:
        path = isolated_logs / "events.log"
        if not path.exists():
            return []
        return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line]

    return read
