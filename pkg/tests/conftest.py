import json
from pathlib import Path

import pytest

from soft_tuning.domain import default_pool_path, load_pool, load_principles


@pytest.fixture(scope="session")
def pool():
    pool, warnings = load_pool(default_pool_path())
    assert not warnings
    return pool


@pytest.fixture(scope="session")
def principles():
    return load_principles()


@pytest.fixture()
def write_jsonl(tmp_path):
    def _write(name: str, rows) -> Path:
        path = tmp_path / name
        with open(path, "w", encoding="utf-8") as f:
            for row in rows:
                f.write(json.dumps(row) + "\n")
        return path

    return _write
