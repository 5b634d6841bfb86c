from __future__ import annotations

import shutil
from pathlib import Path

import pytest

from benchforge.config import load_config
from benchforge.pipeline import Pipeline
from benchforge.synthetic import bundled_path


@pytest.fixture(scope="session")
def bundle_dir(tmp_path_factory) -> Path:
    """A writable copy of the bundled synthetic domain."""
    dst = tmp_path_factory.mktemp("bundle")
    shutil.copytree(bundled_path(), dst, dirs_exist_ok=True)
    return dst


@pytest.fixture(scope="session")
def pipeline_run(bundle_dir, tmp_path_factory):
    """One serial end-to-end run on the bundled domain: ``(out_dir, results, seconds)``."""
    import time

    out = tmp_path_factory.mktemp("run1")
    pipe = Pipeline(load_config(bundle_dir / "config.json"), out, workers=1)
    start = time.perf_counter()
    results = pipe.run_all()
    return out, results, time.perf_counter() - start
