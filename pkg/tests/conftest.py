import os
from pathlib import Path

import pytest

from ruladapt.data import subset_paths
from ruladapt.synthetic import write_benchmark_files


@pytest.fixture(scope="session")
def cmapss_dir(tmp_path_factory) -> Path:
    """Directory holding FD001/FD002 flat files.

    Points at the real dataset when RULADAPT_DATA_DIR is set and populated;
    otherwise writes synthetic files with the published trajectory counts.
    """
    env = os.environ.get("RULADAPT_DATA_DIR")
    if env and all(p.exists() for p in subset_paths(env, "FD001")):
        return Path(env)
    root = tmp_path_factory.mktemp("cmapss")
    for subset in ("FD001", "FD002"):
        write_benchmark_files(root, subset)
    return root


@pytest.fixture(scope="session")
def cmapss_tiny_dir(tmp_path_factory) -> Path:
    """Miniature files in the same layout (few short engines) so operational
    tests run in seconds."""
    root = tmp_path_factory.mktemp("cmapss_tiny")
    write_benchmark_files(root, "FD001", n_train=8, n_test=4, length_range=(30, 60))
    write_benchmark_files(root, "FD002", n_train=10, n_test=4, length_range=(28, 50))
    return root
