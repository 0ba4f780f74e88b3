"""
Pytest fixtures for fedcert tests.
"""

import json
import tempfile
from pathlib import Path

import numpy as np
import pytest

from fedcert.core.config import get_config, reset_config
from fedcert.core.datasets import BlobSpec, PartitionConfig, partition_noniid, synth_blobs
from fedcert.core.ensemble import EnsembleMode, enumerate_subsamples, lookup_matrix
from fedcert.core.fedlearn import FedConfig
from fedcert.core.model import ModelConfig

RUNTIME_ENV_VARS = (
    "FEDCERT_THREADS",
    "FEDCERT_LOG_LEVEL",
    "FEDCERT_ENUM_CAP",
    "FEDCERT_BRUTE_FORCE_CAP",
    "FEDCERT_CACHE_DIR",
)


@pytest.fixture
def temp_dir():
    """Create a temporary directory for test files."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture(autouse=True)
def runtime_config(tmp_path_factory, monkeypatch):
    """Point runtime settings at a missing file and a scratch cache so the user's never leak in."""
    monkeypatch.setenv("FEDCERT_CONFIG", str(tmp_path_factory.mktemp("runtime") / "config"))
    for var in RUNTIME_ENV_VARS:
        monkeypatch.delenv(var, raising=False)
    monkeypatch.setenv("FEDCERT_CACHE_DIR", str(tmp_path_factory.mktemp("cache")))
    reset_config()
    yield get_config()
    reset_config()


@pytest.fixture
def blobs():
    """Well separated 4-label blobs, 30 examples per label."""
    return synth_blobs(BlobSpec(4, 4, 30, centroid_scale=2.0, noise_sigma=0.3, seed=3))


@pytest.fixture
def blob_test_set():
    return synth_blobs(BlobSpec(4, 4, 5, centroid_scale=2.0, noise_sigma=0.3, seed=4))


@pytest.fixture
def tiny_partition(blobs):
    """The blobs split across 8 clients."""
    return partition_noniid(blobs, PartitionConfig(n=8, q=0.5, seed=1, groups=4))


@pytest.fixture
def fed_config():
    return FedConfig(global_iter=3, local_iter=2, eta=0.5, batch_size=8)


@pytest.fixture
def model_config():
    return ModelConfig((4, 4))


@pytest.fixture
def random_lookup_matrix():
    """
    Factory for EXACT-mode matrices of a random table base algorithm.

    Each prediction is label 0 with probability `bias`, otherwise uniform over
    all labels, so strong majorities (and positive certified levels) occur.
    """

    def make(n, k, rng, test_count=3, num_labels=3, bias=0.85):
        table = {}
        for s in enumerate_subsamples(n, k):
            favoured = rng.random(test_count) < bias
            labels = np.where(favoured, 0, rng.integers(0, num_labels, size=test_count))
            table[s] = tuple(int(v) for v in labels)
        return lookup_matrix(table.__getitem__, n, k, num_labels, mode=EnsembleMode.EXACT)

    return make


def experiment_document(**overrides):
    """A small blobs experiment; top-level keys in overrides replace the defaults."""
    raw = {
        "name": "blobs-test",
        "data": {
            "source": "blobs",
            "blobs": {
                "num_labels": 4,
                "feature_dim": 4,
                "per_label_count": 30,
                "centroid_scale": 2.0,
                "noise_sigma": 0.3,
                "seed": 3,
            },
            "blobs_test_per_label": 5,
        },
        "partition": {"n": 8, "q": 0.5, "seed": 1, "groups": 4},
        "model": {"hidden": []},
        "fed": {"global_iter": 3, "local_iter": 2, "eta": 0.5, "batch_size": 8},
        "ensemble": {"k": 2, "mode": "EXACT", "N": 40},
        "certify": {"alphas": [0.01]},
        "output_dir": "out",
        "master_seed": 5,
    }
    raw.update(overrides)
    return raw


@pytest.fixture
def write_experiment(temp_dir):
    """Write an experiment JSON into temp_dir and return its path."""

    def write(name="experiment.json", **overrides) -> Path:
        path = temp_dir / name
        path.write_text(json.dumps(experiment_document(**overrides), indent=2))
        return path

    return write
