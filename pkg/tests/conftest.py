import json

import numpy as np
import pytest

from core.data import Dataset, generate_blobs
from core.models import DType, FedConfig


def fixed_clock() -> float:
    return 0.0


@pytest.fixture
def clock():
    return fixed_clock


@pytest.fixture
def small_blobs() -> Dataset:
    """Four well-separated classes, 60 samples each, 16 features."""
    return generate_blobs(num_classes=4, counts=[60, 60, 60, 60], dim=16, separation=10.0, seed=7)


@pytest.fixture
def maize_blobs() -> Dataset:
    """Blobs with the maize class imbalance (3852 samples)."""
    return generate_blobs(num_classes=4, dim=16, separation=10.0, seed=0)


@pytest.fixture
def f64_config():
    """FedConfig factory with a lossless float64 wire."""

    def make(**overrides) -> FedConfig:
        values = dict(
            num_clients=2,
            rounds=3,
            batch_size=16,
            learning_rate=0.01,
            momentum=0.9,
            seed=3,
            compute_dtype=DType.FLOAT64,
            wire_dtype=DType.FLOAT64,
        )
        values.update(overrides)
        return FedConfig(**values)

    return make


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function, perturbing x in place."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        plus = f()
        x[idx] = orig - eps
        minus = f()
        x[idx] = orig
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


# (arch, training minutes, accuracy) of the published five-network comparison
PUBLISHED = [
    ("alexnet", 16.23, 0.9687),
    ("resnet18", 25.55, 0.9654),
    ("squeezenet_v1_0", 27.95, 0.9486),
    ("vgg11_batchnorm", 78.78, 0.9729),
    ("shufflenet_v2_x1_0", 19.99, 0.7565),
]


def write_metrics(run_dir, arch: str, minutes: float, accuracy: float, seed: int = 0):
    """A minimal metrics.json as written by a finished run."""
    run_dir.mkdir(parents=True)
    data = {
        "run_id": run_dir.name,
        "arch": arch,
        "seed": seed,
        "eval_split": "test",
        "metrics": {
            "accuracy": accuracy,
            "precision": accuracy,
            "recall": accuracy,
            "f1": accuracy,
            "loss": 0.1,
            "training_time_min": minutes,
        },
        "traffic": {"total_bytes": 1000},
    }
    (run_dir / "metrics.json").write_text(json.dumps(data))
    return run_dir


@pytest.fixture
def published_runs(tmp_path):
    """One run directory per network of the published comparison."""
    root = tmp_path / "published"
    for arch, minutes, acc in PUBLISHED:
        write_metrics(root / arch / "run00-seed0", arch, minutes, acc)
    return root
