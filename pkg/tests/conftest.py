import gzip
import struct

import numpy as np
import pytest
import torch

from metadet.attacks import REAL, AdvEntry, AdvExampleSet
from metadet.datasets import Split


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(">" + "I" * array.ndim, *array.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(header + array.tobytes())


def synthetic_digits(n, seed):
    """Blocky class-dependent 28x28 images: class c lights up a band at row 2c + 3."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    images = (rng.random((n, 28, 28)) * 40).astype(np.uint8)
    for i, c in enumerate(labels):
        images[i, 2 * c + 3: 2 * c + 7, 4:24] = 230
    return images, labels.astype(np.uint8)


@pytest.fixture(scope="session")
def mnist_root(tmp_path_factory):
    """A tiny MNIST-format data root (600 train / 300 test synthetic digits)."""
    root = tmp_path_factory.mktemp("data")
    raw = root / "MNIST" / "raw"
    raw.mkdir(parents=True)
    for split, n, seed in (("train", 600, 1), ("t10k", 300, 2)):
        x, y = synthetic_digits(n, seed)
        write_idx(raw / f"{split}-images-idx3-ubyte", x)
        write_idx(raw / f"{split}-labels-idx1-ubyte", y)
    return root


def make_advset(counts=None, seed=0, domain="MNIST"):
    """Synthetic example set; ``counts`` maps entry name -> images per split (10 classes cycled)."""
    counts = counts or {REAL: 800, "FGSM": 500, "PGD": 500}
    g = torch.Generator().manual_seed(seed)
    shape = (3, 32, 32) if domain == "CIFAR10" else (1, 28, 28)
    entries = []
    for split in (Split.train, Split.test):
        for k, (name, n) in enumerate(counts.items()):
            x = (torch.rand(n, *shape, generator=g) * 0.5 + 0.1 * k).clamp(0, 1)
            y = torch.arange(n) % 10
            entries.append(AdvEntry(name, split, x, y, torch.arange(n)))
    return AdvExampleSet(domain, "conv4", entries, {"synthetic": seed, "counts": counts})


@pytest.fixture
def advset():
    return make_advset()


class LinearVictim(torch.nn.Module):
    """Logits = W x + b on flattened images; exposes the victim interface used by attacks."""

    def __init__(self, weight, bias, domain="MNIST"):
        super().__init__()
        self.weight = torch.nn.Parameter(weight)
        self.bias = torch.nn.Parameter(bias)
        self.num_classes = weight.shape[0]
        self.arch = "linear"

    def forward(self, x):
        return x.flatten(1) @ self.weight.T + self.bias


@pytest.fixture
def linear_victim():
    g = torch.Generator().manual_seed(3)
    return LinearVictim(torch.randn(10, 784, generator=g) * 0.05, torch.zeros(10))


def tiny_run_config(data_root, **overrides):
    """Settings for a seconds-long end-to-end CLI run on the synthetic MNIST root."""
    cfg = dict(dataset="AdvMNIST", shots=1, train_query_size=10, test_query_size=10, task_number=4,
               inner_update_times=1, finetune_times=2, total_tasks=40, epochs=1, test_tasks=10,
               meta_gradient_mode="first_order", train_adversaries=["FGSM"], test_adversaries=["semantic"],
               validation_adversary="none", victim_epochs=1, max_train_images=200, max_test_images=200,
               dnn_epochs=1, dnn_batch_size=32, data_root=str(data_root))
    cfg.update(overrides)
    return cfg


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(request):
    """Record and print one pass/fail line per acceptance criterion."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def report(name, passed, detail=""):
        line = f"[acceptance] {name}: {'PASS' if passed else 'FAIL'}{' - ' + detail if detail else ''}"
        ACCEPTANCE_LINES.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
