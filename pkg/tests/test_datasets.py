import numpy as np
import pytest
import torch

from metadet.datasets import (
    Domain,
    ImageDataset,
    Split,
    class_partition,
    data_root,
    load_split,
    parse_domain,
    parse_split,
    read_idx,
)
from metadet.errors import ConfigurationError, IngestionError

from conftest import write_idx


@pytest.mark.parametrize("name,expected", [
    ("MNIST", Domain.MNIST), ("AdvMNIST", Domain.MNIST), ("fashion-mnist", Domain.FashionMNIST),
    ("AdvFashionMNIST", Domain.FashionMNIST), ("cifar10", Domain.CIFAR10), ("AdvCIFAR", Domain.CIFAR10),
])
def test_parse_domain_aliases(name, expected):
    assert parse_domain(name) is expected


def test_parse_errors():
    with pytest.raises(ConfigurationError):
        parse_domain("SVHN")
    with pytest.raises(ConfigurationError):
        parse_split("validation")
    assert parse_split(Split.test) is Split.test


def test_domain_shapes():
    assert Domain.MNIST.shape == (1, 28, 28)
    assert Domain.FashionMNIST.shape == (1, 28, 28)
    assert Domain.CIFAR10.shape == (3, 32, 32)


def test_read_idx_roundtrip_plain_and_gz(tmp_path):
    arr = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    write_idx(tmp_path / "a-idx3-ubyte", arr)
    write_idx(tmp_path / "b-idx3-ubyte.gz", arr)
    assert np.array_equal(read_idx(tmp_path / "a-idx3-ubyte"), arr)
    # the .gz sibling is found when the plain file is absent
    assert np.array_equal(read_idx(tmp_path / "b-idx3-ubyte"), arr)


def test_read_idx_rejects_bad_files(tmp_path):
    (tmp_path / "bad").write_bytes(b"\x01\x00\x08\x01\x00\x00\x00\x02ab")
    with pytest.raises(IngestionError):
        read_idx(tmp_path / "bad")
    (tmp_path / "short").write_bytes(b"\x00\x00\x08\x01\x00\x00\x00\x05ab")
    with pytest.raises(IngestionError, match="payload"):
        read_idx(tmp_path / "short")
    with pytest.raises(IngestionError, match="not found"):
        read_idx(tmp_path / "missing")


def test_load_split_invariants(mnist_root):
    ds = load_split("MNIST", "train", mnist_root)
    assert ds.images.shape == (600, 1, 28, 28) and ds.images.dtype == torch.float32
    assert float(ds.images.min()) >= 0.0 and float(ds.images.max()) <= 1.0
    assert set(ds.labels.tolist()) == set(range(10))
    assert len(load_split("MNIST", "test", mnist_root)) == 300


def test_load_split_scaling_is_exact(mnist_root):
    raw = read_idx(mnist_root / "MNIST" / "raw" / "t10k-images-idx3-ubyte")
    ds = load_split("MNIST", "test", mnist_root)
    assert torch.equal(ds.images[:, 0], torch.from_numpy(raw.astype(np.float32)) / 255.0)


def test_missing_dataset_is_ingestion_error(tmp_path):
    with pytest.raises(IngestionError):
        load_split("FashionMNIST", "train", tmp_path)
    with pytest.raises(IngestionError):
        load_split("CIFAR10", "test", tmp_path)


def test_cifar_binary_reader(tmp_path):
    folder = tmp_path / "CIFAR10" / "cifar-10-batches-bin"
    folder.mkdir(parents=True)
    rng = np.random.default_rng(0)
    labels = np.arange(20, dtype=np.uint8) % 10
    pixels = rng.integers(0, 256, (20, 3 * 32 * 32), dtype=np.uint8)
    np.concatenate([labels[:, None], pixels], 1).tofile(folder / "test_batch.bin")
    ds = load_split("CIFAR10", "test", tmp_path)
    assert ds.images.shape == (20, 3, 32, 32)
    assert torch.equal(ds.labels, torch.from_numpy(labels.astype(np.int64)))
    assert torch.equal(ds.images[3].flatten(), torch.from_numpy(pixels[3].astype(np.float32)) / 255.0)
    (folder / "test_batch.bin").write_bytes(b"\x00" * 100)
    with pytest.raises(IngestionError):
        load_split("CIFAR10", "test", tmp_path)


def test_class_partition_and_subset():
    labels = torch.tensor([3, 1, 3, 0, 1])
    part = class_partition(labels)
    assert {k: v.tolist() for k, v in part.items()} == {0: [3], 1: [1, 4], 3: [0, 2]}
    ds = ImageDataset(Domain.MNIST, Split.train, torch.zeros(5, 1, 28, 28), labels)
    sub = ds.subset([4, 0])
    assert sub.labels.tolist() == [1, 3] and len(sub) == 2
    assert class_partition(ds)[1].tolist() == [1, 4]


def test_data_root_resolution(monkeypatch, tmp_path):
    monkeypatch.setenv("METADET_DATA_ROOT", str(tmp_path))
    assert data_root() == tmp_path
    assert data_root("/elsewhere") == data_root("/elsewhere")
    monkeypatch.delenv("METADET_DATA_ROOT")
    assert data_root().name == "data"
