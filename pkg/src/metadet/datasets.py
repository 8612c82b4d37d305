"""
Loading of the source image datasets (MNIST, Fashion-MNIST, CIFAR-10).

Files are read in their published binary formats from a data root laid out as::

    <root>/MNIST/raw/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]
    <root>/FashionMNIST/raw/...            (same IDX names)
    <root>/CIFAR10/cifar-10-batches-bin/{data_batch_1..5,test_batch}.bin

Images are returned as float32 tensors of shape (n, C, H, W) scaled by 1/255.
"""

import enum
import gzip
import logging
import os
import shutil
import struct
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError, IngestionError

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "METADET_DATA_ROOT"


class Domain(str, enum.Enum):
    MNIST = "MNIST"
    FashionMNIST = "FashionMNIST"
    CIFAR10 = "CIFAR10"

    @property
    def shape(self):
        """(C, H, W) of one image."""
        return (3, 32, 32) if self is Domain.CIFAR10 else (1, 28, 28)


class Split(str, enum.Enum):
    train = "train"
    test = "test"


_DOMAIN_ALIASES = {
    "mnist": Domain.MNIST,
    "fashionmnist": Domain.FashionMNIST,
    "fashion-mnist": Domain.FashionMNIST,
    "fmnist": Domain.FashionMNIST,
    "cifar10": Domain.CIFAR10,
    "cifar-10": Domain.CIFAR10,
    "cifar": Domain.CIFAR10,
}


def parse_domain(name) -> Domain:
    """Accepts enum members, canonical names and the Adv-prefixed dataset names."""
    if isinstance(name, Domain):
        return name
    key = str(name).strip().lower()
    if key.startswith("adv"):
        key = key[3:]
    try:
        return _DOMAIN_ALIASES[key]
    except KeyError:
        raise ConfigurationError(f"unknown domain {name!r}") from None


def parse_split(name) -> Split:
    try:
        return Split(str(getattr(name, "value", name)))
    except ValueError:
        raise ConfigurationError(f"unknown split {name!r}") from None


@dataclass(frozen=True)
class ImageDataset:
    domain: Domain
    split: Split
    images: torch.Tensor  # (n, C, H, W) float32 in [0, 1]
    labels: torch.Tensor  # (n,) int64 in [0, 9]

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, indices):
        idx = torch.as_tensor(indices, dtype=torch.long)
        return ImageDataset(self.domain, self.split, self.images[idx], self.labels[idx])


def data_root(root=None) -> Path:
    if root is not None:
        return Path(root)
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "metadet" / "data"


# ---------------------------------------------------------------------------
# IDX (MNIST family)
# ---------------------------------------------------------------------------

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}

_IDX_FILES = {
    Split.train: ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    Split.test: ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _open_maybe_gz(path: Path):
    if path.exists():
        return open(path, "rb")
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.open(gz, "rb")
    raise IngestionError(path, "file not found (also tried .gz)")


def read_idx(path) -> np.ndarray:
    path = Path(path)
    with _open_maybe_gz(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise IngestionError(path, "truncated header")
    zero, type_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or type_code not in _IDX_DTYPES:
        raise IngestionError(path, "bad IDX magic number")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IngestionError(path, "truncated header")
    shape = struct.unpack(">" + "I" * ndim, raw[4:header_end])
    dtype = np.dtype(_IDX_DTYPES[type_code])
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) - header_end != expected:
        raise IngestionError(path, f"expected {expected} payload bytes, found {len(raw) - header_end}")
    return np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(shape)


def _load_idx_split(folder: Path, split: Split):
    img_name, lbl_name = _IDX_FILES[split]
    images = read_idx(folder / img_name)
    labels = read_idx(folder / lbl_name)
    if images.ndim != 3 or images.shape[1:] != (28, 28):
        raise IngestionError(folder / img_name, f"unexpected image shape {images.shape}")
    if labels.shape != (images.shape[0],):
        raise IngestionError(folder / lbl_name, "label count does not match image count")
    return images[:, None, :, :], labels


# ---------------------------------------------------------------------------
# CIFAR-10 binary version
# ---------------------------------------------------------------------------

_CIFAR_RECORD = 1 + 3 * 32 * 32


def _load_cifar_split(folder: Path, split: Split):
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split is Split.train else ["test_batch.bin"]
    images, labels = [], []
    for name in names:
        path = folder / name
        if not path.exists():
            raise IngestionError(path, "file not found")
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size == 0 or raw.size % _CIFAR_RECORD:
            raise IngestionError(path, f"size {raw.size} is not a multiple of {_CIFAR_RECORD}")
        rec = raw.reshape(-1, _CIFAR_RECORD)
        labels.append(rec[:, 0])
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    labels = np.concatenate(labels)
    if labels.max() > 9:
        raise IngestionError(folder, "label byte out of range")
    return np.concatenate(images), labels


def _domain_folder(root: Path, domain: Domain) -> Path:
    if domain is Domain.CIFAR10:
        return root / "CIFAR10" / "cifar-10-batches-bin"
    return root / domain.value / "raw"


def load_split(domain, split, root=None) -> ImageDataset:
    """Read a full split, preserving file order, with pixels scaled to [0, 1]."""
    domain = parse_domain(domain)
    split = parse_split(split)
    folder = _domain_folder(data_root(root), domain)
    if domain is Domain.CIFAR10:
        images, labels = _load_cifar_split(folder, split)
    else:
        images, labels = _load_idx_split(folder, split)
    x = torch.from_numpy(images.astype(np.float32)).div_(255.0)
    y = torch.from_numpy(labels.astype(np.int64))
    return ImageDataset(domain, split, x, y)


def class_partition(dataset) -> dict:
    """Map class id -> sorted index array. Accepts an ImageDataset or a label sequence."""
    labels = dataset.labels if isinstance(dataset, ImageDataset) else dataset
    labels = np.asarray(labels.numpy() if isinstance(labels, torch.Tensor) else labels, dtype=np.int64)
    return {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}


# ---------------------------------------------------------------------------
# Download (first use only; afterwards files are read from the root)
# ---------------------------------------------------------------------------

_MIRRORS = {
    Domain.MNIST: "https://ossci-datasets.s3.amazonaws.com/mnist/",
    Domain.FashionMNIST: "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
}
_CIFAR_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"


def download(domain, root=None, timeout=60.0) -> Path:
    """Fetch the published files for ``domain`` into the data root if absent."""
    import tarfile

    domain = parse_domain(domain)
    root = data_root(root)
    folder = _domain_folder(root, domain)
    folder.mkdir(parents=True, exist_ok=True)
    if domain is Domain.CIFAR10:
        if (folder / "test_batch.bin").exists():
            return folder
        archive = root / "CIFAR10" / "cifar-10-binary.tar.gz"
        _fetch(_CIFAR_URL, archive, timeout)
        with tarfile.open(archive) as tar:
            tar.extractall(root / "CIFAR10")
        return folder
    for names in _IDX_FILES.values():
        for name in names:
            if (folder / name).exists() or (folder / f"{name}.gz").exists():
                continue
            _fetch(_MIRRORS[domain] + name + ".gz", folder / f"{name}.gz", timeout)
    return folder


def _fetch(url, dest: Path, timeout):
    log.info("downloading %s", url)
    tmp = dest.with_name(dest.name + ".part")
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp, open(tmp, "wb") as out:
            shutil.copyfileobj(resp, out)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise IngestionError(dest, f"download from {url} failed: {exc}") from exc
    tmp.replace(dest)
