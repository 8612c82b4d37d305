"""
Image classifiers that the adversaries attack: conv-4, ResNet-10 and ResNet-18.

A :class:`VictimClassifier` wraps an ``nn.Module`` that is kept in inference
mode outside of :func:`train_victim`, so its logits are deterministic and
differentiable with respect to the input (the attacks need the latter).
"""

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datasets import Domain, ImageDataset, parse_domain
from .errors import ConfigurationError, ContractError, TrainingError
from .serialization import file_sha256, load_params, read_json, save_params, write_json

log = logging.getLogger(__name__)

ARCHS = ("conv4", "resnet10", "resnet18")
NUM_CLASSES = 10


class Conv4(nn.Module):
    """Four (conv3x3-64, BN, ReLU, maxpool2 ceil) blocks and a linear head."""

    def __init__(self, in_channels, image_size, num_classes=NUM_CLASSES, width=64):
        super().__init__()
        layers, c, s = [], in_channels, image_size
        for _ in range(4):
            layers += [
                nn.Conv2d(c, width, 3, padding=1),
                nn.BatchNorm2d(width),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2, ceil_mode=True),
            ]
            c, s = width, math.ceil(s / 2)
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(width * s * s, num_classes)

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet(nn.Module):
    # 3x3 stride-1 stem without the ImageNet max-pool, so 28x28 and 32x32 inputs
    # both keep a >= 4x4 map at the last stage.
    def __init__(self, blocks, in_channels, num_classes=NUM_CLASSES):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(in_channels, 64, 3, 1, 1, bias=False), nn.BatchNorm2d(64), nn.ReLU(inplace=True))
        stages, cin = [], 64
        for i, (n, cout) in enumerate(zip(blocks, (64, 128, 256, 512))):
            stride = 1 if i == 0 else 2
            for j in range(n):
                stages.append(BasicBlock(cin, cout, stride if j == 0 else 1))
                cin = cout
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(512, num_classes)

    def forward(self, x):
        out = self.stages(self.stem(x))
        return self.head(F.adaptive_avg_pool2d(out, 1).flatten(1))


class VictimClassifier:
    """A 10-class image classifier with its provenance."""

    def __init__(self, arch, domain, net, metadata=None):
        self.arch = arch
        self.domain = domain
        self.net = net.eval()
        self.num_classes = NUM_CLASSES
        self.metadata = dict(metadata or {})

    def __call__(self, images):
        """Differentiable logits; the network stays in inference mode."""
        check_images(images, self.domain)
        return self.net(images)

    logits_fn = __call__

    def parameter_count(self):
        return sum(p.numel() for p in self.net.parameters())

    def state(self):
        return dict(self.net.state_dict())


def check_images(images, domain):
    if not isinstance(images, torch.Tensor) or images.dim() != 4 or tuple(images.shape[1:]) != domain.shape:
        shape = tuple(images.shape) if isinstance(images, torch.Tensor) else type(images).__name__
        raise ContractError(f"expected images of shape (n, {', '.join(map(str, domain.shape))}), got {shape}")


def build_victim(arch, domain, seed=0) -> VictimClassifier:
    domain = parse_domain(domain)
    if arch not in ARCHS:
        raise ConfigurationError(f"unknown victim architecture {arch!r}; choose from {ARCHS}")
    c, h, w = domain.shape
    if h != w:
        raise ConfigurationError(f"{arch} stem expects square images, got {h}x{w}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if arch == "conv4":
            net = Conv4(c, h)
        elif arch == "resnet10":
            net = ResNet((1, 1, 1, 1), c)
        else:
            net = ResNet((2, 2, 2, 2), c)
    return VictimClassifier(arch, domain, net, {"init_seed": seed})


@dataclass
class VictimTrainConfig:
    epochs: int = 5
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    # Cap on training images (desk-scale runs); None uses the whole split.
    max_train: int = None


def train_victim(classifier, train_set: ImageDataset, config=None, test_set=None, out_dir=None):
    """Cross-entropy training with Adam. Deterministic for a fixed seed on CPU."""
    config = config or VictimTrainConfig()
    if train_set.domain is not classifier.domain:
        raise ContractError(f"train set domain {train_set.domain.value} != classifier domain {classifier.domain.value}")
    net = classifier.net
    gen = torch.Generator().manual_seed(config.seed)
    x, y = train_set.images, train_set.labels
    if config.max_train is not None and config.max_train < len(y):
        keep = torch.randperm(len(y), generator=gen)[: config.max_train]
        x, y = x[keep], y[keep]
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    net.train()
    for epoch in range(config.epochs):
        order = torch.randperm(len(y), generator=gen)
        total, seen = 0.0, 0
        for start in range(0, len(y), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss = F.cross_entropy(net(x[idx]), y[idx])
            if not torch.isfinite(loss):
                net.eval()
                raise TrainingError("victim loss became non-finite", epoch=epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        log.info("victim %s/%s epoch %d loss %.4f", classifier.arch, classifier.domain.value, epoch, total / seen)
    net.eval()
    meta = {
        "arch": classifier.arch,
        "domain": classifier.domain.value,
        "seed": config.seed,
        "epochs": config.epochs,
        "train_config": asdict(config),
        "init_seed": classifier.metadata.get("init_seed"),
    }
    if test_set is not None:
        meta["test_accuracy"] = accuracy(classifier, test_set)
    classifier.metadata.update(meta)
    if out_dir is not None:
        save_victim(classifier, out_dir)
    return classifier


@torch.no_grad()
def classify(classifier, images, batch_size=1000) -> torch.Tensor:
    """Logits (n, 10) in inference mode."""
    check_images(images, classifier.domain)
    classifier.net.eval()
    return torch.cat([classifier.net(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])


def accuracy(classifier, dataset: ImageDataset) -> float:
    pred = classify(classifier, dataset.images).argmax(1)
    return float((pred == dataset.labels).double().mean())


def save_victim(classifier, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_params(out / "params.bin", classifier.state())
    write_json(out / "victim.json", {**classifier.metadata, "arch": classifier.arch, "domain": classifier.domain.value})
    return out


def load_victim(path) -> VictimClassifier:
    path = Path(path)
    meta = read_json(path / "victim.json")
    victim = build_victim(meta["arch"], meta["domain"])
    victim.net.load_state_dict(load_params(path / "params.bin"))
    victim.net.eval()
    victim.metadata = meta
    return victim


def victim_hash(path) -> str:
    return file_sha256(Path(path) / "params.bin")
