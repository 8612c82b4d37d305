"""Deterministic fan-out of one root seed into per-stage seeds."""

import hashlib

import numpy as np
import torch


def derive_seed(root, *keys) -> int:
    text = ":".join([str(int(root))] + [str(k) for k in keys])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")


def numpy_rng(root, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *keys))


def torch_generator(root, *keys) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(root, *keys))
