"""
The conv-3 detector as a pure function of an ordered parameter dict.

Blocks are (conv3x3-64 pad 0, batch norm, ReLU, maxpool 2 stride 2) x 3 and a
linear head to 2 logits. Batch norm always normalizes with the statistics of
the current forward batch and keeps no running averages, so adapting a copy
of the parameters never leaks state between tasks.
"""

from collections import OrderedDict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datasets import parse_domain
from .errors import ContractError

WIDTH = 64
BLOCKS = 3
BN_EPS = 1e-5


def feature_size(side):
    for _ in range(BLOCKS):
        side = (side - 2) // 2
    return side


class Conv3(nn.Module):
    """Module form of the detector; same parameter names as :func:`init_conv3`."""

    def __init__(self, in_channels, side, width=WIDTH):
        super().__init__()
        c = in_channels
        for b in range(BLOCKS):
            setattr(self, f"conv{b}", nn.Conv2d(c, width, 3, padding=0))
            setattr(self, f"bn{b}", nn.BatchNorm2d(width, eps=BN_EPS, track_running_stats=False))
            c = width
        s = feature_size(side)
        self.fc = nn.Linear(width * s * s, 2)

    def forward(self, x):
        for b in range(BLOCKS):
            x = getattr(self, f"conv{b}")(x)
            x = getattr(self, f"bn{b}")(x)
            x = F.max_pool2d(F.relu(x), 2, 2)
        return self.fc(x.flatten(1))


def init_conv3(domain, seed=0) -> "OrderedDict[str, torch.Tensor]":
    """Fresh parameters with PyTorch's default layer initialisation."""
    c, h, w = parse_domain(domain).shape
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = Conv3(c, h)
    return OrderedDict((k, v.detach().clone()) for k, v in net.named_parameters())


def conv3_forward(params, images):
    if images.dim() != 4:
        raise ContractError(f"expected (n, C, H, W) images, got shape {tuple(images.shape)}")
    c_in = params["conv0.weight"].shape[1]
    fc_in = params["fc.weight"].shape[1]
    if images.shape[1] != c_in or images.shape[2] != images.shape[3] \
            or WIDTH * feature_size(images.shape[2]) ** 2 != fc_in:
        raise ContractError(f"image shape {tuple(images.shape[1:])} does not fit these detector parameters")
    x = images
    for b in range(BLOCKS):
        x = F.conv2d(x, params[f"conv{b}.weight"], params[f"conv{b}.bias"])
        x = F.batch_norm(x, None, None, params[f"bn{b}.weight"], params[f"bn{b}.bias"], training=True, eps=BN_EPS)
        x = F.max_pool2d(F.relu(x), 2, 2)
    return F.linear(x.flatten(1), params["fc.weight"], params["fc.bias"])


def cross_entropy(logits, labels):
    """Mean cross-entropy over the batch."""
    return F.cross_entropy(logits, labels)


def detector_module(params, domain) -> Conv3:
    """An ``nn.Module`` loaded with ``params`` (for conventional training loops)."""
    c, h, _ = parse_domain(domain).shape
    net = Conv3(c, h)
    with torch.no_grad():
        for k, p in net.named_parameters():
            p.copy_(params[k])
    return net


def clone_params(params, requires_grad=False):
    return OrderedDict((k, v.detach().clone().requires_grad_(requires_grad)) for k, v in params.items())


def flatten(params):
    return torch.cat([v.reshape(-1) for v in params.values()])


def unflatten(vector, like):
    if vector.numel() != parameter_count(like):
        raise ContractError("vector length does not match the parameter layout")
    out, i = OrderedDict(), 0
    for k, v in like.items():
        n = v.numel()
        out[k] = vector[i:i + n].view_as(v)
        i += n
    return out


def parameter_count(params):
    return sum(v.numel() for v in params.values())


@torch.no_grad()
def predict(params, images, forward=conv3_forward):
    """Way-label predictions (argmax of the two logits) for one batch."""
    return forward(params, images).argmax(1)
