"""Non-gradient adversaries: pixel negation and a rotation/translation grid search."""

import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


def semantic_attack(images):
    """Negative image: every pixel ``p`` becomes ``1 - p``."""
    return 1.0 - images


@dataclass(frozen=True)
class SpatialGrid:
    """Candidate transforms; translations are fractions of the image side."""

    angles: tuple = tuple(np.linspace(-30.0, 30.0, 7).tolist())
    dxs: tuple = (-0.1, 0.0, 0.1)
    dys: tuple = (-0.1, 0.0, 0.1)

    def candidates(self):
        return list(itertools.product(self.angles, self.dxs, self.dys))

    def to_dict(self):
        return {"angles": list(self.angles), "dxs": list(self.dxs), "dys": list(self.dys)}


IDENTITY_GRID = SpatialGrid(angles=(0.0,), dxs=(0.0,), dys=(0.0,))


def transform_images(images, angle, dx, dy):
    """Rotate by ``angle`` degrees about the centre and shift by (dx, dy) image fractions."""
    if angle == 0 and dx == 0 and dy == 0:
        return images.clone()
    a = math.radians(angle)
    theta = torch.tensor(
        [[math.cos(a), -math.sin(a), -2.0 * dx], [math.sin(a), math.cos(a), -2.0 * dy]],
        dtype=images.dtype,
    )
    grid = F.affine_grid(theta.expand(images.shape[0], 2, 3), list(images.shape), align_corners=False)
    out = F.grid_sample(images, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out.clamp(0.0, 1.0)


@torch.no_grad()
def spatial_attack(model, images, labels, search_config=None):
    """Per image, the grid candidate with the highest victim cross-entropy.

    Returns (adversarial images, index of the chosen candidate per image).
    """
    grid = search_config or SpatialGrid()
    cands = grid.candidates()
    best = images.clone()
    best_loss = torch.full((images.shape[0],), float("-inf"))
    choice = torch.zeros(images.shape[0], dtype=torch.long)
    for k, (angle, dx, dy) in enumerate(cands):
        moved = transform_images(images, angle, dx, dy)
        loss = F.cross_entropy(model(moved), labels, reduction="none")
        better = loss > best_loss
        best[better] = moved[better]
        best_loss = torch.where(better, loss, best_loss)
        choice[better] = k
    return best, choice
