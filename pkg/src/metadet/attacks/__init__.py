"""Adversaries, their budgets and the persisted adversarial example sets."""

from .advset import (
    REAL,
    AdvEntry,
    AdvExampleSet,
    build_adv_dataset,
    canonical_adversary,
    filter_successful,
    load_adv_dataset,
    register_adversary,
    registered_adversaries,
    save_adv_dataset,
)
from .budgets import AttackBudget, default_budgets
from .gradient import fgsm, iterative_linf, project_linf
from .l2 import carlini_wagner_l2, deepfool, l2_attack
from .transforms import IDENTITY_GRID, SpatialGrid, semantic_attack, spatial_attack, transform_images

# Cross-adversary groups used by the default experiment.
TRAIN_ADVERSARIES = ("FGSM", "MI-FGSM", "BIM", "PGD", "CW")
TEST_ADVERSARIES = ("semantic", "DeepFool", "SpatialTransformation")
