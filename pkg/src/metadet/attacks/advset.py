"""
Adversarial example sets: generation, success filtering and persistence.

On disk one directory holds one (domain, victim architecture) set::

    manifest.json
    <adversary>__<split>.images.bin   float32 (n, C, H, W)
    <adversary>__<split>.labels.bin   int64 original class ids
    <adversary>__<split>.source.bin   int64 row indices into the source split
"""

import logging
import re
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..datasets import Split, load_split, parse_domain, parse_split
from ..errors import ConfigurationError, ContractError
from ..seeding import derive_seed, numpy_rng
from ..serialization import file_sha256, json_sha256, read_json, read_tensor, write_json, write_tensor
from .budgets import default_budgets
from .gradient import fgsm, iterative_linf
from .l2 import carlini_wagner_l2, deepfool
from .transforms import SpatialGrid, semantic_attack, spatial_attack

log = logging.getLogger(__name__)

REAL = "real"


@dataclass(frozen=True)
class Adversary:
    name: str
    run: object  # (model, images, labels, budget, generator) -> images
    needs_budget: bool = True


_REGISTRY = {}
_ALIASES = {}


def register_adversary(name, run, needs_budget=True, aliases=()):
    """Add a third-party adversary; ``run(model, x, y, budget, generator) -> x_adv``."""
    _REGISTRY[name] = Adversary(name, run, needs_budget)
    for key in (name, *aliases):
        _ALIASES[_norm(key)] = name


def _norm(name):
    return re.sub(r"[^a-z0-9]", "", name.lower())


def canonical_adversary(name) -> str:
    if name == REAL:
        return REAL
    try:
        return _ALIASES[_norm(name)]
    except KeyError:
        raise ConfigurationError(f"unknown adversary {name!r}; registered: {sorted(_REGISTRY)}") from None


def registered_adversaries():
    return sorted(_REGISTRY)


register_adversary("FGSM", lambda m, x, y, b, g: fgsm(m, x, y, b.epsilon))
register_adversary("BIM", lambda m, x, y, b, g: iterative_linf("BIM", m, x, y, b, g), aliases=("I-FGSM",))
register_adversary("PGD", lambda m, x, y, b, g: iterative_linf("PGD", m, x, y, b, g))
register_adversary("MI-FGSM", lambda m, x, y, b, g: iterative_linf("MIFGSM", m, x, y, b, g))
register_adversary("CW", lambda m, x, y, b, g: carlini_wagner_l2(m, x, y, b)[0], aliases=("C&W", "CWL2", "CW2"))
register_adversary("DeepFool", lambda m, x, y, b, g: deepfool(m, x, y, b)[0])
register_adversary("semantic", lambda m, x, y, b, g: semantic_attack(x), needs_budget=False)
register_adversary(
    "SpatialTransformation",
    lambda m, x, y, b, g: spatial_attack(m, x, y, b if isinstance(b, SpatialGrid) else None)[0],
    needs_budget=False,
    aliases=("Spatial Transformation", "spatial", "ST"),
)


# ---------------------------------------------------------------------------
# filtering
# ---------------------------------------------------------------------------


@dataclass
class FilterResult:
    indices: torch.Tensor  # positions kept
    images: torch.Tensor
    labels: torch.Tensor
    kept_fraction: float


@torch.no_grad()
def filter_successful(victim, originals, adversarials, labels, batch_size=1000) -> FilterResult:
    """Keep adversarials the victim misclassifies (argmax != label)."""
    if originals.shape != adversarials.shape or adversarials.shape[0] != labels.shape[0]:
        raise ContractError("originals, adversarials and labels must be aligned")
    n = labels.shape[0]
    preds = [victim(adversarials[i:i + batch_size]).argmax(1) for i in range(0, n, batch_size)]
    pred = torch.cat(preds) if preds else torch.zeros(0, dtype=torch.long)
    keep = (pred != labels).nonzero().squeeze(1)
    return FilterResult(keep, adversarials[keep], labels[keep], keep.numel() / n if n else 0.0)


# ---------------------------------------------------------------------------
# the example set
# ---------------------------------------------------------------------------


@dataclass
class AdvEntry:
    adversary: str
    split: Split
    images: torch.Tensor
    labels: torch.Tensor
    source_indices: torch.Tensor

    def __len__(self):
        return self.labels.shape[0]


class AdvExampleSet:
    """Adversarial and real examples of one (domain, victim architecture)."""

    def __init__(self, domain, victim_arch, entries=(), manifest=None):
        self.domain = parse_domain(domain)
        self.victim_arch = victim_arch
        self.entries = {}
        for e in entries:
            self.add(e)
        self.manifest = manifest or {}

    def add(self, entry):
        self.entries[(entry.adversary, parse_split(entry.split))] = entry

    def get(self, adversary, split) -> AdvEntry:
        key = (adversary, parse_split(split))
        if key not in self.entries:
            raise KeyError(f"no entry for {adversary}/{key[1].value}")
        return self.entries[key]

    def real(self, split) -> AdvEntry:
        return self.get(REAL, split)

    def adversaries(self, split=None):
        names = {a for (a, s) in self.entries if a != REAL and (split is None or s is parse_split(split))}
        return sorted(names)

    def restrict(self, adversaries, splits=None):
        """A view holding only the named adversaries (plus the real entries)."""
        wanted = {canonical_adversary(a) for a in adversaries} | {REAL}
        keep_splits = None if splits is None else {parse_split(s) for s in splits}
        entries = [e for (a, s), e in self.entries.items()
                   if a in wanted and (keep_splits is None or s in keep_splits)]
        return AdvExampleSet(self.domain, self.victim_arch, entries, self.manifest)

    @property
    def manifest_hash(self):
        return json_sha256(self.manifest) if self.manifest else ""

    def __repr__(self):
        parts = ", ".join(f"{a}/{s.value}:{len(e)}" for (a, s), e in sorted(self.entries.items(), key=lambda kv: (kv[0][0], kv[0][1].value)))
        return f"AdvExampleSet({self.domain.value}, {self.victim_arch}, {parts})"


def _file_stem(adversary, split):
    return f"{re.sub(r'[^A-Za-z0-9_-]', '_', adversary)}__{parse_split(split).value}"


def save_adv_dataset(advset, out_dir, extra=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for (adv, split), e in sorted(advset.entries.items(), key=lambda kv: (kv[0][0], kv[0][1].value)):
        stem = _file_stem(adv, split)
        write_tensor(out / f"{stem}.images.bin", e.images)
        write_tensor(out / f"{stem}.labels.bin", e.labels)
        write_tensor(out / f"{stem}.source.bin", e.source_indices)
        records.append({"name": adv, "split": split.value, "stem": stem, "count": len(e),
                        "sha256": file_sha256(out / f"{stem}.images.bin")})
    manifest = dict(advset.manifest)
    manifest.update(extra or {})
    manifest.update({"domain": advset.domain.value, "arch": advset.victim_arch, "files": records})
    write_json(out / "manifest.json", manifest)
    advset.manifest = manifest
    return out


def load_adv_dataset(path, adversaries=None, splits=None) -> AdvExampleSet:
    """Load a persisted set, optionally only some adversaries/splits (the real entries always)."""
    path = Path(path)
    manifest = read_json(path / "manifest.json")
    wanted = None if adversaries is None else {canonical_adversary(a) for a in adversaries} | {REAL}
    keep_splits = None if splits is None else {parse_split(s).value for s in splits}
    entries = []
    for rec in manifest["files"]:
        if wanted is not None and rec["name"] not in wanted:
            continue
        if keep_splits is not None and rec["split"] not in keep_splits:
            continue
        stem = rec["stem"]
        entries.append(AdvEntry(
            rec["name"], parse_split(rec["split"]),
            read_tensor(path / f"{stem}.images.bin"),
            read_tensor(path / f"{stem}.labels.bin"),
            read_tensor(path / f"{stem}.source.bin"),
        ))
    return AdvExampleSet(manifest["domain"], manifest["arch"], entries, manifest)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def _subset_indices(n, cap, seed, split):
    if cap is None or cap >= n:
        return np.arange(n)
    rng = numpy_rng(seed, "subset", split.value)
    return np.sort(rng.permutation(n)[:cap])


def build_adv_dataset(domain, victim, adversaries, budgets=None, *, sources=None, root=None,
                      out_dir=None, seed=0, max_per_split=None, splits=("train", "test"),
                      batch_size=250, victim_hash=None) -> AdvExampleSet:
    """Attack every source image of each split, keep the successes, add the real entry.

    ``adversaries`` is a list used for every split or a {split: list} plan.
    ``max_per_split`` (an int or a {split: int} dict) caps how many source images
    are drawn, as a seeded subset, per split. Adversaries with zero successes are
    omitted and noted under ``warnings``.
    """
    domain = parse_domain(domain)
    if isinstance(adversaries, dict):
        plan = {parse_split(k): [canonical_adversary(a) for a in v] for k, v in adversaries.items()}
        splits = [s for s in (Split.train, Split.test) if s in plan]
    else:
        plan = {parse_split(s): [canonical_adversary(a) for a in adversaries] for s in splits}
    caps = max_per_split if isinstance(max_per_split, dict) else {s.value: max_per_split for s in plan}
    budgets = {**default_budgets(domain), **(budgets or {})}
    manifest = {
        "domain": domain.value,
        "arch": victim.arch,
        "victim_hash": victim_hash or "",
        "seed": seed,
        "max_per_split": {s.value: caps.get(s.value) for s in plan},
        "adversaries": [],
        "real": [],
        "warnings": [],
    }
    advset = AdvExampleSet(domain, victim.arch)
    for split in (parse_split(s) for s in splits):
        sources = sources or {}
        source = sources.get(split.value, sources.get(split))
        if source is None:
            source = load_split(domain, split, root)
        if source.domain is not domain:
            raise ContractError("source split domain does not match")
        picked = _subset_indices(len(source), caps.get(split.value), seed, split)
        picked_t = torch.from_numpy(picked)
        x_all, y_all = source.images[picked_t], source.labels[picked_t]
        advset.add(AdvEntry(REAL, split, x_all.clone(), y_all.clone(), picked_t.clone()))
        manifest["real"].append({"split": split.value, "count": len(picked)})
        for name in plan[split]:
            adv = _REGISTRY[name]
            budget = budgets.get(name) if adv.needs_budget else budgets.get(name, SpatialGrid() if name == "SpatialTransformation" else None)
            if adv.needs_budget and budget is None:
                raise ConfigurationError(f"no budget configured for {name}")
            adv_seed = derive_seed(seed, "attack", name, split.value)
            gen = torch.Generator().manual_seed(adv_seed)
            t0 = time.perf_counter()
            kept_x, kept_y, kept_src = [], [], []
            for start in range(0, len(picked), batch_size):
                xb, yb = x_all[start:start + batch_size], y_all[start:start + batch_size]
                xa = adv.run(victim, xb, yb, budget, gen)
                res = filter_successful(victim, xb, xa, yb)
                kept_x.append(res.images)
                kept_y.append(res.labels)
                kept_src.append(picked_t[start:start + batch_size][res.indices])
            xs, ys, src = torch.cat(kept_x), torch.cat(kept_y), torch.cat(kept_src)
            elapsed = time.perf_counter() - t0
            log.info("%s/%s: kept %d of %d in %.1fs", name, split.value, len(ys), len(picked), elapsed)
            budget_rec = budget.to_dict() if budget is not None else None
            rec = {"name": name, "split": split.value, "count": int(len(ys)), "source_count": int(len(picked)),
                   "kept_fraction": len(ys) / max(len(picked), 1), "budget": budget_rec, "seed": adv_seed}
            if len(ys) == 0:
                manifest["warnings"].append(f"{name}/{split.value}: zero successful examples; entry omitted")
                continue
            manifest["adversaries"].append(rec)
            advset.add(AdvEntry(name, split, xs, ys, src))
    advset.manifest = manifest
    if out_dir is not None:
        save_adv_dataset(advset, out_dir)
    return advset
