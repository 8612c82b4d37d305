"""
Few-shot evaluation of a detector, benchmark protocols and the white-box combined model.

Every test task starts from a fresh copy of the master parameters, fine-tunes
on its support set, predicts its query set, and is scored by F1 with the real
examples as the positive class. The reported score is the mean over tasks.
"""

import logging
import statistics
import time
from collections import OrderedDict, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .attacks.advset import REAL, AdvEntry, AdvExampleSet, canonical_adversary, registered_adversaries
from .attacks.budgets import AttackBudget
from .attacks.gradient import iterative_linf
from .attacks.l2 import carlini_wagner_l2
from .datasets import Domain, Split, parse_domain
from .detector import clone_params, conv3_forward, predict
from .errors import BenchmarkError, ContractError, ProtocolError, TrainingError
from .meta import inner_update
from .serialization import canonical_json, write_json
from .tasks import materialize

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# F1
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def from_predictions(cls, predictions, truth, positive=1):
        pred = torch.as_tensor(predictions).reshape(-1)
        true = torch.as_tensor(truth).reshape(-1)
        if pred.shape != true.shape:
            raise ContractError(f"{pred.numel()} predictions for {true.numel()} labels")
        p, t = pred == positive, true == positive
        return cls(int((p & t).sum()), int((p & ~t).sum()), int((~p & t).sum()), int((~p & ~t).sum()))

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def f1(self):
        if self.tp + self.fp == 0 or self.tp + self.fn == 0:
            return 0.0
        precision = self.tp / (self.tp + self.fp)
        recall = self.tp / (self.tp + self.fn)
        if precision + recall == 0:
            return 0.0
        return 2 * precision * recall / (precision + recall)


def f1_score(predictions, truth, positive=1) -> float:
    """F1 of the ``positive`` class; 0 whenever precision or recall is undefined."""
    return ConfusionCounts.from_predictions(predictions, truth, positive).f1()


# ---------------------------------------------------------------------------
# few-shot evaluation
# ---------------------------------------------------------------------------


def fine_tune(master, support, steps, lr, forward=conv3_forward):
    """A copy of ``master`` after ``steps`` gradient steps on ``support``; the master is untouched."""
    theta = clone_params(master)
    if steps == 0:
        return theta
    adapted = inner_update(theta, support, lr, steps, forward=forward, create_graph=False)
    return clone_params(adapted.params)


def _fine_tune_trajectory(master, support, steps_values, lr, forward):
    """Parameter copies after each requested step count, from one adaptation run."""
    want = sorted(set(steps_values))
    out = {}
    if want[0] == 0:
        out[0] = clone_params(master)
    last = want[-1]
    if last > 0:
        adapted = inner_update(clone_params(master), support, lr, last, forward=forward, create_graph=False)
        for s in want:
            if s > 0:
                out[s] = clone_params(adapted.trajectory[s])
    return out


@dataclass
class EvaluationReport:
    method: str
    protocol: dict
    shots: int
    steps: int
    lr: float
    per_task_f1: list
    mean_f1: float
    per_adversary: dict
    failed_tasks: list = field(default_factory=list)
    hashes: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def to_dict(self, include_timing=True):
        d = asdict(self)
        if not include_timing:
            d.pop("timing")
        return d

    def to_json(self, include_timing=True):
        return canonical_json(self.to_dict(include_timing))

    def save(self, path):
        write_json(path, self.to_dict())
        return Path(path)


def _mean(xs):
    return sum(xs) / len(xs) if xs else float("nan")


def _summarize(method, protocol, pool, steps, lr, scores, adversaries, failed, hashes, timing):
    by_adv = defaultdict(list)
    for s, a in zip(scores, adversaries):
        by_adv[a].append(s)
    per_adv = {a: {"mean_f1": _mean(v), "tasks": len(v)} for a, v in sorted(by_adv.items())}
    return EvaluationReport(method, protocol or {}, pool.config.shots, steps, lr, scores, _mean(scores),
                            per_adv, failed, {**hashes, "pool": pool.pool_hash}, timing)


def evaluate_sweep(master, pool, advset, steps_values, lr, *, method="meta", protocol=None,
                   hashes=None, forward=conv3_forward):
    """One report per fine-tune step count, all sharing each task's adaptation run."""
    if len(pool) == 0:
        raise ContractError("empty task stream")
    params = master.params if hasattr(master, "params") else master
    steps_values = sorted(set(int(s) for s in steps_values))
    scores = {s: [] for s in steps_values}
    failed = {s: [] for s in steps_values}
    adversaries = []
    t0 = time.perf_counter()
    for i, task in enumerate(pool):
        batch = materialize(task, advset)
        adversaries.append(task.adversary)
        try:
            adapted = _fine_tune_trajectory(params, (batch.support_x, batch.support_y), steps_values, lr, forward)
        except TrainingError as exc:
            log.warning("task %d failed during fine-tuning: %s", i, exc)
            adapted = {}
        for s in steps_values:
            if s not in adapted:
                failed[s].append(i)
                scores[s].append(0.0)
                continue
            pred = predict(adapted[s], batch.query_x, forward)
            scores[s].append(f1_score(pred, batch.query_y, positive=task.real_label))
    elapsed = time.perf_counter() - t0
    timing = {"wall_seconds": elapsed, "ms_per_task": 1000 * elapsed / len(pool)}
    return {s: _summarize(method, protocol, pool, s, lr, scores[s], adversaries, failed[s], hashes or {}, timing)
            for s in steps_values}


def evaluate(master, pool, advset, steps=20, lr=0.001, **kwargs) -> EvaluationReport:
    """Fine-tune a master copy per task, score the query set, average F1 over tasks."""
    return evaluate_sweep(master, pool, advset, [steps], lr, **kwargs)[steps]


def measure_inference(params, batch, repetitions=100, warmup=3, forward=conv3_forward):
    """Forward-pass time of one batch in milliseconds (no fine-tuning): mean and population std."""
    if repetitions < 1:
        raise ContractError("repetitions must be >= 1")
    with torch.no_grad():
        for _ in range(warmup):
            forward(params, batch)
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            forward(params, batch)
            times.append(1000 * (time.perf_counter() - t0))
    return {"mean_ms": statistics.fmean(times), "std_ms": statistics.pstdev(times), "repetitions": repetitions,
            "batch_size": int(batch.shape[0])}


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

PROTOCOL_KINDS = ("cross_adversary", "cross_domain", "cross_architecture", "white_box")

# Full adversary groups; only the registered ones are used.
CROSS_ADVERSARY_TRAIN = ("FGSM", "MI-FGSM", "BIM", "PGD", "CW", "JSMA", "SPSA", "VAT", "MaxConfidence")
CROSS_ADVERSARY_TEST = ("EAD", "semantic", "DeepFool", "SpatialTransformation", "NewtonFool")
DEFAULT_VALIDATION = "BIM"

CROSS_DOMAIN_ROWS = {1: ("MNIST", "FashionMNIST"), 2: ("FashionMNIST", "MNIST")}
CROSS_ARCH_ROWS = {1: ("resnet10", "resnet18"), 2: ("resnet18", "resnet10"), 3: ("conv4", "resnet10"), 4: ("resnet10", "conv4")}
WHITE_BOX_ATTACKS = ("I-FGSM", "CW")


@dataclass(frozen=True)
class BenchmarkProtocol:
    kind: str
    train: dict  # {domain, arch, adversaries, split}
    test: dict
    validation: dict
    shots: int
    finetune_steps: int = 20
    test_tasks: int = 1000
    notes: tuple = ()

    def to_dict(self):
        d = asdict(self)
        d["notes"] = list(self.notes)
        return d


def _known(name):
    try:
        return canonical_adversary(name)
    except ValueError:
        return None


def _group(names, notes, label):
    kept, dropped = [], []
    for n in names:
        c = _known(n)
        (kept if c else dropped).append(c or n)
    if dropped:
        notes.append(f"{label} group restricted to implemented adversaries; not implemented: {', '.join(dropped)}")
    return kept


def make_protocol(kind, settings=None) -> BenchmarkProtocol:
    """Resolve a benchmark protocol from its kind and a small settings dict.

    Settings keys: domain, arch, shots, finetune_steps, test_tasks, train_adversaries,
    test_adversaries, validation_adversary, protocol (row number), attack (white box).
    """
    settings = dict(settings or {})
    kind = kind.replace("-", "_")
    if kind not in PROTOCOL_KINDS:
        raise ProtocolError(f"unknown protocol kind {kind!r}; choose from {PROTOCOL_KINDS}")
    shots = int(settings.pop("shots", 1))
    if shots not in (1, 5):
        raise ProtocolError(f"shots must be 1 or 5, got {shots}")
    steps = int(settings.pop("finetune_steps", 20))
    n_test = int(settings.pop("test_tasks", 1000))
    domain = parse_domain(settings.pop("domain", "MNIST")).value
    arch = settings.pop("arch", "conv4")
    notes = []
    everything = registered_adversaries()

    def validation_split(train_adv, val_domain, val_arch):
        val = settings.pop("validation_adversary", DEFAULT_VALIDATION)
        if val is None:
            return {}, train_adv
        val = canonical_adversary(val)
        remaining = [a for a in train_adv if a != val]
        if val in train_adv:
            notes.append(f"validation tasks use held-out adversary {val} (test split), excluded from training")
        return {"domain": val_domain, "arch": val_arch, "adversaries": [val], "split": "test"}, remaining

    if kind == "cross_adversary":
        train_adv = settings.pop("train_adversaries", None)
        test_adv = settings.pop("test_adversaries", None)
        train_adv = _group(CROSS_ADVERSARY_TRAIN, notes, "train") if train_adv is None else [canonical_adversary(a) for a in train_adv]
        test_adv = _group(CROSS_ADVERSARY_TEST, notes, "test") if test_adv is None else [canonical_adversary(a) for a in test_adv]
        overlap = sorted(set(train_adv) & set(test_adv))
        if overlap:
            raise ProtocolError(f"train and test adversary groups overlap: {overlap}")
        validation, train_adv = validation_split(train_adv, domain, arch)
        train = {"domain": domain, "arch": arch, "adversaries": train_adv, "split": "train"}
        test = {"domain": domain, "arch": arch, "adversaries": test_adv, "split": "test"}
    elif kind == "cross_domain":
        row = int(settings.pop("protocol", 1))
        if row not in CROSS_DOMAIN_ROWS:
            raise ProtocolError(f"cross-domain protocol must be one of {sorted(CROSS_DOMAIN_ROWS)}")
        d_train, d_test = CROSS_DOMAIN_ROWS[row]
        validation, train_adv = validation_split(everything, d_train, arch)
        train = {"domain": d_train, "arch": arch, "adversaries": train_adv, "split": "train"}
        test = {"domain": d_test, "arch": arch, "adversaries": everything, "split": "test"}
    elif kind == "cross_architecture":
        row = int(settings.pop("protocol", 3))
        if row not in CROSS_ARCH_ROWS:
            raise ProtocolError(f"cross-architecture protocol must be one of {sorted(CROSS_ARCH_ROWS)}")
        a_train, a_test = CROSS_ARCH_ROWS[row]
        validation, train_adv = validation_split(everything, domain, a_train)
        train = {"domain": domain, "arch": a_train, "adversaries": train_adv, "split": "train"}
        test = {"domain": domain, "arch": a_test, "adversaries": everything, "split": "test"}
    else:
        attack = settings.pop("attack", "I-FGSM")
        if attack not in WHITE_BOX_ATTACKS:
            raise ProtocolError(f"white-box attack must be one of {WHITE_BOX_ATTACKS}")
        train_adv = _group(CROSS_ADVERSARY_TRAIN, notes, "train")
        validation, train_adv = validation_split(train_adv, domain, arch)
        train = {"domain": domain, "arch": arch, "adversaries": train_adv, "split": "train"}
        test = {"domain": domain, "arch": arch, "adversaries": [f"white_box_{attack}"], "split": "test",
                "attack": attack}
        notes.append("white-box examples are generated from the clean test images against the frozen master")
    if settings:
        raise ProtocolError(f"unknown protocol settings keys: {sorted(settings)}")
    return BenchmarkProtocol(kind, train, test, validation, shots, steps, n_test, tuple(notes))


# ---------------------------------------------------------------------------
# white-box combined model
# ---------------------------------------------------------------------------


def combine(z_c, z_d, margin=1.0):
    """Combined logits from classifier logits ``z_c`` (n, N) and detector probabilities ``z_d`` (n,).

    Rows whose max logit is <= 0 are shifted up so the max becomes ``margin``;
    the shift is returned alongside and leaves argmax(z_c) unchanged.
    """
    top = z_c.max(1).values
    shift = torch.where(top <= 0, margin - top, torch.zeros_like(top)).detach()
    z = z_c + shift[:, None]
    extra = z_d * 2 * z.max(1).values
    return torch.cat([z, extra[:, None]], 1), shift


def detector_adv_probability(params, images, adv_label=0, forward=conv3_forward):
    """Softmax probability of the adversarial way."""
    return F.softmax(forward(params, images), 1)[:, adv_label]


def combined_logits(classifier, detector_params, images, adv_label=0, forward=conv3_forward):
    """Z_B over N + 1 outputs, differentiable in ``images``; returns (logits, shift)."""
    z_c = classifier(images)
    z_d = detector_adv_probability(detector_params, images, adv_label, forward)
    return combine(z_c, z_d)


def least_likely_target(logits, labels):
    masked = logits.detach().clone()
    masked.scatter_(1, labels[:, None], float("inf"))
    return masked.argmin(1)


def white_box_budget(attack, domain):
    """Defaults: I-FGSM eps 0.3 (MNIST family) or 8/255, 100 iterations; C&W l2 with 100 iterations."""
    domain = parse_domain(domain)
    if attack == "I-FGSM":
        eps = 8 / 255 if domain is Domain.CIFAR10 else 0.3
        return AttackBudget(epsilon=eps, step_size=eps / 40, iterations=100)
    return AttackBudget(epsilon=10.0, step_size=0.0, iterations=100, norm="l2", binary_search_steps=5,
                        learning_rate=0.05, initial_const=1.0)


@dataclass
class WhiteBoxResult:
    images: torch.Tensor  # successful examples only
    labels: torch.Tensor  # original classes
    targets: torch.Tensor
    source_indices: torch.Tensor
    success_rate: float
    shift_count: int
    budget: dict


def white_box_generate(classifier, detector_params, images, labels, adversary="I-FGSM", budget=None,
                       targets=None, adv_label=0, batch_size=250) -> WhiteBoxResult:
    """Targeted attack on the combined model toward a wrong class of the classifier.

    Success means the combined argmax equals the target (so the detector's extra
    output is not the argmax and the classifier is fooled).
    """
    if adversary not in WHITE_BOX_ATTACKS:
        raise ContractError(f"white-box adversary must be one of {WHITE_BOX_ATTACKS}")
    budget = budget or white_box_budget(adversary, classifier.domain)
    params = {k: v.detach() for k, v in detector_params.items()}
    model = lambda x: combined_logits(classifier, params, x, adv_label)[0]
    n = labels.shape[0]
    if targets is None:
        with torch.no_grad():
            targets = torch.cat([least_likely_target(classifier(images[i:i + batch_size]), labels[i:i + batch_size])
                                 for i in range(0, n, batch_size)])
    if (targets == labels).any():
        raise ContractError("target class equals the original label")
    if ((targets < 0) | (targets >= classifier.num_classes)).any():
        raise ContractError("targets must be classifier classes")
    kept, shifts = [], 0
    out = torch.empty_like(images)
    for i in range(0, n, batch_size):
        xb, tb = images[i:i + batch_size], targets[i:i + batch_size]
        if adversary == "I-FGSM":
            xa = iterative_linf("BIM", model, xb, tb, budget, targeted=True)
        else:
            xa = carlini_wagner_l2(model, xb, tb, budget, targeted=True)[0]
        with torch.no_grad():
            zb, shift = combined_logits(classifier, params, xa, adv_label)
        shifts += int((shift > 0).sum())
        kept.append(zb.argmax(1) == tb)
        out[i:i + batch_size] = xa
    ok = torch.cat(kept)
    idx = ok.nonzero().squeeze(1)
    if idx.numel() == 0:
        raise BenchmarkError(f"white-box {adversary}: zero successful examples")
    return WhiteBoxResult(out[idx], labels[idx], targets[idx], idx, idx.numel() / n, shifts, budget.to_dict())


def white_box_advset(domain, arch, real_images, real_labels, result, adversary, split="test"):
    """Test-split example set holding the clean images and the successful white-box examples."""
    name = f"white_box_{adversary}"
    entries = [
        AdvEntry(REAL, Split(split), real_images, real_labels, torch.arange(len(real_labels))),
        AdvEntry(name, Split(split), result.images, result.labels, result.source_indices),
    ]
    manifest = {"domain": parse_domain(domain).value, "arch": arch, "white_box": adversary,
                "success_rate": result.success_rate, "budget": result.budget, "shifted_rows": result.shift_count}
    return AdvExampleSet(domain, arch, entries, manifest)
