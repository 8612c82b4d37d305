"""
Double-network meta-training of the detector and the conventional baselines.

Per mini-batch of K tasks, every task-dedicated copy starts from the master
parameters, takes T gradient steps on its support set (inner update), and
contributes the gradient of its query loss with respect to the master copy.
The master then moves by ``-outer_lr`` times the summed gradients.
"""

import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .detector import clone_params, conv3_forward, cross_entropy, detector_module, init_conv3
from .errors import ConfigurationError, ContractError, TrainingError
from .seeding import derive_seed, numpy_rng
from .serialization import load_params, read_json, save_params, write_json
from .tasks import materialize, sample_minibatch

log = logging.getLogger(__name__)

GRADIENT_MODES = ("second_order", "first_order")


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 0.001
    outer_lr: float = 0.0001
    inner_steps: int = 12
    tasks_per_batch: int = 30
    epochs: int = 4
    way_mode: str = "fixed"
    shots: int = 1
    meta_gradient_mode: str = "second_order"
    finetune_steps: int = 20
    finetune_lr: float = None  # None: same as inner_lr
    max_iterations: int = None  # None: ceil(epochs * pool size / K)

    def __post_init__(self):
        if not (self.inner_lr > 0 and self.outer_lr > 0):
            raise ConfigurationError("learning rates must be > 0")
        if self.inner_steps < 0:
            raise ConfigurationError("inner_steps must be >= 0")
        if self.tasks_per_batch < 1:
            raise ConfigurationError("tasks_per_batch must be >= 1")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.meta_gradient_mode not in GRADIENT_MODES:
            raise ConfigurationError(f"meta_gradient_mode must be one of {GRADIENT_MODES}")

    @property
    def adapt_lr(self):
        return self.inner_lr if self.finetune_lr is None else self.finetune_lr

    def num_iterations(self, pool_size):
        if self.max_iterations is not None:
            return self.max_iterations
        return math.ceil(self.epochs * pool_size / self.tasks_per_batch)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# update rules
# ---------------------------------------------------------------------------


def _default_loss(forward):
    def loss(params, batch):
        x, y = batch
        return cross_entropy(forward(params, x), y)
    return loss


@dataclass
class Adaptation:
    origin: OrderedDict  # theta, the tensors the meta-gradient is taken with respect to
    params: OrderedDict  # theta' after the inner steps
    trajectory: list  # theta_0 .. theta_T
    losses: list
    differentiable: bool


def inner_update(params, support, lr, steps, *, forward=conv3_forward, loss_fn=None, create_graph=True) -> Adaptation:
    """``steps`` plain gradient-descent steps on the full support batch.

    With ``create_graph`` the steps stay on the autograd graph, so the result can be
    differentiated with respect to ``params`` (which must then require grad).
    Without it every iterate is a fresh leaf.
    """
    if isinstance(support, tuple) and len(support[0]) == 0:
        raise ContractError("support set is empty")
    loss_fn = loss_fn or _default_loss(forward)
    theta = params
    if not create_graph:
        theta = OrderedDict((k, v.detach().requires_grad_(True)) for k, v in params.items())
    trajectory, losses = [theta], []
    for t in range(steps):
        loss = loss_fn(theta, support)
        if not torch.isfinite(loss):
            raise TrainingError("non-finite support loss in inner update", step=t)
        grads = torch.autograd.grad(loss, list(theta.values()), create_graph=create_graph)
        if create_graph:
            theta = OrderedDict((k, v - lr * g) for (k, v), g in zip(theta.items(), grads))
        else:
            theta = OrderedDict((k, (v - lr * g).detach().requires_grad_(True)) for (k, v), g in zip(theta.items(), grads))
        trajectory.append(theta)
        losses.append(loss.item())
    return Adaptation(params, theta, trajectory, losses, create_graph)


def meta_gradient(adaptation, query, mode="second_order", *, forward=conv3_forward, loss_fn=None):
    """Gradient of the query loss at theta'.

    second_order: with respect to theta, through the inner steps.
    first_order: with respect to theta' (inner Jacobian taken as identity).
    Returns (ordered dict of gradients, query loss value).
    """
    if mode not in GRADIENT_MODES:
        raise ConfigurationError(f"unknown meta-gradient mode {mode!r}")
    loss_fn = loss_fn or _default_loss(forward)
    if mode == "second_order":
        if not adaptation.differentiable and len(adaptation.trajectory) > 1:
            raise ContractError("second-order meta-gradient needs the differentiable inner trajectory")
        wrt = adaptation.origin
    else:
        wrt = adaptation.params
    loss = loss_fn(adaptation.params, query)
    if not torch.isfinite(loss):
        raise TrainingError("non-finite query loss")
    grads = torch.autograd.grad(loss, list(wrt.values()))
    return OrderedDict(zip(wrt.keys(), grads)), loss.item()


@torch.no_grad()
def outer_update(master, grads, lr):
    """``master - lr * sum(grads)``, returned as a new dict."""
    if not grads:
        raise ContractError("no task gradients to apply")
    total = OrderedDict()
    for g in grads:
        if list(g.keys()) != list(master.keys()):
            raise ContractError("gradient layout does not match the master parameters")
        for k, v in g.items():
            if v.shape != master[k].shape:
                raise ContractError(f"gradient for {k} has shape {tuple(v.shape)}, expected {tuple(master[k].shape)}")
            if k in total:
                total[k] += v
            else:
                total[k] = v.detach().clone()
    return OrderedDict((k, m.detach().add(total[k], alpha=-lr)) for k, m in master.items())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class MasterCheckpoint:
    params: OrderedDict
    config: dict
    provenance: dict = field(default_factory=dict)

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_params(out / "params.bin", self.params)
        write_json(out / "checkpoint.json", {"config": self.config, "provenance": self.provenance})
        return out

    @classmethod
    def load(cls, path):
        path = Path(path)
        side = read_json(path / "checkpoint.json")
        return cls(load_params(path / "params.bin"), side["config"], side["provenance"])


def _validate(params, val_pool, val_advset, steps, lr):
    from .evalbench import evaluate

    report = evaluate(params, val_pool, val_advset, steps=steps, lr=lr)
    return report.mean_f1


class _EpochTracker:
    """Per-epoch checkpoints and the best-validation-F1 master."""

    def __init__(self, out_dir, config, provenance, val_pool, val_advset, steps, lr):
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.config, self.provenance = config, provenance
        self.val_pool, self.val_advset = val_pool, val_advset
        self.steps, self.lr = steps, lr
        self.history = []
        self.best = None

    def end_epoch(self, epoch, params, train_loss):
        val = None
        if self.val_pool is not None:
            val = _validate(params, self.val_pool, self.val_advset, self.steps, self.lr)
        self.history.append({"epoch": epoch, "train_loss": train_loss, "val_f1": val})
        log.info("epoch %d train loss %.4f val F1 %s", epoch, train_loss, "n/a" if val is None else f"{val:.4f}")
        ckpt = MasterCheckpoint(clone_params(params), self.config,
                                {**self.provenance, "epoch": epoch, "val_f1": val})
        if self.out_dir is not None:
            ckpt.save(self.out_dir / f"epoch_{epoch}")
        self.last = ckpt
        if self.best is None or (val is not None and val > self.best.provenance["val_f1"]):
            self.best = ckpt

    def finish(self):
        # without validation the last epoch wins
        best = self.best if self.val_pool is not None else self.last
        best.provenance = {**best.provenance, "best_epoch": best.provenance["epoch"], "history": self.history}
        if self.out_dir is not None:
            best.save(self.out_dir)
        return best


def train_meta(pool, advset, config, seed=0, *, init=None, val_pool=None, val_advset=None,
               out_dir=None, callback=None, provenance=None) -> MasterCheckpoint:
    """Meta-train a master detector on ``pool``; returns the best-epoch checkpoint.

    ``callback(iteration, tasks, master)`` runs after every outer update.
    """
    if pool.config.shots != config.shots or pool.config.way_mode != config.way_mode:
        raise ContractError("pool shots/way_mode differ from the meta-training config")
    master = clone_params(init if init is not None else init_conv3(advset.domain, derive_seed(seed, "init")))
    rng = numpy_rng(seed, "meta", "batches")
    n_iter = config.num_iterations(len(pool))
    k = config.tasks_per_batch
    second = config.meta_gradient_mode == "second_order"
    prov = {"method": "meta", "seed": seed, "pool_hash": pool.pool_hash, "iterations": n_iter,
            "domain": advset.domain.value, **(provenance or {})}
    tracker = _EpochTracker(out_dir, config.to_dict(), prov, val_pool, val_advset,
                            config.finetune_steps, config.adapt_lr)
    epoch_of = lambda i: min(i * k // len(pool), config.epochs - 1)
    losses, t0 = [], time.perf_counter()
    for it in range(n_iter):
        epoch = epoch_of(it)
        tasks = sample_minibatch(pool, k, rng)
        grads = []
        for j, task in enumerate(tasks):
            batch = materialize(task, advset)
            theta = clone_params(master, requires_grad=True)
            try:
                adapted = inner_update(theta, (batch.support_x, batch.support_y), config.inner_lr,
                                       config.inner_steps, create_graph=second)
                g, qloss = meta_gradient(adapted, (batch.query_x, batch.query_y), config.meta_gradient_mode)
            except TrainingError as exc:
                raise TrainingError(f"meta-training diverged: {exc}", epoch=epoch, step=it,
                                    provenance={**prov, "task_index": j, "adversary": task.adversary}) from exc
            grads.append(g)
            losses.append(qloss)
        master = outer_update(master, grads, config.outer_lr)
        if callback is not None:
            callback(it, tasks, master)
        if it % 20 == 0:
            log.info("iteration %d/%d query loss %.4f (%.1fs)", it, n_iter, float(np.mean(losses[-k:])), time.perf_counter() - t0)
        if it == n_iter - 1 or epoch_of(it + 1) != epoch:
            train_loss = float(np.mean(losses)) if losses else float("nan")
            losses = []
            tracker.end_epoch(epoch, master, train_loss)
    return tracker.finish()


# ---------------------------------------------------------------------------
# conventional trainers
# ---------------------------------------------------------------------------


def train_conventional(init, batches, lr, domain):
    """Plain SGD on a ``Conv3`` module over the given (x, y) batches.

    Returns the parameter dict after every step.
    """
    net = detector_module(init, domain).train()
    opt = torch.optim.SGD(net.parameters(), lr=lr, foreach=False)
    out = []
    for x, y in batches:
        loss = cross_entropy(net(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        out.append(OrderedDict((k, v.detach().clone()) for k, v in net.named_parameters()))
    return out


@dataclass(frozen=True)
class DnnConfig:
    epochs: int = 4
    batch_size: int = 128
    lr: float = 1e-3
    finetune_steps: int = 20
    finetune_lr: float = 0.001

    def to_dict(self):
        return asdict(self)


def dnn_training_set(advset, balanced, seed=0, split="train", adversaries=None):
    """Real examples labelled 1 and adversarial examples labelled 0; optionally down-sampled."""
    names = advset.adversaries(split) if adversaries is None else list(adversaries)
    if not names:
        raise ContractError("adversarial example set has no adversarial entries")
    real = advset.real(split)
    adv_x = torch.cat([advset.get(n, split).images for n in names])
    if balanced and len(adv_x) > len(real):
        keep = numpy_rng(seed, "dnn", "balance").choice(len(adv_x), len(real), replace=False)
        adv_x = adv_x[torch.from_numpy(np.sort(keep))]
    x = torch.cat([real.images, adv_x])
    y = torch.cat([torch.ones(len(real), dtype=torch.long), torch.zeros(len(adv_x), dtype=torch.long)])
    return x, y


def train_dnn(advset, balanced, config=None, seed=0, *, val_pool=None, val_advset=None,
              out_dir=None, adversaries=None, provenance=None) -> MasterCheckpoint:
    """Conventionally trained conv-3 real-vs-adversarial classifier (Adam, mini-batches)."""
    config = config or DnnConfig()
    x, y = dnn_training_set(advset, balanced, seed, adversaries=adversaries)
    params = init_conv3(advset.domain, derive_seed(seed, "init"))
    net = detector_module(params, advset.domain).train()
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(derive_seed(seed, "dnn", "order"))
    prov = {"method": "dnn_balanced" if balanced else "dnn", "seed": seed, "domain": advset.domain.value,
            "class_counts": {"real": int(y.sum()), "adversarial": int((y == 0).sum())}, **(provenance or {})}
    tracker = _EpochTracker(out_dir, config.to_dict(), prov, val_pool, val_advset,
                            config.finetune_steps, config.finetune_lr)
    for epoch in range(config.epochs):
        order = torch.randperm(len(y), generator=gen)
        total, seen = 0.0, 0
        for start in range(0, len(y), config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue  # batch statistics need two samples
            loss = cross_entropy(net(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise TrainingError("non-finite DNN loss", epoch=epoch, step=start // config.batch_size, provenance=prov)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        params = OrderedDict((k, v.detach().clone()) for k, v in net.named_parameters())
        tracker.end_epoch(epoch, params, total / seen)
    return tracker.finish()
