"""
Two-way few-shot episodes over an adversarial example set.

A task pairs real images of one class with one adversary's examples of that
same class. Tasks hold indices into the set's entries; pixels are gathered
only when a task is materialized.

Pool file::

    b"MDPOOL01", uint64 header length, UTF-8 JSON header
    int32 table (num_tasks, 3 + 2 * shots + query_size), little-endian
    row = [adversary id, class, real-way label,
           support real idx (shots), support adversarial idx (shots),
           query real idx (q/2), query adversarial idx (q/2)]
"""

import hashlib
import io
import json
import logging
import struct
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attacks.advset import REAL
from .datasets import Split, parse_split
from .errors import ConfigurationError, ContractError, IngestionError, PoolError
from .seeding import numpy_rng

log = logging.getLogger(__name__)

WAY_MODES = ("fixed", "randomized")
POOL_MAGIC = b"MDPOOL01"


@dataclass(frozen=True)
class TaskConfig:
    ways: int = 2
    shots: int = 1
    train_query_size: int = 70
    test_query_size: int = 30
    way_mode: str = "fixed"
    total_tasks: int = 20000
    seed: int = 0

    def __post_init__(self):
        if self.ways != 2:
            raise ConfigurationError("only two-way tasks are supported")
        if self.shots < 1:
            raise ConfigurationError(f"shots must be >= 1, got {self.shots}")
        for name in ("train_query_size", "test_query_size"):
            q = getattr(self, name)
            if q < 2 or q % 2:
                raise ConfigurationError(f"{name} must be a positive even number, got {q}")
        if self.total_tasks < 1:
            raise ConfigurationError(f"total_tasks must be >= 1, got {self.total_tasks}")
        if self.way_mode not in WAY_MODES:
            raise ConfigurationError(f"way_mode must be one of {WAY_MODES}, got {self.way_mode!r}")

    def query_size(self, split):
        return self.train_query_size if parse_split(split) is Split.train else self.test_query_size

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class Task:
    """One episode; index tuples point into the (adversary, split) and real entries."""

    adversary: str
    image_class: int
    real_label: int  # way label of the real examples; adversarial way gets 1 - real_label
    split: Split
    support_real: tuple
    support_adv: tuple
    query_real: tuple
    query_adv: tuple

    @property
    def adv_label(self):
        return 1 - self.real_label

    @property
    def support(self):
        """List of (source, index, way label); source is "real" or the adversary."""
        return ([(REAL, i, self.real_label) for i in self.support_real]
                + [(self.adversary, i, self.adv_label) for i in self.support_adv])

    @property
    def query(self):
        return ([(REAL, i, self.real_label) for i in self.query_real]
                + [(self.adversary, i, self.adv_label) for i in self.query_adv])


@dataclass
class TaskBatch:
    support_x: torch.Tensor
    support_y: torch.Tensor
    query_x: torch.Tensor
    query_y: torch.Tensor
    task: Task = None


def materialize(task, advset) -> TaskBatch:
    real = advset.real(task.split)
    adv = advset.get(task.adversary, task.split)

    def gather(ri, ai):
        x = torch.cat([real.images[list(ri)], adv.images[list(ai)]])
        y = torch.tensor([task.real_label] * len(ri) + [task.adv_label] * len(ai), dtype=torch.long)
        return x, y

    sx, sy = gather(task.support_real, task.support_adv)
    qx, qy = gather(task.query_real, task.query_adv)
    return TaskBatch(sx, sy, qx, qy, task)


class SliceIndex:
    """Per-(adversary, class) index lists of one split, plus the real examples per class."""

    def __init__(self, advset, split, need):
        self.split = parse_split(split)
        self.need = need
        real = advset.real(self.split)
        self.real = {int(c): (real.labels == c).nonzero().squeeze(1).numpy() for c in real.labels.unique()}
        self.slices = []
        self.adv = {}
        skipped = []
        for name in advset.adversaries(self.split):
            labels = advset.get(name, self.split).labels
            for c in labels.unique().tolist():
                idx = (labels == c).nonzero().squeeze(1).numpy()
                if len(idx) >= need and len(self.real.get(c, ())) >= need:
                    self.slices.append((name, c))
                    self.adv[(name, c)] = idx
                else:
                    skipped.append((name, c))
        if skipped:
            log.info("%d slices below %d samples skipped: %s", len(skipped), need, skipped[:10])
        if not self.slices:
            raise PoolError(f"no (adversary, class) slice of split {self.split.value} has {need} samples")
        self.skipped = skipped


def _real_label(config, rng):
    if config.way_mode == "fixed":
        return 1
    return int(rng.random() < 0.5)


def _make_task(config, split, name, cls, real_label, real_idx, adv_idx):
    s = config.shots
    return Task(name, int(cls), real_label, split,
                tuple(int(i) for i in real_idx[:s]), tuple(int(i) for i in adv_idx[:s]),
                tuple(int(i) for i in real_idx[s:]), tuple(int(i) for i in adv_idx[s:]))


def sample_task(advset, config, rng, split="train", index=None) -> Task:
    """Draw one task independently: a uniform eligible slice, then samples without replacement."""
    split = parse_split(split)
    need = config.shots + config.query_size(split) // 2
    if advset is None and index is None:
        raise PoolError("empty adversarial example set")
    index = index or SliceIndex(advset, split, need)
    if index.need != need or index.split is not split:
        raise ContractError("slice index was built for a different configuration")
    name, cls = index.slices[rng.integers(len(index.slices))]
    real_idx = rng.choice(index.real[cls], need, replace=False)
    adv_idx = rng.choice(index.adv[(name, cls)], need, replace=False)
    return _make_task(config, split, name, cls, _real_label(config, rng), real_idx, adv_idx)


class _Cycler:
    """Hands out distinct-within-a-draw samples, visiting every sample once per cycle."""

    def __init__(self, items, rng):
        self.items = np.asarray(items)
        self.rng = rng
        self.queue = deque()

    def take(self, n):
        if len(self.queue) < n:
            pending = set(self.queue)
            self.queue.extend(i for i in self.rng.permutation(self.items).tolist() if i not in pending)
        return [self.queue.popleft() for _ in range(n)]


@dataclass
class TaskPool:
    tasks: list
    config: TaskConfig
    split: Split
    adversaries: list = field(default_factory=list)
    source_hash: str = ""

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    def __iter__(self):
        return iter(self.tasks)

    def to_bytes(self) -> bytes:
        return pool_to_bytes(self)

    @property
    def pool_hash(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()


def build_task_pool(advset, config, split="train", adversaries=None) -> TaskPool:
    """Build ``config.total_tasks`` tasks that together cover the set.

    Slices are visited in reshuffled cycles and each slice hands out its samples in
    reshuffled cycles, so every slice is used and (given enough tasks) every sample.
    Pure function of (set contents, config, split).
    """
    split = parse_split(split)
    if advset is None or not advset.adversaries(split):
        raise PoolError(f"adversarial example set has no adversarial entries for split {split.value}")
    if adversaries is not None:
        advset = advset.restrict(adversaries)
    need = config.shots + config.query_size(split) // 2
    index = SliceIndex(advset, split, need)
    rng = numpy_rng(config.seed, "pool", split.value)
    order = _Cycler(range(len(index.slices)), rng)
    real_cyc = {c: _Cycler(v, rng) for c, v in sorted(index.real.items())}
    adv_cyc = {k: _Cycler(index.adv[k], rng) for k in index.slices}
    tasks = []
    for _ in range(config.total_tasks):
        name, cls = index.slices[order.take(1)[0]]
        real_idx = real_cyc[cls].take(need)
        adv_idx = adv_cyc[(name, cls)].take(need)
        tasks.append(_make_task(config, split, name, cls, _real_label(config, rng), real_idx, adv_idx))
    names = sorted({n for n, _ in index.slices})
    return TaskPool(tasks, config, split, names, advset.manifest_hash)


def sample_minibatch(pool, k, rng) -> list:
    """K distinct tasks, uniform without replacement within the batch."""
    if k < 1 or k > len(pool):
        raise ContractError(f"cannot draw {k} distinct tasks from a pool of {len(pool)}")
    return [pool.tasks[i] for i in rng.choice(len(pool), k, replace=False)]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def pool_to_bytes(pool) -> bytes:
    cfg = pool.config
    q = cfg.query_size(pool.split)
    width = 3 + 2 * cfg.shots + q
    ids = {n: i for i, n in enumerate(pool.adversaries)}
    table = np.empty((len(pool), width), dtype="<i4")
    for r, t in enumerate(pool.tasks):
        table[r] = [ids[t.adversary], t.image_class, t.real_label,
                    *t.support_real, *t.support_adv, *t.query_real, *t.query_adv]
    header = {
        "config": cfg.to_dict(),
        "split": pool.split.value,
        "adversaries": list(pool.adversaries),
        "source_hash": pool.source_hash,
        "num_tasks": len(pool),
        "row_width": width,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(POOL_MAGIC)
    buf.write(struct.pack("<Q", len(head)))
    buf.write(head)
    buf.write(table.tobytes())
    return buf.getvalue()


def save_pool(pool, path):
    data = pool_to_bytes(pool)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_pool(path) -> TaskPool:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise IngestionError(path, "file not found") from None
    if raw[:8] != POOL_MAGIC:
        raise IngestionError(path, "bad pool magic")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16:16 + hlen])
    cfg = TaskConfig(**header["config"])
    split = parse_split(header["split"])
    n, width = header["num_tasks"], header["row_width"]
    body = raw[16 + hlen:]
    if len(body) != n * width * 4:
        raise IngestionError(path, "index table size does not match header")
    table = np.frombuffer(body, dtype="<i4").reshape(n, width)
    s, half = cfg.shots, cfg.query_size(split) // 2
    names = header["adversaries"]
    tasks = []
    for row in table.tolist():
        body_idx = row[3:]
        tasks.append(Task(names[row[0]], row[1], row[2], split,
                          tuple(body_idx[:s]), tuple(body_idx[s:2 * s]),
                          tuple(body_idx[2 * s:2 * s + half]), tuple(body_idx[2 * s + half:])))
    return TaskPool(tasks, cfg, split, names, header["source_hash"])
