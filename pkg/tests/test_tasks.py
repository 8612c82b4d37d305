import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from metadet.attacks import REAL
from metadet.datasets import Split
from metadet.errors import ConfigurationError, ContractError, IngestionError, PoolError
from metadet.tasks import (
    SliceIndex,
    TaskConfig,
    build_task_pool,
    load_pool,
    materialize,
    sample_minibatch,
    sample_task,
    save_pool,
)

from conftest import make_advset


SHARED = make_advset()


def check_task(task, advset, config):
    """Raise AssertionError unless ``task`` satisfies every episode invariant."""
    s, q = config.shots, config.query_size(task.split)
    assert len(task.support_real) == len(task.support_adv) == s
    assert len(task.query_real) == len(task.query_adv) == q // 2
    assert task.real_label in (0, 1) and task.adv_label == 1 - task.real_label
    if config.way_mode == "fixed":
        assert task.real_label == 1
    assert task.adversary != REAL
    real, adv = advset.real(task.split), advset.get(task.adversary, task.split)
    for idx in (task.support_real, task.query_real):
        assert all(int(real.labels[i]) == task.image_class for i in idx)
    for idx in (task.support_adv, task.query_adv):
        assert all(int(adv.labels[i]) == task.image_class for i in idx)
    # support and query disjoint, no repeats inside either
    for a, b in ((task.support_real, task.query_real), (task.support_adv, task.query_adv)):
        assert len(set(a) | set(b)) == len(a) + len(b)
    batch = materialize(task, advset)
    assert batch.support_x.shape[0] == 2 * s and batch.query_x.shape[0] == q
    assert batch.support_y.tolist().count(task.real_label) == s
    assert batch.query_y.tolist().count(task.real_label) == q // 2


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TaskConfig(ways=3)
    with pytest.raises(ConfigurationError):
        TaskConfig(shots=0)
    with pytest.raises(ConfigurationError):
        TaskConfig(train_query_size=71)
    with pytest.raises(ConfigurationError):
        TaskConfig(way_mode="mixed")
    cfg = TaskConfig()
    assert (cfg.ways, cfg.shots, cfg.train_query_size, cfg.test_query_size, cfg.total_tasks) == (2, 1, 70, 30, 20000)
    assert cfg.query_size("train") == 70 and cfg.query_size(Split.test) == 30


@settings(max_examples=60, deadline=None)
@given(shots=st.integers(1, 5), half=st.integers(1, 15), mode=st.sampled_from(["fixed", "randomized"]),
       split=st.sampled_from(["train", "test"]), seed=st.integers(0, 2**31))
def test_sampled_task_invariants(shots, half, mode, split, seed):
    cfg = TaskConfig(shots=shots, train_query_size=2 * half, test_query_size=2 * half, way_mode=mode)
    advset = SHARED
    task = sample_task(advset, cfg, np.random.default_rng(seed), split=split)
    check_task(task, advset, cfg)


def test_pool_invariants_and_determinism(advset):
    cfg = TaskConfig(shots=2, total_tasks=300, way_mode="randomized", seed=4)
    pool = build_task_pool(advset, cfg)
    for task in pool:
        check_task(task, advset, cfg)
    assert build_task_pool(advset, cfg).to_bytes() == pool.to_bytes()
    assert build_task_pool(advset, TaskConfig(shots=2, total_tasks=300, way_mode="randomized", seed=5)).pool_hash \
        != pool.pool_hash


def test_pool_coverage(advset):
    cfg = TaskConfig(total_tasks=20000)
    pool = build_task_pool(advset, cfg)
    seen = {}
    for t in pool:
        seen.setdefault(REAL, set()).update(t.support_real + t.query_real)
        seen.setdefault(t.adversary, set()).update(t.support_adv + t.query_adv)
    for name in (REAL, "FGSM", "PGD"):
        n = len(advset.get(name, "train"))
        assert len(seen[name]) >= 0.99 * n, name
    slices = {(t.adversary, t.image_class) for t in pool}
    assert slices == set(SliceIndex(advset, "train", 36).slices)


def test_pool_skips_small_slices_and_fails_when_none_left():
    small = make_advset({REAL: 400, "FGSM": 100}, seed=1)  # 10 adversarial per class
    with pytest.raises(PoolError):
        build_task_pool(small, TaskConfig(total_tasks=5))
    pool = build_task_pool(small, TaskConfig(total_tasks=5, train_query_size=10))
    assert len(pool) == 5
    with pytest.raises(PoolError):
        build_task_pool(make_advset({REAL: 400}), TaskConfig(total_tasks=5))


def test_pool_restricted_to_adversaries(advset):
    pool = build_task_pool(advset, TaskConfig(total_tasks=50), adversaries=["PGD"])
    assert {t.adversary for t in pool} == {"PGD"} and pool.adversaries == ["PGD"]


def test_minibatch_distinct_and_bounded(advset):
    pool = build_task_pool(advset, TaskConfig(total_tasks=40))
    rng = np.random.default_rng(0)
    for _ in range(20):
        batch = sample_minibatch(pool, 30, rng)
        assert len({id(t) for t in batch}) == 30
    assert len(sample_minibatch(pool, 40, rng)) == 40
    with pytest.raises(ContractError):
        sample_minibatch(pool, 41, rng)


def test_pool_file_round_trip(tmp_path, advset):
    pool = build_task_pool(advset, TaskConfig(shots=3, total_tasks=64, way_mode="randomized"), split="test")
    digest = save_pool(pool, tmp_path / "p.pool")
    back = load_pool(tmp_path / "p.pool")
    assert back.tasks == pool.tasks and back.pool_hash == digest == pool.pool_hash
    assert back.config == pool.config and back.split is Split.test
    raw = (tmp_path / "p.pool").read_bytes()
    (tmp_path / "bad.pool").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(IngestionError):
        load_pool(tmp_path / "bad.pool")
    (tmp_path / "short.pool").write_bytes(raw[:-4])
    with pytest.raises(IngestionError):
        load_pool(tmp_path / "short.pool")


def test_materialize_orders_real_then_adversarial(advset):
    cfg = TaskConfig(shots=2, train_query_size=4)
    task = sample_task(advset, cfg, np.random.default_rng(1))
    b = materialize(task, advset)
    real = advset.real("train").images
    assert torch.equal(b.support_x[0], real[task.support_real[0]])
    assert b.support_y.tolist() == [1, 1, 0, 0]
