import json
import random
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from metadet.detector import flatten, init_conv3
from metadet.errors import BenchmarkError, ContractError, ProtocolError
from metadet.evalbench import (
    ConfusionCounts,
    combine,
    combined_logits,
    detector_adv_probability,
    evaluate,
    evaluate_sweep,
    f1_score,
    fine_tune,
    least_likely_target,
    make_protocol,
    measure_inference,
    white_box_advset,
    white_box_budget,
    white_box_generate,
)
from metadet.attacks import AttackBudget
from metadet.tasks import TaskConfig, build_task_pool

from conftest import LinearVictim, make_advset


# ---------------------------------------------------------------------------
# F1
# ---------------------------------------------------------------------------


def f1_oracle(tp, fp, fn):
    """Exact rational F1 = 2tp / (2tp + fp + fn); 0 when precision or recall is undefined or tp = 0."""
    if tp == 0:
        return Fraction(0)
    return Fraction(2 * tp, 2 * tp + fp + fn)


def random_confusions(n, seed):
    """Confusion configurations with every zero-denominator shape represented."""
    rng = random.Random(seed)
    out = [(0, 0, 0, 5), (0, 0, 4, 1), (0, 3, 0, 2), (0, 3, 3, 0), (1, 0, 0, 0)]
    while len(out) < n:
        tp, fp, fn, tn = (rng.choice([0, rng.randint(0, 40)]) for _ in range(4))
        if tp + fp + fn + tn:
            out.append((tp, fp, fn, tn))
    return out


def f1_mismatches(configs):
    bad = []
    for tp, fp, fn, tn in configs:
        truth = [1] * tp + [0] * fp + [1] * fn + [0] * tn
        pred = [1] * tp + [1] * fp + [0] * fn + [0] * tn
        got = f1_score(torch.tensor(pred), torch.tensor(truth))
        if abs(got - float(f1_oracle(tp, fp, fn))) > 1e-12:
            bad.append((tp, fp, fn, tn, got))
    return bad


def test_f1_matches_rational_oracle():
    assert f1_mismatches(random_confusions(1000, 0)) == []


def test_f1_worked_examples():
    # constant "real" predictor on a balanced query set: precision 1/2, recall 1
    assert f1_score(torch.ones(30), torch.tensor([1] * 15 + [0] * 15)) == pytest.approx(2 / 3)
    # tp 3, fp 1, fn 2: precision 3/4, recall 3/5, F1 = 2/3
    counts = ConfusionCounts(3, 1, 2, 4)
    assert counts.f1() == pytest.approx(2 / 3) and counts.total == 10
    assert f1_score(torch.zeros(4), torch.zeros(4)) == 0.0  # no positives anywhere
    assert f1_score(torch.tensor([0, 0]), torch.tensor([0, 1]), positive=0) == pytest.approx(2 / 3)
    with pytest.raises(ContractError):
        f1_score(torch.zeros(3), torch.zeros(4))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=80))
def test_f1_bounded_and_label_symmetric(pairs):
    pred = torch.tensor([p for p, _ in pairs])
    truth = torch.tensor([t for _, t in pairs])
    f = f1_score(pred, truth)
    assert 0.0 <= f <= 1.0
    assert f == f1_score(1 - pred, 1 - truth, positive=0)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def eval_set():
    return make_advset({"real": 400, "FGSM": 200, "PGD": 200}, seed=8)


def _pool(advset, n=20, mode="fixed", shots=1):
    return build_task_pool(advset, TaskConfig(shots=shots, total_tasks=n, test_query_size=10, way_mode=mode, seed=3),
                           split="test")


def _constant(way):
    return lambda params, x: torch.tensor([[1.0, 0.0] if way == 0 else [0.0, 1.0]]).expand(len(x), 2)


def test_constant_real_predictor(eval_set):
    pool = _pool(eval_set, 40, mode="randomized")
    rep = evaluate({}, pool, eval_set, steps=0, forward=_constant(1))
    expected = [2 / 3 if t.real_label == 1 else 0.0 for t in pool]
    assert rep.per_task_f1 == pytest.approx(expected)
    assert rep.mean_f1 == pytest.approx(float(np.mean(expected)))
    assert set(rep.per_adversary) == {t.adversary for t in pool}
    assert sum(v["tasks"] for v in rep.per_adversary.values()) == 40


def test_fine_tune_leaves_master_untouched(eval_set):
    master = init_conv3("MNIST", 0)
    before = flatten(master).clone()
    x = eval_set.real("test").images[:4]
    tuned = fine_tune(master, (x, torch.tensor([1, 1, 0, 0])), 3, 0.1)
    assert torch.equal(flatten(master), before)
    assert not torch.equal(flatten(tuned), before)
    assert torch.equal(flatten(fine_tune(master, (x, torch.tensor([1, 1, 0, 0])), 0, 0.1)), before)


def test_sweep_matches_individual_runs(eval_set):
    master = init_conv3("MNIST", 1)
    pool = _pool(eval_set, 6)
    sweep = evaluate_sweep(master, pool, eval_set, [0, 1, 3], 0.01)
    for s in (0, 1, 3):
        single = evaluate(master, pool, eval_set, steps=s, lr=0.01)
        assert single.per_task_f1 == sweep[s].per_task_f1
        assert single.to_json(include_timing=False) == sweep[s].to_json(include_timing=False)
    doc = json.loads(sweep[1].to_json())
    assert {"method", "shots", "steps", "per_task_f1", "mean_f1", "hashes", "timing"} <= set(doc)
    assert "timing" not in json.loads(sweep[1].to_json(include_timing=False))


def test_failed_tasks_score_zero(eval_set):
    master = init_conv3("MNIST", 1)
    pool = _pool(eval_set, 4)
    rep = evaluate(master, pool, eval_set, steps=3, lr=1e30)
    assert rep.failed_tasks == [0, 1, 2, 3] and rep.mean_f1 == 0.0


def test_empty_pool_rejected(eval_set):
    pool = _pool(eval_set, 2)
    pool.tasks = []
    with pytest.raises(ContractError):
        evaluate({}, pool, eval_set)


def test_measure_inference():
    out = measure_inference(init_conv3("MNIST", 0), torch.rand(4, 1, 28, 28), repetitions=5, warmup=1)
    assert out["mean_ms"] > 0 and out["std_ms"] >= 0 and out["repetitions"] == 5 and out["batch_size"] == 4
    with pytest.raises(ContractError):
        measure_inference(init_conv3("MNIST", 0), torch.rand(4, 1, 28, 28), repetitions=0)


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------


def test_cross_adversary_default_protocol():
    p = make_protocol("cross-adversary", {"shots": 5})
    assert p.train["adversaries"] == ["FGSM", "MI-FGSM", "PGD", "CW"]
    assert p.validation["adversaries"] == ["BIM"] and p.validation["split"] == "test"
    assert p.test["adversaries"] == ["semantic", "DeepFool", "SpatialTransformation"]
    assert p.shots == 5 and p.finetune_steps == 20 and p.test_tasks == 1000
    assert any("JSMA" in n for n in p.notes) and any("EAD" in n for n in p.notes)
    assert not set(p.train["adversaries"]) & set(p.test["adversaries"])


def test_protocol_errors():
    with pytest.raises(ProtocolError):
        make_protocol("cross_adversary", {"train_adversaries": ["FGSM"], "test_adversaries": ["fgsm"]})
    with pytest.raises(ProtocolError):
        make_protocol("cross_adversary", {"shots": 3})
    with pytest.raises(ProtocolError):
        make_protocol("cross_adversary", {"colour": "red"})
    with pytest.raises(ProtocolError):
        make_protocol("grey_box")
    with pytest.raises(ProtocolError):
        make_protocol("cross_domain", {"protocol": 3})
    with pytest.raises(ProtocolError):
        make_protocol("white_box", {"attack": "PGD"})


def test_cross_domain_and_architecture_rows():
    p = make_protocol("cross_domain", {"protocol": 2})
    assert (p.train["domain"], p.test["domain"]) == ("FashionMNIST", "MNIST")
    assert "BIM" not in p.train["adversaries"] and "BIM" in p.test["adversaries"]
    q = make_protocol("cross_architecture", {"protocol": 4, "validation_adversary": None})
    assert (q.train["arch"], q.test["arch"]) == ("resnet10", "conv4") and q.validation == {}
    w = make_protocol("white_box", {"attack": "CW"})
    assert w.test["adversaries"] == ["white_box_CW"]


# ---------------------------------------------------------------------------
# white-box combined model
# ---------------------------------------------------------------------------


def expected_combined_argmax(z_c, z_d):
    """Detector output wins iff its probability exceeds one half; otherwise the classifier's argmax."""
    n = z_c.shape[1]
    return torch.where(z_d > 0.5, torch.full_like(z_d, n, dtype=torch.long), z_c.argmax(1))


def combined_argmax_violations(draws, seed):
    g = torch.Generator().manual_seed(seed)
    bad = 0
    for _ in range(draws // 100):
        z_c = torch.randn(100, 10, generator=g) * 5 - 4 * torch.rand(100, 1, generator=g)
        z_d = torch.rand(100, generator=g)
        z_d[:5] = 0.5
        zb, shift = combine(z_c, z_d)
        bad += int((zb.argmax(1) != expected_combined_argmax(z_c, z_d)).sum())
        shifted = shift > 0
        assert torch.allclose(zb[shifted, :10].max(1).values, torch.ones(int(shifted.sum())))
    return bad


def test_combined_argmax_property():
    assert combined_argmax_violations(2000, 0) == 0


def test_least_likely_target_differs_from_label():
    logits = torch.tensor([[0.0, 1.0, 2.0], [5.0, -1.0, 3.0], [-9.0, 0.0, 1.0]])
    labels = torch.tensor([0, 1, 2])
    assert least_likely_target(logits, labels).tolist() == [1, 2, 0]


def _wb_victim():
    g = torch.Generator().manual_seed(4)
    v = LinearVictim(torch.randn(10, 784, generator=g) * 0.05, torch.zeros(10))
    v.domain = "MNIST"
    return v


def test_white_box_generate_successes_fool_both():
    victim, det = _wb_victim(), init_conv3("MNIST", 5)
    x = torch.rand(12, 1, 28, 28, generator=torch.Generator().manual_seed(1))
    y = victim(x).argmax(1).detach()
    budget = AttackBudget(epsilon=0.3, step_size=0.02, iterations=30)
    res = white_box_generate(victim, det, x, y, "I-FGSM", budget=budget)
    assert res.success_rate > 0
    with torch.no_grad():
        assert (victim(res.images).argmax(1) == res.targets).all()
        assert (detector_adv_probability(det, res.images) <= 0.5).all()
        zb, _ = combined_logits(victim, det, res.images)
    assert (zb.argmax(1) == res.targets).all()
    assert float((res.images - x[res.source_indices]).abs().max()) <= 0.3 + 1e-6
    ws = white_box_advset("MNIST", "linear", x, y, res, "I-FGSM")
    assert ws.adversaries("test") == ["white_box_I-FGSM"]


def test_white_box_preconditions():
    victim, det = _wb_victim(), init_conv3("MNIST", 5)
    x = torch.rand(4, 1, 28, 28)
    y = torch.tensor([0, 1, 2, 3])
    with pytest.raises(ContractError):
        white_box_generate(victim, det, x, y, targets=y.clone())
    with pytest.raises(ContractError):
        white_box_generate(victim, det, x, y, targets=torch.tensor([10, 0, 0, 0]))
    with pytest.raises(ContractError):
        white_box_generate(victim, det, x, y, adversary="PGD")
    tiny = AttackBudget(epsilon=1e-6, step_size=1e-6, iterations=1)
    with pytest.raises(BenchmarkError):
        white_box_generate(victim, det, x, victim(x).argmax(1).detach(), budget=tiny)


def test_white_box_budget_defaults():
    assert white_box_budget("I-FGSM", "MNIST").epsilon == 0.3
    assert white_box_budget("I-FGSM", "CIFAR10").epsilon == pytest.approx(8 / 255)
    assert white_box_budget("CW", "MNIST").norm == "l2"
