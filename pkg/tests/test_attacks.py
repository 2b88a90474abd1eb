import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from helpers import ConstantModel, CountingModel, LinearLogits
from igdefense.attacks import (AttackConfig, AttackResult, LossSpec, ResultCache, ThreatModel,
                               UnsupportedLossError, apgd, apgd_targeted, autoattack_lite_attack, fgsm, loss_value,
                               merge_results, pgd, run_attack, square_attack)
from igdefense.attacks.gradient import _loss_and_grad
from igdefense.attacks.registry import data_hash
from igdefense.defense import DefenseConfig, defend
from igdefense.ranking import random_rank

EPS = 8 / 255


@pytest.fixture(scope="module")
def batch(synthetic):
    test = synthetic[1]
    return test.images[:24], test.labels[:24]


def _feasible_attacks():
    return {
        "fgsm": lambda m, x, y, t, g: fgsm(m, x, y, t),
        "pgd": lambda m, x, y, t, g: pgd(m, x, y, t, steps=3, random_start=True, generator=g),
        "apgd-ce": lambda m, x, y, t, g: apgd(m, x, y, "ce", t, steps=4, generator=g),
        "apgd-cw": lambda m, x, y, t, g: apgd(m, x, y, "cw", t, steps=4, generator=g, mode="eval"),
        "apgd-t-dlr": lambda m, x, y, t, g: apgd_targeted(m, x, y, t, steps=3, n_targets=2, generator=g),
        "square": lambda m, x, y, t, g: square_attack(m, x, y, t, query_budget=20, generator=g),
        "autoattack-lite": lambda m, x, y, t, g: autoattack_lite_attack(m, x, y, t, steps=3, n_targets=1,
                                                                        square_queries=10, generator=g),
    }


@settings(max_examples=10, deadline=None)
@given(name=st.sampled_from(sorted(_feasible_attacks())), eps=st.sampled_from([0.0, 1 / 255, 0.05, 0.3]),
       seed=st.integers(0, 100))
def test_every_attack_is_feasible(small_model, batch, name, eps, seed):
    x, y = batch
    t = ThreatModel(eps)
    res = _feasible_attacks()[name](small_model, x, y, t, torch.Generator().manual_seed(seed))
    assert t.is_feasible(x, res.delta)
    assert res.delta.shape == x.shape and res.success.dtype == torch.bool


# -- gradient attacks --------------------------------------------------------


def reference_pgd(model, x, y, eps, alpha, steps):
    """Plain projected sign ascent on CE, returning the last iterate."""
    xa = x.clone()
    for _ in range(steps):
        xa.requires_grad_(True)
        with torch.enable_grad():
            g, = torch.autograd.grad(F.cross_entropy(model(xa), y, reduction="sum"), xa)
        xa = torch.min(torch.max(xa.detach() + alpha * g.sign(), x - eps), x + eps).clamp(0, 1)
    return xa - x


def test_fgsm_matches_closed_form(small_model, batch):
    x, y = batch
    xg = x.clone().requires_grad_(True)
    with torch.enable_grad():
        g, = torch.autograd.grad(F.cross_entropy(small_model(xg), y, reduction="sum"), xg)
    expected = (x + EPS * g.sign()).clamp(0, 1) - x
    assert torch.allclose(fgsm(small_model, x, y, ThreatModel(EPS)).delta, expected, atol=1e-7)


def test_pgd_matches_reference_loop(small_model, batch):
    x, y = batch
    res = pgd(small_model, x, y, ThreatModel(EPS), steps=7, step_size=2 / 255, mode="last")
    assert torch.allclose(res.delta, reference_pgd(small_model, x, y, EPS, 2 / 255, 7), atol=1e-6)


def test_single_full_step_pgd_is_fgsm(small_model, batch):
    x, y = batch
    t = ThreatModel(EPS)
    a = pgd(small_model, x, y, t, steps=1, step_size=EPS, mode="last").delta
    assert torch.allclose(a, fgsm(small_model, x, y, t).delta, atol=1e-7)


def test_apgd_without_momentum_or_schedule_is_pgd(small_model, batch):
    x, y = batch
    t = ThreatModel(EPS)
    a = apgd(small_model, x, y, "ce", t, steps=10, momentum=0.0, adaptive=False, step_size=2 / 255,
             random_start=False, mode="last")
    p = pgd(small_model, x, y, t, steps=10, step_size=2 / 255, mode="last")
    assert torch.allclose(a.delta, p.delta, atol=1e-6)


@pytest.mark.slow
def test_apgd_finds_higher_loss_than_pgd(desk):
    x, y = desk.test.images[:256], desk.test.labels[:256]
    t = ThreatModel(desk.epsilon)
    a = apgd(desk.model, x, y, "ce", t, steps=100, generator=torch.Generator().manual_seed(0))
    p = pgd(desk.model, x, y, t, steps=100)
    frac = (a.final_loss >= p.final_loss - 1e-6).float().mean().item()
    assert frac >= 0.9, frac


def test_loss_traces_are_monotone(small_model, batch):
    x, y = batch
    t = ThreatModel(EPS)
    for res in (pgd(small_model, x, y, t, steps=8), apgd(small_model, x, y, "cw", t, steps=8),
                square_attack(small_model, x, y, t, query_budget=30, mode="highest_loss")):
        assert (res.loss_trace[1:] >= res.loss_trace[:-1]).all()


def test_more_pgd_steps_never_lower_the_loss(small_model, batch):
    x, y = batch
    t = ThreatModel(EPS)
    losses = [pgd(small_model, x, y, t, steps=s).final_loss for s in (2, 5, 10, 20)]
    for lo, hi in zip(losses, losses[1:]):
        assert (hi >= lo - 1e-6).all()


def test_pgd_robust_accuracy_is_monotone_in_epsilon(small_model, synthetic):
    x, y = synthetic[1].images, synthetic[1].labels
    accs = [1 - pgd(small_model, x, y, ThreatModel(e / 255), steps=20, mode="eval").success.float().mean().item()
            for e in (0, 4, 8, 16, 32)]
    assert all(b <= a + 1 / len(x) for a, b in zip(accs, accs[1:])), accs


def test_eot_gradient_variance_falls_as_one_over_n(small_model, batch):
    x, y = batch[0][:4], batch[1][:4]
    d = defend(small_model, random_rank(32, 4), DefenseConfig(k=8, sigma_d=0.1, tau=1.0))
    ns, var = [1, 2, 4, 8, 16], []
    for n in ns:
        grads = torch.stack([_loss_and_grad(d, x, y, LossSpec("ce"), None, n)[1] for _ in range(48)])
        var.append(grads.var(0).mean().item())
    slope = np.polyfit(np.log(ns), np.log(var), 1)[0]
    assert -1.2 <= slope <= -0.8, slope


def test_eot_is_skipped_for_deterministic_models(small_model, batch):
    x, y = batch
    m = CountingModel(small_model)
    _loss_and_grad(m, x, y, LossSpec("ce"), None, eot_iters=10)
    assert m.grad_calls == 1


def test_constant_model_cannot_be_attacked(batch):
    x, y = batch
    m = ConstantModel(classes=4)
    res = pgd(m, x, y, ThreatModel(EPS), steps=3)
    assert (res.final_loss == res.loss_trace[0]).all()


# -- Square --------------------------------------------------------------------


def test_square_is_gradient_free(small_model, batch):
    x, y = batch
    m = CountingModel(small_model)
    res = square_attack(m, x, y, ThreatModel(EPS), query_budget=50)
    assert m.grad_calls == 0 and m.calls > 0
    assert res.queries_or_steps <= 50


def test_square_accepts_only_improvements(small_model, batch):
    x, y = batch
    res = square_attack(small_model, x, y, ThreatModel(EPS), query_budget=60, mode="highest_loss",
                        generator=torch.Generator().manual_seed(1))
    tr = res.loss_trace
    assert (tr[1:] >= tr[:-1]).all()
    changed = tr[1:] != tr[:-1]
    assert (tr[1:][changed] > tr[:-1][changed]).all()
    with torch.no_grad():
        margin = loss_value("cw", small_model(x + res.delta), y)
    assert torch.allclose(margin, res.final_loss, atol=1e-5)


def test_square_approaches_optimum_on_linear_model():
    # for linear logits the best l_inf move is -eps * sign(w_y - w_other) (x is interior, so no clamping)
    g = torch.Generator().manual_seed(0)
    W = torch.randn(2, 16, generator=g)
    model = LinearLogits(W)
    x = 0.2 + 0.6 * torch.rand(200, 1, 4, 4, generator=g)
    with torch.no_grad():
        y = model(x).argmax(1)
    eps = 0.06
    direction = (W[1 - y] - W[y]).sign().view(-1, 1, 4, 4)
    with torch.no_grad():
        optimal_acc = (model(x + eps * direction).argmax(1) == y).float().mean().item()
    res = square_attack(model, x, y, ThreatModel(eps), query_budget=5000, generator=g)
    square_acc = 1 - res.success.float().mean().item()
    assert square_acc >= optimal_acc - 1e-6
    assert square_acc - optimal_acc <= 0.05, (square_acc, optimal_acc)


# -- losses --------------------------------------------------------------------


def test_cw_loss_sign():
    logits = torch.tensor([[3.0, 1.0, 0.0], [1.0, 2.0, 0.5]])
    y = torch.tensor([0, 0])
    cw = loss_value("cw", logits, y)
    assert cw.tolist() == [-2.0, 1.0]


def test_ce_of_uniform_logits_is_log_c():
    for c in (2, 5, 10):
        assert loss_value("ce", torch.zeros(1, c), torch.tensor([0])).item() == pytest.approx(math.log(c))


def test_dlr_hand_example():
    logits = torch.tensor([[4.0, 3.0, 2.0, 0.0]])
    # -(z_y - z_t) / (pi1 - pi3) = -(4 - 3) / (4 - 2)
    v = loss_value("dlr-targeted", logits, torch.tensor([0]), torch.tensor([1]))
    assert v.item() == pytest.approx(-0.5, abs=1e-9)
    v = loss_value("dlr-targeted", torch.zeros(1, 4), torch.tensor([0]), torch.tensor([2]))
    assert torch.isfinite(v).all() and v.item() == 0


def test_loss_errors():
    with pytest.raises(UnsupportedLossError):
        loss_value("dlr-targeted", torch.zeros(1, 3), torch.tensor([0]), torch.tensor([1]))
    with pytest.raises(UnsupportedLossError):
        loss_value("dlr-targeted", torch.zeros(1, 4), torch.tensor([1]), torch.tensor([1]))
    with pytest.raises(UnsupportedLossError):
        LossSpec("l2")
    with pytest.raises(UnsupportedLossError):
        apgd_targeted(LinearLogits(torch.randn(3, 4)), torch.rand(2, 1, 2, 2), torch.tensor([0, 1]),
                      ThreatModel(0.1), steps=2)


def test_targets_never_equal_labels(small_model, batch):
    x, y = batch
    res = apgd_targeted(small_model, x, y, ThreatModel(EPS), steps=3, n_targets=3)
    assert ThreatModel(EPS).is_feasible(x, res.delta)


# -- cascade, registry, cache ----------------------------------------------------


def test_cascade_dominates_its_first_stage(small_model, batch):
    x, y = batch
    t = ThreatModel(EPS)
    first = apgd(small_model, x, y, "ce", t, steps=10, mode="eval", generator=torch.Generator().manual_seed(0))
    full = autoattack_lite_attack(small_model, x, y, t, steps=10, n_targets=2, square_queries=50,
                                  generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        clean_ok = small_model(x).argmax(1) == y
    assert (full.success | ~(first.success & clean_ok)).all()
    assert (full.delta[~full.success] == 0).all()
    assert (full.delta[~clean_ok] == 0).all() and full.success[~clean_ok].all()


def test_zero_epsilon_is_clean_accuracy(small_model, batch):
    x, y = batch
    res = run_attack(AttackConfig("autoattack-lite", 0.0), small_model, x, y)
    with torch.no_grad():
        assert torch.equal(res.success, small_model(x).argmax(1) != y)
    assert (res.delta == 0).all()


def test_unknown_attack_name():
    with pytest.raises(KeyError, match="registered"):
        AttackConfig("rays", EPS)


def test_merge_results_modes():
    def r(loss, succ):
        n = len(loss)
        return AttackResult(torch.full((n, 1), float(loss[0])), torch.tensor(succ), torch.tensor(loss),
                            torch.tensor([loss]), 1)
    a, b = r([1.0, 5.0], [True, False]), r([2.0, 3.0], [True, True])
    hl = merge_results([a, b], "highest_loss")
    assert hl.final_loss.tolist() == [2.0, 5.0]
    ev = merge_results([a, b], "eval")
    assert ev.success.all() and ev.final_loss.tolist() == [1.0, 3.0]


def test_attack_result_and_cache_round_trip(small_model, batch, tmp_path):
    x, y = batch
    cfg = AttackConfig("pgd", EPS, {"steps": 3})
    res = run_attack(cfg, small_model, x, y)
    back = AttackResult.from_bytes(res.to_bytes())
    assert torch.equal(back.delta, res.delta) and back.queries_or_steps == res.queries_or_steps
    cache = ResultCache(tmp_path)
    dh = data_hash(x, y)
    calls = []
    got, hit = cache.get_or_compute("fp", cfg, dh, lambda: calls.append(1) or res)
    got2, hit2 = cache.get_or_compute("fp", cfg, dh, lambda: calls.append(1) or res)
    assert (hit, hit2, len(calls)) == (False, True, 1)
    assert torch.equal(got2.delta, res.delta)
    assert cache.get("fp", AttackConfig("pgd", EPS, {"steps": 4}), dh) is None
