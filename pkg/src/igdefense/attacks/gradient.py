"""White-box l_inf attacks: FGSM, PGD and APGD (optionally with EoT)."""
from __future__ import annotations

import torch

from .base import RETURN_MODES, AttackResult, ThreatModel, keyed, merge_results, predictions
from .losses import LossSpec, UnsupportedLossError, loss_value


def _loss_and_grad(model, x_adv, y, spec: LossSpec, target=None, eot_iters: int = 1):
    """Loss and input gradient, both averaged over ``eot_iters`` forward passes.

    Models without a ``stochastic`` flag set are evaluated once; averaging
    identical draws would only repeat work.
    """
    if not getattr(model, "stochastic", False):
        eot_iters = 1
    grad = torch.zeros_like(x_adv)
    loss_sum = torch.zeros(len(x_adv))
    for _ in range(eot_iters):
        xg = x_adv.detach().requires_grad_(True)
        with torch.enable_grad():
            loss = loss_value(spec.kind, model(xg), y, target)
            g = torch.autograd.grad(loss.sum(), xg, allow_unused=True)[0] if loss.requires_grad else None
        if g is not None:
            grad += g.detach()
        loss_sum += loss.detach()
    return loss_sum / eot_iters, grad / eot_iters


def _finish(model, x, y, best_x, best_loss, first_adv, found, trace, steps, mode):
    if mode == "highest_loss" or mode == "last":
        x_out = best_x
    else:
        x_out = torch.where(found.view(-1, *[1] * (x.ndim - 1)), first_adv, x)
    delta = (x_out - x).detach()
    success = predictions(model, x + delta) != y
    return AttackResult(delta, success, best_loss, torch.stack(trace), steps)


def fgsm(model, x, y, threat: ThreatModel, loss: LossSpec | str = "ce", keys=None) -> AttackResult:
    spec = loss if isinstance(loss, LossSpec) else LossSpec(loss)
    with keyed(model, keys):
        loss0, grad = _loss_and_grad(model, x, y, spec, spec.target)
        x_adv = threat.project(x + threat.epsilon * grad.sign(), x)
        loss1, _ = _loss_and_grad(model, x_adv, y, spec, spec.target)
        delta = (x_adv - x).detach()
        success = predictions(model, x + delta) != y
    return AttackResult(delta, success, loss1, torch.stack([loss0, torch.maximum(loss0, loss1)]), 1)


def _pgd_run(model, x, y, threat, steps, step_size, spec, random_start, generator, mode, eot_iters=1):
    x_adv = threat.random_start(x, generator) if random_start else x.clone()
    loss, grad = _loss_and_grad(model, x_adv, y, spec, spec.target, eot_iters)
    best_x, best_loss = x_adv.clone(), loss.clone()
    found = torch.zeros(len(x), dtype=torch.bool)
    first_adv = x.clone()
    trace = [best_loss.clone()]
    for i in range(steps):
        x_adv = threat.project(x_adv + step_size * grad.sign(), x)
        loss, grad = _loss_and_grad(model, x_adv, y, spec, spec.target, eot_iters)
        improved = loss > best_loss
        if i == 0 and not random_start and mode != "eval":
            # the clean input is not a candidate: transfer use needs a perturbed point
            improved[:] = True
        best_x[improved] = x_adv[improved]
        best_loss = torch.where(improved, loss, best_loss)
        trace.append(torch.maximum(trace[-1], best_loss))
        if mode == "eval":
            fooled = (predictions(model, x_adv) != y) & ~found
            first_adv[fooled] = x_adv[fooled]
            found |= fooled
    if mode == "last":
        best_x = x_adv
    return _finish(model, x, y, best_x, best_loss, first_adv, found, trace, steps, mode)


def pgd(model, x, y, threat: ThreatModel, steps: int = 10, step_size: float | None = None, restarts: int = 1,
        random_start: bool = False, loss: LossSpec | str = "ce", mode: str = "highest_loss",
        generator=None, keys=None) -> AttackResult:
    """Iterated sign-gradient ascent projected onto the eps-ball and clamp box."""
    if steps < 1:
        raise ValueError("pgd needs at least one step")
    if mode not in RETURN_MODES:
        raise ValueError(f"mode must be one of {RETURN_MODES}")
    spec = loss if isinstance(loss, LossSpec) else LossSpec(loss)
    step_size = threat.epsilon / 4 if step_size is None else step_size
    with keyed(model, keys):
        runs = [_pgd_run(model, x, y, threat, steps, step_size, spec, random_start or r > 0, generator, mode)
                for r in range(restarts)]
    return merge_results(runs, mode)


class _Schedule:
    """Checkpoint bookkeeping of the AutoAttack step-size rule (l_inf variant)."""

    def __init__(self, steps, rho=0.75):
        self.period = max(int(0.22 * steps), 1)
        self.min_period = max(int(0.06 * steps), 1)
        self.decrement = max(int(0.03 * steps), 1)
        self.rho = rho
        self.counter = 0

    def due(self):
        self.counter += 1
        return self.counter == self.period

    def advance(self):
        self.counter = 0
        self.period = max(self.period - self.decrement, self.min_period)


def _apgd_run(model, x, y, spec, threat, steps, generator, mode, eot_iters, momentum, adaptive,
              step_size, random_start, target):
    eps = threat.epsilon
    x_adv = threat.random_start(x, generator) if random_start else x.clone()
    loss, grad = _loss_and_grad(model, x_adv, y, spec, target, eot_iters)
    best_x, best_loss, best_grad = x_adv.clone(), loss.clone(), grad.clone()
    found = torch.zeros(len(x), dtype=torch.bool)
    first_adv = x.clone()
    if mode == "eval":
        found = predictions(model, x_adv) != y
        first_adv[found] = x_adv[found]
    eta = torch.full((len(x),) + (1,) * (x.ndim - 1), 2 * eps if step_size is None else step_size)
    trace = [best_loss.clone()]
    history = [loss.clone()]
    sched = _Schedule(steps)
    last_check_loss = best_loss.clone()
    reduced_last = torch.ones(len(x), dtype=torch.bool)
    x_prev = x_adv.clone()
    for i in range(steps):
        z = threat.project(x_adv + eta * grad.sign(), x)
        a = 1.0 if i == 0 else 1.0 - momentum
        x_new = threat.project(x_adv + a * (z - x_adv) + (1 - a) * (x_adv - x_prev), x)
        x_prev, x_adv = x_adv, x_new
        loss, grad = _loss_and_grad(model, x_adv, y, spec, target, eot_iters)
        history.append(loss.clone())
        improved = loss > best_loss
        best_x[improved] = x_adv[improved]
        best_grad[improved] = grad[improved]
        best_loss = torch.where(improved, loss, best_loss)
        trace.append(best_loss.clone())
        if mode == "eval":
            fooled = (predictions(model, x_adv) != y) & ~found
            first_adv[fooled] = x_adv[fooled]
            found |= fooled
        if adaptive and sched.due():
            k = sched.period
            recent = torch.stack(history[-(k + 1):])
            increases = (recent[1:] > recent[:-1]).sum(0)
            oscillating = increases <= k * sched.rho
            stalled = ~reduced_last & (last_check_loss >= best_loss)
            halve = oscillating | stalled
            reduced_last = halve
            last_check_loss = best_loss.clone()
            if halve.any():
                eta[halve] /= 2.0
                x_adv[halve] = best_x[halve]
                grad[halve] = best_grad[halve]
                x_prev[halve] = best_x[halve]
            sched.advance()
    if mode == "last":
        best_x = x_adv
    return _finish(model, x, y, best_x, best_loss, first_adv, found, trace, steps, mode)


def apgd(model, x, y, loss: LossSpec | str, threat: ThreatModel, steps: int = 100, restarts: int = 1,
         eot_iters: int = 1, momentum: float = 0.25, adaptive: bool = True, step_size: float | None = None,
         random_start: bool = True, mode: str = "highest_loss", generator=None, keys=None) -> AttackResult:
    """Auto-PGD: momentum ascent with step halving at checkpoints.

    ``momentum`` is the weight on the previous displacement (0.25 in the
    reference scheme); ``momentum=0, adaptive=False`` with a fixed
    ``step_size`` reduces the update to plain PGD. For ``dlr-targeted``
    losses ``loss.target`` holds per-image target classes.
    """
    if steps < 2:
        raise ValueError("apgd needs at least two steps")
    if mode not in RETURN_MODES:
        raise ValueError(f"mode must be one of {RETURN_MODES}")
    spec = loss if isinstance(loss, LossSpec) else LossSpec(loss)
    target = None
    if spec.kind == "dlr-targeted":
        if spec.target is None:
            raise UnsupportedLossError("targeted DLR needs target classes")
        target = torch.as_tensor(spec.target, dtype=torch.long).expand_as(y)
    runs = []
    with keyed(model, keys):
        for r in range(restarts):
            if mode == "eval" and runs and merge_results(runs, mode).success.all():
                break
            runs.append(_apgd_run(model, x, y, spec, threat, steps, generator, mode, eot_iters, momentum,
                                  adaptive, step_size, random_start or r > 0, target))
    return merge_results(runs, mode)


def apgd_eot(model, x, y, loss: LossSpec | str, threat: ThreatModel, steps: int = 100, eot_iters: int = 20,
             **kwargs) -> AttackResult:
    """APGD whose every gradient is the mean of ``eot_iters`` independent evaluations."""
    return apgd(model, x, y, loss, threat, steps=steps, eot_iters=eot_iters, **kwargs)


def apgd_targeted(model, x, y, threat: ThreatModel, steps: int = 100, n_targets: int | None = None,
                  restarts: int = 1, mode: str = "highest_loss", generator=None, keys=None, **kwargs) -> AttackResult:
    """Targeted APGD-DLR against the 2nd..(n_targets+1)-th ranked clean classes."""
    with torch.no_grad(), keyed(model, keys):
        logits = model(x)
    num_classes = logits.shape[1]
    if num_classes < 4:
        raise UnsupportedLossError("targeted DLR needs at least 4 classes")
    n_targets = min(num_classes - 1, 9) if n_targets is None else min(n_targets, num_classes - 1)
    order = logits.argsort(1, descending=True)
    runs = []
    for t in range(n_targets):
        target = order[:, t + 1].clone()
        # ranking may put the label itself second; fall back to the top class then
        clash = target == y
        target[clash] = order[clash, 0]
        clash = target == y
        target[clash] = order[clash, t + 2 if t + 2 < num_classes else 1]
        runs.append(apgd(model, x, y, LossSpec("dlr-targeted", target), threat, steps=steps, restarts=restarts,
                         mode=mode, generator=generator, keys=keys, **kwargs))
    return merge_results(runs, mode)
