from __future__ import annotations

import torch

from .base import AttackResult, ThreatModel, keyed, predictions
from .gradient import apgd, apgd_targeted
from .square import square_attack

DEFAULT_STAGES = ("apgd-ce", "apgd-t-dlr", "square")


def autoattack_lite_attack(model, x, y, threat: ThreatModel, stages=DEFAULT_STAGES, steps: int = 100,
                           n_targets: int | None = None, square_queries: int = 1000, restarts: int = 1,
                           generator=None, keys=None) -> AttackResult:
    """Sequential APGD-CE -> targeted APGD-DLR -> Square; survivors only move on.

    Semantics follow AutoAttack: images never fooled get a zero perturbation,
    and clean-misclassified images are not attacked at all.
    """
    with keyed(model, keys):
        robust = predictions(model, x) == y
    delta = torch.zeros_like(x)
    final_loss = torch.zeros(len(x))
    spent = 0
    for stage in stages:
        idx = robust.nonzero().flatten()
        if len(idx) == 0:
            break
        sub_keys = None if keys is None else keys[idx]
        xs, ys = x[idx], y[idx]
        if stage == "apgd-ce":
            res = apgd(model, xs, ys, "ce", threat, steps=steps, restarts=restarts, mode="eval",
                       generator=generator, keys=sub_keys)
        elif stage == "apgd-t-dlr":
            if model_classes(model, xs[:1], sub_keys) < 4:
                continue
            res = apgd_targeted(model, xs, ys, threat, steps=steps, n_targets=n_targets, restarts=restarts,
                                mode="eval", generator=generator, keys=sub_keys)
        elif stage == "square":
            res = square_attack(model, xs, ys, threat, query_budget=square_queries, mode="eval",
                                generator=generator, keys=sub_keys)
        else:
            raise ValueError(f"unknown cascade stage {stage!r}")
        spent += res.queries_or_steps
        fooled = res.success
        delta[idx[fooled]] = res.delta[fooled]
        final_loss[idx] = res.final_loss
        robust[idx[fooled]] = False
    success = ~robust
    trace = final_loss.unsqueeze(0)
    return AttackResult(delta, success, final_loss, trace, spent)


@torch.no_grad()
def model_classes(model, x, keys=None) -> int:
    with keyed(model, None if keys is None else keys[:1]):
        return model(x).shape[1]
