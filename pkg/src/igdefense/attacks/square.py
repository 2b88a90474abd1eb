"""Square attack (l_inf): score-based random search with square patches.

Simplified schedule: the patch area fraction ``p`` follows the reference
piecewise halving schedule, rescaled to the query budget. The clean input
is the first query; the vertical-stripe initialization is the second and,
like every later proposal, is kept only if it increases the margin loss.
"""
from __future__ import annotations

import math

import torch

from .base import RETURN_MODES, AttackResult, ThreatModel, keyed
from .losses import cw_loss

_P_SCHEDULE = ((10, 1), (50, 2), (200, 4), (500, 8), (1000, 16), (2000, 32), (4000, 64), (6000, 128), (8000, 256))


def p_selection(p_init: float, it: int, budget: int) -> float:
    it = int(it / max(budget, 1) * 10000)
    div = 512
    for bound, d in _P_SCHEDULE:
        if it <= bound:
            div = d
            break
    return p_init / div


@torch.no_grad()
def _margin(model, x, y):
    logits = model(x)
    return cw_loss(logits, y), logits.argmax(1) != y


@torch.no_grad()
def square_attack(model, x, y, threat: ThreatModel, query_budget: int = 1000, p_init: float = 0.05,
                  mode: str = "eval", generator=None, keys=None) -> AttackResult:
    """Random search over +/-eps square patches, accepting loss increases only.

    Uses logits only; in ``eval`` mode an image stops consuming queries once
    it is misclassified.
    """
    if query_budget < 1:
        raise ValueError("query_budget must be at least 1")
    if mode not in RETURN_MODES:
        raise ValueError(f"mode must be one of {RETURN_MODES}")
    eps = threat.epsilon
    lo, hi = threat.clamp
    b, c, h, w = x.shape
    n_features = c * h * w
    rows, cols = torch.arange(h), torch.arange(w)
    with keyed(model, keys):
        best_loss, fooled = _margin(model, x, y)
        queries = torch.ones(b, dtype=torch.long)
        delta = torch.zeros_like(x)
        trace = [best_loss.clone()]
        if query_budget >= 2 and eps > 0:
            signs = torch.randint(0, 2, (b, c, 1, w), generator=generator).float() * 2 - 1
            prop = (torch.clamp(x + eps * signs, lo, hi) - x)
            active = ~fooled if mode == "eval" else torch.ones(b, dtype=torch.bool)
            loss, now_fooled = _margin(model, x + prop, y)
            queries += active.long()
            accept = active & (loss > best_loss)
            delta[accept] = prop[accept]
            best_loss = torch.where(accept, loss, best_loss)
            fooled = torch.where(accept, now_fooled, fooled)
            trace.append(best_loss.clone())
            for it in range(query_budget - 2):
                active = ~fooled if mode == "eval" else torch.ones(b, dtype=torch.bool)
                if not active.any():
                    break
                p = p_selection(p_init, it, query_budget)
                s = max(int(round(math.sqrt(p * n_features / c))), 1)
                s = min(s, h - 1) if h > 1 else 1
                vh = torch.randint(0, h - s + 1, (b, 1), generator=generator)
                vw = torch.randint(0, w - s + 1, (b, 1), generator=generator)
                patch = (torch.randint(0, 2, (b, c, 1, 1), generator=generator).float() * 2 - 1) * eps
                in_rows = (rows >= vh) & (rows < vh + s)
                in_cols = (cols >= vw) & (cols < vw + s)
                square = (in_rows[:, :, None] & in_cols[:, None, :])[:, None] & active.view(-1, 1, 1, 1)
                prop = torch.clamp(x + torch.where(square, patch, delta), lo, hi) - x
                loss, now_fooled = _margin(model, x + prop, y)
                queries += active.long()
                accept = active & (loss > best_loss)
                delta[accept] = prop[accept]
                best_loss = torch.where(accept, loss, best_loss)
                fooled = torch.where(accept, now_fooled, fooled)
                trace.append(best_loss.clone())
        success = model(x + delta).argmax(1) != y
        if mode == "eval":
            delta[~success] = 0
    return AttackResult(delta, success, best_loss, torch.stack(trace), int(queries.max()))
