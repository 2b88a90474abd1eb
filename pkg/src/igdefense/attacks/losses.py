"""Per-sample attack objectives. Every loss is maximized by the attacker."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

DLR_STABILIZER = 1e-12
LOSS_KINDS = ("ce", "cw", "dlr-targeted")


class UnsupportedLossError(ValueError):
    pass


@dataclass(frozen=True)
class LossSpec:
    kind: str = "ce"
    target: object = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise UnsupportedLossError(f"unsupported loss {self.kind!r}; differentiable losses are {LOSS_KINDS}")


def cw_loss(logits, y):
    """-(z_y - max_{c != y} z_c); positive exactly when ``y`` is not the argmax."""
    true = logits.gather(1, y[:, None]).squeeze(1)
    other = logits.masked_fill(F.one_hot(y, logits.shape[1]).bool(), float("-inf")).amax(1)
    return other - true


def dlr_targeted_loss(logits, y, target):
    """-(z_y - z_t) / (z_pi1 - z_pi3) with pi the descending sort of the logits."""
    if logits.shape[1] < 4:
        raise UnsupportedLossError("targeted DLR needs at least 4 classes")
    srt = logits.sort(dim=1, descending=True).values
    num = logits.gather(1, y[:, None]).squeeze(1) - logits.gather(1, target[:, None]).squeeze(1)
    return -num / (srt[:, 0] - srt[:, 2] + DLR_STABILIZER)


def loss_value(kind: str, logits, y, target=None):
    if kind == "ce":
        return F.cross_entropy(logits, y, reduction="none")
    if kind == "cw":
        return cw_loss(logits, y)
    if kind == "dlr-targeted":
        if target is None:
            raise UnsupportedLossError("targeted DLR needs a target class")
        target = torch.as_tensor(target, dtype=torch.long).expand_as(y)
        if (target == y).any():
            raise UnsupportedLossError("target class must differ from the label")
        return dlr_targeted_loss(logits, y, target)
    raise UnsupportedLossError(f"unsupported loss {kind!r}; differentiable losses are {LOSS_KINDS}")
