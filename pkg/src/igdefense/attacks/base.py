from __future__ import annotations

import contextlib
import io
from dataclasses import dataclass

import numpy as np
import torch

from ..io_utils import atomic_write_bytes

# What an attack returns per image:
#   highest_loss  the iterate with the largest loss, always perturbed (transfer use)
#   eval          the first misclassifying iterate, else the clean input
#   last          the final iterate (adversarial training)
RETURN_MODES = ("highest_loss", "eval", "last")


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class ThreatModel:
    epsilon: float
    clamp: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")

    def project(self, x_adv, x):
        """Nearest point of the eps-ball around ``x`` intersected with the clamp box."""
        lo, hi = self.clamp
        delta = torch.clamp(x_adv - x, -self.epsilon, self.epsilon)
        return torch.clamp(x + delta, lo, hi)

    def random_start(self, x, generator=None):
        u = torch.rand(x.shape, generator=generator) * 2 - 1
        return self.project(x + self.epsilon * u, x)

    def is_feasible(self, x, delta, tol: float = 1e-6) -> bool:
        lo, hi = self.clamp
        xa = x + delta
        return bool((delta.abs() <= self.epsilon + tol).all() and (xa >= lo - tol).all() and (xa <= hi + tol).all())


@dataclass
class AttackResult:
    delta: torch.Tensor
    success: torch.Tensor
    final_loss: torch.Tensor
    loss_trace: torch.Tensor  # (iterations + 1, batch), best loss so far
    queries_or_steps: int

    def __len__(self):
        return len(self.delta)

    def select(self, index) -> "AttackResult":
        return AttackResult(self.delta[index], self.success[index], self.final_loss[index],
                            self.loss_trace[:, index], self.queries_or_steps)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        np.savez(buf, delta=self.delta.numpy(), success=self.success.numpy(), final_loss=self.final_loss.numpy(),
                 loss_trace=self.loss_trace.numpy(), queries_or_steps=np.int64(self.queries_or_steps))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "AttackResult":
        with np.load(io.BytesIO(data)) as z:
            return cls(torch.from_numpy(z["delta"]), torch.from_numpy(z["success"]),
                       torch.from_numpy(z["final_loss"]), torch.from_numpy(z["loss_trace"]),
                       int(z["queries_or_steps"]))

    def save(self, path):
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "AttackResult":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def merge_results(results: list[AttackResult], mode: str) -> AttackResult:
    """Combine per-image outcomes of several runs (restarts or target classes)."""
    if len(results) == 1:
        return results[0]
    losses = torch.stack([r.final_loss for r in results])
    succ = torch.stack([r.success for r in results])
    if mode == "eval":
        # first successful run wins, otherwise keep the highest loss
        pick = torch.where(succ.any(0), succ.float().argmax(0), losses.argmax(0))
    else:
        pick = losses.argmax(0)
    rows = torch.arange(losses.shape[1])
    delta = torch.stack([r.delta for r in results])[pick, rows]
    length = max(r.loss_trace.shape[0] for r in results)
    traces = []
    for r in results:
        pad = r.loss_trace[-1:].expand(length - r.loss_trace.shape[0], -1)
        traces.append(torch.cat([r.loss_trace, pad]))
    return AttackResult(delta, succ[pick, rows], losses[pick, rows], torch.stack(traces).amax(0),
                        sum(r.queries_or_steps for r in results))


@contextlib.contextmanager
def keyed(model, keys):
    """Bind per-image noise keys on stochastic models that support them."""
    if keys is not None and hasattr(model, "keyed"):
        with model.keyed(keys):
            yield
    else:
        yield


@torch.no_grad()
def predictions(model, x):
    return model(x).argmax(1)
