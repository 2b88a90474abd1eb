"""Accuracy metrics, the image-wise worst-case protocol and attack analyses."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .attacks.base import AttackError, AttackResult, ThreatModel, keyed
from .attacks.cascade import DEFAULT_STAGES, autoattack_lite_attack
from .attacks.losses import loss_value
from .attacks.registry import AttackConfig, ResultCache, data_hash, run_attack
from .data import ProbeDataset
from .models import TappedClassifier
from .ranking import ImportanceRanking, top_k_indices, unimportant_indices

logger = logging.getLogger(__name__)


class CacheMissError(LookupError):
    pass


def sample_keys(dataset: ProbeDataset, offset: int = 0):
    return torch.arange(offset, offset + len(dataset))


@torch.no_grad()
def correct_mask(model, images, labels, keys=None, batch_size: int = 500):
    out = []
    for i in range(0, len(images), batch_size):
        k = None if keys is None else keys[i:i + batch_size]
        with keyed(model, k):
            out.append(model(images[i:i + batch_size]).argmax(1) == labels[i:i + batch_size])
    return torch.cat(out)


def clean_accuracy(model, dataset: ProbeDataset, keys=None) -> float:
    keys = sample_keys(dataset) if keys is None else keys
    return 100.0 * correct_mask(model, dataset.images, dataset.labels, keys).float().mean().item()


def _checked_attack(cfg: AttackConfig, model, x, y, keys, attack_id=None) -> AttackResult:
    threat = ThreatModel(cfg.epsilon)
    try:
        result = run_attack(cfg, model, x, y, keys=keys, threat=threat)
    except Exception as exc:
        raise AttackError(f"attack {attack_id or cfg.name} failed: {exc}") from exc
    if not threat.is_feasible(x, result.delta):
        raise AttackError(f"attack {attack_id or cfg.name} returned an infeasible perturbation")
    return result


def robust_accuracy(model, dataset: ProbeDataset, attack_config: AttackConfig, keys=None):
    """Accuracy (%) on x + delta with delta from ``attack_config`` run on ``model``."""
    keys = sample_keys(dataset) if keys is None else keys
    res = _checked_attack(attack_config, model, dataset.images, dataset.labels, keys)
    ok = correct_mask(model, dataset.images + res.delta, dataset.labels, keys)
    return 100.0 * ok.float().mean().item(), res


def autoattack_lite(model, dataset: ProbeDataset, threat: ThreatModel, stages=DEFAULT_STAGES, keys=None,
                    seed: int = 0, **kwargs) -> float:
    keys = sample_keys(dataset) if keys is None else keys
    gen = torch.Generator().manual_seed(seed)
    res = autoattack_lite_attack(model, dataset.images, dataset.labels, threat, stages=stages, generator=gen,
                                 keys=keys, **kwargs)
    ok = correct_mask(model, dataset.images + res.delta, dataset.labels, keys)
    return 100.0 * ok.float().mean().item()


# -- IW-WC ------------------------------------------------------------------


@dataclass
class AttackSuite:
    direct_attacks: list[AttackConfig] = field(default_factory=list)
    transfer_attacks: list[AttackConfig] = field(default_factory=list)

    def __post_init__(self):
        if not self.direct_attacks and not self.transfer_attacks:
            raise ValueError("attack suite is empty")

    def entries(self):
        """(attack_id, config, is_transfer) in evaluation order."""
        out = [(c.name, c, False) for c in self.direct_attacks]
        out += [("tr-" + c.name, c, True) for c in self.transfer_attacks]
        return out

    def to_dict(self):
        return {"direct": [c.to_dict() for c in self.direct_attacks],
                "transfer": [c.to_dict() for c in self.transfer_attacks]}

    @classmethod
    def from_dict(cls, d):
        return cls([AttackConfig.from_dict(c) for c in d.get("direct", [])],
                   [AttackConfig.from_dict(c) for c in d.get("transfer", [])])


def default_suite(epsilon: float, steps: int = 100, eot_iters: int = 20, eot_steps: int | None = None,
                  square_queries: int = 1000, n_targets: int | None = None, seed: int = 0) -> AttackSuite:
    """Desk-scale IW-WC ensemble: 2 direct and 5 transfer attacks."""
    aa = {"steps": steps, "square_queries": square_queries, "n_targets": n_targets}
    eot = {"steps": eot_steps or steps, "eot_iters": eot_iters}
    direct = [AttackConfig("autoattack-lite", epsilon, aa, seed), AttackConfig("apgd-eot", epsilon, eot, seed)]
    transfer = [
        AttackConfig("apgd-ce", epsilon, {"steps": steps}, seed),
        AttackConfig("apgd-cw", epsilon, {"steps": steps}, seed),
        AttackConfig("apgd-t-dlr", epsilon, {"steps": steps, "restarts": 3, "n_targets": n_targets}, seed),
        AttackConfig("autoattack-lite", epsilon, aa, seed),
        AttackConfig("apgd-eot", epsilon, eot, seed),
    ]
    return AttackSuite(direct, transfer)


@dataclass
class EvaluationReport:
    clean_acc: float
    per_attack_acc: dict[str, float]
    iwwc_acc: float | None
    classwise: dict = field(default_factory=dict)
    runtime: dict[str, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        accs = [self.clean_acc, *self.per_attack_acc.values()] + ([self.iwwc_acc] if self.iwwc_acc is not None else [])
        for a in accs:
            if not 0 <= a <= 100:
                raise ValueError(f"accuracy {a} outside [0, 100]")
        if self.iwwc_acc is not None and self.per_attack_acc:
            if self.iwwc_acc > min(self.per_attack_acc.values()) + 1e-9:
                raise ValueError("IW-WC accuracy exceeds a per-attack accuracy")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def transfer_perturbation(base, cfg: AttackConfig, x, y, keys, cache: ResultCache | None = None,
                          recompute: bool = True, defended=None) -> AttackResult:
    """Perturbation computed with base-model queries only (checked against ``defended``)."""
    dhash = data_hash(x, y)

    def compute():
        before = getattr(defended, "forward_calls", None)
        res = _checked_attack(cfg, base, x, y, keys, "tr-" + cfg.name)
        if before is not None and defended.forward_calls != before:
            raise AttackError(f"transfer attack {cfg.name} queried the defended model")
        return res

    if cache is None:
        return compute()
    if not recompute:
        hit = cache.get(base.fingerprint, cfg, dhash)
        if hit is None:
            raise CacheMissError(f"no cached transfer perturbation for {cfg.name} on {base.fingerprint}")
        return hit
    return cache.get_or_compute(base.fingerprint, cfg, dhash, compute)[0]


def iwwc_evaluate(base, defended, dataset: ProbeDataset, suite: AttackSuite, cache: ResultCache | None = None,
                  recompute: bool = True, keys=None) -> EvaluationReport:
    """Image-wise worst case over the suite, evaluated on ``defended``.

    An image counts as robust only if the defended model classifies it
    correctly clean and under every attack of the suite.
    """
    keys = sample_keys(dataset) if keys is None else keys
    x, y = dataset.images, dataset.labels
    clean_ok = correct_mask(defended, x, y, keys)
    worst = clean_ok.clone()
    per_attack, runtime, flags = {}, {}, {}
    for attack_id, cfg, is_transfer in suite.entries():
        t0 = time.perf_counter()
        if is_transfer:
            res = transfer_perturbation(base, cfg, x, y, keys, cache, recompute, defended)
        else:
            res = _checked_attack(cfg, defended, x, y, keys, attack_id)
        ok = clean_ok & correct_mask(defended, x + res.delta, y, keys)
        runtime[attack_id] = time.perf_counter() - t0
        per_attack[attack_id] = 100.0 * ok.float().mean().item()
        flags[attack_id] = ok
        worst &= ok
        logger.info("%s: %.2f%% (%.1fs)", attack_id, per_attack[attack_id], runtime[attack_id])
    iwwc = 100.0 * worst.float().mean().item()
    report = EvaluationReport(
        clean_acc=100.0 * clean_ok.float().mean().item(),
        per_attack_acc=per_attack,
        iwwc_acc=iwwc,
        classwise=classwise_breakdown(y, clean_ok, worst, dataset.num_classes),
        runtime=runtime,
        metadata={"base_fingerprint": getattr(base, "fingerprint", ""),
                  "epsilon": max((c.epsilon for _, c, _ in suite.entries()), default=0.0),
                  "seeds": sorted({c.seed for _, c, _ in suite.entries()}),
                  "num_images": len(dataset)},
    )
    report._flags = flags
    report._worst = worst
    return report


def classwise_breakdown(labels, clean_correct, robust_correct, num_classes: int) -> dict:
    labels = torch.as_tensor(labels)
    clean, worst, counts = [], [], []
    for c in range(num_classes):
        sel = labels == c
        n = int(sel.sum())
        counts.append(n)
        if n == 0:
            clean.append(None)
            worst.append(None)
        else:
            clean.append(100.0 * clean_correct[sel].float().mean().item())
            worst.append(100.0 * robust_correct[sel].float().mean().item())
    return {"clean": clean, "worst_case": worst, "counts": counts}


# -- activation shift ---------------------------------------------------------


@dataclass
class PartitionShift:
    count: int
    delta_y: float | None = None
    delta_yhat: float | None = None
    delta_nonGT: float | None = None
    delta_remcls: float | None = None
    delta_unimp: float | None = None


@dataclass
class ActivationShiftReport:
    successful: PartitionShift | None
    unsuccessful: PartitionShift | None
    k: int
    epsilon: float
    excluded_misclassified: int = 0

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def _rel(diff_sum, pre_sum):
    if pre_sum == 0:
        return 0.0 if diff_sum == 0 else math.copysign(math.inf, diff_sum)
    return 100.0 * diff_sum / pre_sum


@torch.no_grad()
def _neuron_means(tapped, x, batch_size=500):
    return torch.cat([tapped.activations(x[i:i + batch_size]).mean(dim=(2, 3))
                      for i in range(0, len(x), batch_size)]).double()


def activation_shift_report(tapped: TappedClassifier, ranking: ImportanceRanking, k: int,
                            attack_config: AttackConfig, dataset: ProbeDataset) -> ActivationShiftReport:
    """Relative change (%) of top-k class activations caused by an attack on ``tapped``.

    Percentages divide the summed change by the summed pre-attack activation
    of the same neuron set over the same samples. Only images classified
    correctly before the attack enter either partition.
    """
    x, y = dataset.images, dataset.labels
    clean_pred = torch.cat([tapped(x[i:i + 500]).argmax(1) for i in range(0, len(x), 500)]) if len(x) else y
    res = _checked_attack(attack_config, tapped, x, y, None)
    with torch.no_grad():
        adv_pred = torch.cat([tapped(x[i:i + 500] + res.delta[i:i + 500]).argmax(1) for i in range(0, len(x), 500)])
    pre, post = _neuron_means(tapped, x), _neuron_means(tapped, x + res.delta)
    top = torch.as_tensor(top_k_indices(ranking, k))            # (C, k)
    g_pre, g_post = pre[:, top].mean(2), post[:, top].mean(2)   # (M, C)
    unimp = torch.as_tensor(unimportant_indices(ranking, k))
    if len(unimp):
        u_pre, u_post = pre[:, unimp].mean(1), post[:, unimp].mean(1)
    valid = clean_pred == y
    C = ranking.num_classes

    def class_shift(sel, cls):
        return _rel(float((g_post[sel, cls[sel]] - g_pre[sel, cls[sel]]).sum()), float(g_pre[sel, cls[sel]].sum()))

    def pair_shift(sel, exclude):
        m = sel[:, None] & ~exclude
        return _rel(float((g_post - g_pre)[m].sum()), float(g_pre[m].sum())) if m.any() else None

    def unimp_shift(sel):
        if not len(unimp):
            return None
        return _rel(float((u_post[sel] - u_pre[sel]).sum()), float(u_pre[sel].sum()))

    onehot_y = torch.nn.functional.one_hot(y, C).bool()
    onehot_adv = torch.nn.functional.one_hot(adv_pred, C).bool()
    succ_sel = valid & (adv_pred != y)
    fail_sel = valid & (adv_pred == y)
    successful = unsuccessful = None
    if succ_sel.any():
        successful = PartitionShift(int(succ_sel.sum()), class_shift(succ_sel, y), class_shift(succ_sel, adv_pred),
                                    pair_shift(succ_sel, onehot_y | onehot_adv), None, unimp_shift(succ_sel))
    if fail_sel.any():
        unsuccessful = PartitionShift(int(fail_sel.sum()), class_shift(fail_sel, y), None, None,
                                      pair_shift(fail_sel, onehot_y), unimp_shift(fail_sel))
    return ActivationShiftReport(successful, unsuccessful, k, attack_config.epsilon, int((~valid).sum()))


# -- loss surface ---------------------------------------------------------------


def orthogonal_sign_direction(g, seed: int = 0):
    """A +/-1 (or 0) vector orthogonal to the sign vector ``g``."""
    flat = g.flatten()
    gen = torch.Generator().manual_seed(seed)
    d = torch.where(torch.rand(flat.shape, generator=gen) < 0.5, -1.0, 1.0).to(flat.dtype)
    nz = flat.nonzero().flatten()
    perm = nz[torch.randperm(len(nz), generator=gen)]
    half = len(perm) // 2
    d[perm[:half]] = flat[perm[:half]]       # agree
    d[perm[half:2 * half]] = -flat[perm[half:2 * half]]  # disagree
    if len(perm) % 2:
        d[perm[-1]] = 0
    return d.view_as(g)


def loss_surface_grid(model, x, y, threat: ThreatModel, resolution: int = 21, loss: str = "ce", seed: int = 0,
                      key: int = 0) -> dict:
    """Losses on x + a*g + b*g_perp over a (resolution x resolution) grid.

    ``g`` is the sign of the input gradient, ``g_perp`` a +/-1 direction
    orthogonal to it; a and b run over [-eps/2, eps/2] so every grid point
    lies inside the eps-ball without projection. Points are clamped to the
    valid input range. Stochastic models see the same noise at every point.
    """
    if resolution < 3:
        raise ValueError("resolution must be at least 3")
    x = x.unsqueeze(0) if x.ndim == 3 else x
    y = torch.as_tensor(y).view(1)
    keys = torch.full((1,), key)
    from .models import input_gradient

    with keyed(model, keys):
        g = input_gradient(model, x, loss, y).sign()
    g_perp = orthogonal_sign_direction(g, seed)
    half = threat.epsilon / 2
    coords = torch.linspace(-half, half, resolution, dtype=x.dtype)
    a, b = torch.meshgrid(coords, coords, indexing="ij")
    delta = a.reshape(-1, 1, 1, 1, 1) * g + b.reshape(-1, 1, 1, 1, 1) * g_perp
    xs = (x + delta).clamp(*threat.clamp).flatten(0, 1)
    with torch.no_grad(), keyed(model, keys.expand(len(xs))):
        losses = loss_value(loss, model(xs), y.expand(len(xs))).view(resolution, resolution)
    return {"alphas": coords.numpy(), "betas": coords.numpy(), "losses": losses.double().numpy(),
            "max_linf": float((xs - x).abs().max()), "epsilon": threat.epsilon}
