"""Test-time defense: smoothed pseudo-label, then a label-weighted neuron mask.

    y_hat  = softmax(mean_i f(x + v_i) / tau),   v_i ~ N(0, sigma_d^2 I)
    w      = m @ y_hat                              (N channel weights)
    output = h(w * A(x))                            (clean x in the second pass)

Nothing is detached, so gradients reach the input through both passes.
"""
from __future__ import annotations

import contextlib
import hashlib
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .models import ConfigurationError, TappedClassifier
from .ranking import ImportanceRanking, MaskSpec, check_provenance, top_k_mask

SEED_POLICIES = ("fresh-per-call", "fixed")


@dataclass
class DefenseConfig:
    k: int = 50
    tau: float = 0.01
    n_s: int = 1
    sigma_d: float | None = None
    epsilon: float | None = None
    layer_id: str | None = None
    seed_policy: str = "fresh-per-call"
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError("tau must be positive")
        if self.n_s < 1:
            raise ConfigurationError("n_s must be at least 1")
        if self.sigma_d is not None and self.sigma_d < 0:
            raise ConfigurationError("sigma_d must be non-negative")
        if self.k < 1:
            raise ConfigurationError("k must be at least 1")
        if self.seed_policy not in SEED_POLICIES:
            raise ConfigurationError(f"seed_policy must be one of {SEED_POLICIES}")

    @property
    def noise_std(self) -> float:
        """sigma_d, defaulting to half the threat-model epsilon."""
        if self.sigma_d is not None:
            return self.sigma_d
        if self.epsilon is None:
            raise ConfigurationError("set sigma_d, or epsilon so that sigma_d defaults to epsilon / 2")
        return self.epsilon / 2

    def to_dict(self):
        return asdict(self)


def _mix(*parts) -> int:
    h = hashlib.blake2b(b"|".join(str(p).encode() for p in parts), digest_size=8).digest()
    return int.from_bytes(h, "little") & 0x7FFF_FFFF_FFFF_FFFF


class NoiseSource:
    """Gaussian noise for the smoothing pass.

    ``fixed`` replays the same stream every call; ``fresh-per-call`` keeps
    advancing one stream. Inside ``keyed(keys)`` each image draws from its own
    stream seeded by (seed, key, call index), which makes results independent
    of how images are grouped into batches.
    """

    def __init__(self, seed: int, policy: str):
        self.seed = seed
        self.policy = policy
        self.generator = torch.Generator().manual_seed(seed)
        self.keys = None
        self.calls = 0

    def reseed(self, seed: int):
        self.seed = seed
        self.generator.manual_seed(seed)

    def sample(self, shape, dtype=torch.float32):
        """``shape`` is (n_s, B, ...)."""
        if self.keys is not None:
            call = self.calls if self.policy == "fresh-per-call" else 0
            self.calls += 1
            rows = []
            for key in self.keys.tolist():
                g = torch.Generator().manual_seed(_mix(self.seed, key, call))
                rows.append(torch.randn((shape[0],) + tuple(shape[2:]), generator=g, dtype=dtype))
            return torch.stack(rows, dim=1)
        if self.policy == "fixed":
            self.generator.manual_seed(self.seed)
        return torch.randn(shape, generator=self.generator, dtype=dtype)


def smoothed_logits(base: TappedClassifier, x, config: DefenseConfig, noise: NoiseSource):
    sigma = config.noise_std
    xs = x.unsqueeze(0).expand(config.n_s, *x.shape)
    if sigma > 0:
        xs = xs + sigma * noise.sample(xs.shape, xs.dtype)
    return base(xs.reshape(-1, *x.shape[1:])).view(config.n_s, len(x), -1).mean(0)


def smoothed_pseudo_label(base: TappedClassifier, x, config: DefenseConfig, rng: NoiseSource | None = None):
    """softmax(mean of n_s noisy-input logits / tau)."""
    rng = rng or NoiseSource(config.seed, config.seed_policy)
    return torch.softmax(smoothed_logits(base, x, config, rng) / config.tau, dim=1)


def channel_weights(mask, y_hat):
    """w = m @ y_hat for a batch: (B, C) -> (B, N)."""
    m = mask.tensor() if isinstance(mask, MaskSpec) else torch.as_tensor(mask)
    return y_hat @ m.to(y_hat.dtype).T


def masked_forward(base: TappedClassifier, mask, y_hat, x):
    m = mask.tensor() if isinstance(mask, MaskSpec) else torch.as_tensor(mask)
    if m.shape != (base.num_neurons, base.num_classes):
        raise ValueError(f"mask shape {tuple(m.shape)} does not match tap ({base.num_neurons}, {base.num_classes})")
    a = base.activations(x)
    w = channel_weights(m, y_hat)
    return base.head(a * w.view(*w.shape, *[1] * (a.ndim - 2)))


class DefendedModel(nn.Module):
    """Dual forward pass classifier; a mask of None means an all-ones mask."""

    def __init__(self, base: TappedClassifier, mask: MaskSpec | None, config: DefenseConfig):
        super().__init__()
        self.base = base
        if mask is None:
            ones = torch.ones(base.num_neurons, base.num_classes).numpy()
            mask = MaskSpec(ones, base.num_neurons, {"method": "none"})
        self.mask = mask
        self.config = config
        self.noise = NoiseSource(config.seed, config.seed_policy)
        self.forward_calls = 0
        self.register_buffer("_m", mask.tensor())

    @property
    def fingerprint(self):
        return self.base.fingerprint

    @property
    def num_classes(self):
        return self.base.num_classes

    @property
    def stochastic(self) -> bool:
        return self.config.noise_std > 0

    def reseed(self, seed: int):
        self.noise.reseed(seed)

    @contextlib.contextmanager
    def keyed(self, keys):
        saved = (self.noise.keys, self.noise.calls)
        self.noise.keys = torch.as_tensor(keys, dtype=torch.long)
        self.noise.calls = 0
        try:
            yield self
        finally:
            self.noise.keys, self.noise.calls = saved

    def pseudo_label(self, x):
        return torch.softmax(smoothed_logits(self.base, x, self.config, self.noise) / self.config.tau, dim=1)

    def forward(self, x):
        self.forward_calls += 1
        return masked_forward(self.base, self._m, self.pseudo_label(x), x)


class SmoothedClassifier(nn.Module):
    """Single pass on noisy inputs (mean logits), without masking."""

    def __init__(self, base: TappedClassifier, config: DefenseConfig):
        super().__init__()
        self.base = base
        self.config = config
        self.noise = NoiseSource(config.seed, config.seed_policy)
        self.forward_calls = 0

    fingerprint = DefendedModel.fingerprint
    num_classes = DefendedModel.num_classes
    stochastic = DefendedModel.stochastic
    keyed = DefendedModel.keyed
    reseed = DefendedModel.reseed

    def forward(self, x):
        self.forward_calls += 1
        return smoothed_logits(self.base, x, self.config, self.noise)


def defend(base: TappedClassifier, ranking: ImportanceRanking | None, config: DefenseConfig,
           allow_mismatch: bool = False) -> DefendedModel:
    """Build the defended model; ``ranking=None`` keeps every neuron (no masking)."""
    layer = config.layer_id or (ranking.layer_id if ranking is not None and ranking.layer_id else base.layer_id)
    if layer != base.layer_id:
        base = base.retap(layer)
    if ranking is None:
        return DefendedModel(base, None, config)
    if ranking.layer_id and ranking.layer_id != layer:
        raise ConfigurationError(f"ranking was computed at {ranking.layer_id!r}, defense taps {layer!r}")
    check_provenance(ranking, base, allow_mismatch)
    if config.k > base.num_neurons:
        raise ConfigurationError(f"k={config.k} exceeds the {base.num_neurons} neurons at {layer}")
    return DefendedModel(base, top_k_mask(ranking, config.k), config)
