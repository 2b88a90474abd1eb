"""Classifiers with an activation tap, f = h(A(x)).

Two desk-scale architectures are provided. Both are plain chains of stages
so that any stage output can serve as the tap point and the head is simply
the remainder of the chain. Activations are tapped after the stage's final
ReLU. When the tapped map is spatial, the head starts with whatever stages
remain, then global average pooling and a linear classifier.

Tap points:
    SmallCNN  stage1..stage4 -> 32/64/128/256 channels (stage4 is penultimate)
    ResNet18  layer1..layer4 -> 64/128/256/512 channels (layer4 is penultimate)
"""
from __future__ import annotations

import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ProbeDataset

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "igdefense-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class Normalize(nn.Module):
    def __init__(self, mean, std):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


class StagedNet(nn.Module):
    """Normalize -> stages -> global average pool -> linear."""

    def __init__(self, stages: dict[str, nn.Module], width: int, num_classes: int, mean, std, dropout: float = 0.0):
        super().__init__()
        self.normalize = Normalize(mean, std)
        self.stages = nn.ModuleDict(stages)
        self.dropout = nn.Dropout(dropout)
        self.fc = nn.Linear(width, num_classes)

    @property
    def layer_ids(self) -> list[str]:
        return list(self.stages.keys())

    def run_stages(self, x, start: int = 0, stop: int | None = None):
        for name in self.layer_ids[start:stop]:
            x = self.stages[name](x)
        return x

    def classify(self, a):
        return self.fc(self.dropout(a.mean(dim=(2, 3))))

    def forward(self, x):
        return self.classify(self.run_stages(self.normalize(x)))


def _conv_bn_relu(cin, cout, pool):
    layers = [nn.MaxPool2d(2)] if pool else []
    layers += [nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU()]
    return nn.Sequential(*layers)


def small_cnn(in_channels=1, num_classes=10, widths=(32, 64, 128, 256), mean=(0.5,), std=(0.5,), dropout=0.0):
    stages, cin = {}, in_channels
    for i, w in enumerate(widths):
        stages[f"stage{i + 1}"] = _conv_bn_relu(cin, w, pool=i > 0)
        cin = w
    return StagedNet(stages, cin, num_classes, mean, std, dropout)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


def resnet18(in_channels=1, num_classes=10, base_width=64, mean=(0.5,), std=(0.5,), dropout=0.0):
    widths = [base_width * m for m in (1, 2, 4, 8)]
    stem = nn.Sequential(nn.Conv2d(in_channels, widths[0], 3, 1, 1, bias=False), nn.BatchNorm2d(widths[0]), nn.ReLU())
    stages, cin = {}, widths[0]
    for i, w in enumerate(widths):
        stride = 1 if i == 0 else 2
        blocks = [BasicBlock(cin, w, stride), BasicBlock(w, w, 1)]
        if i == 0:
            blocks.insert(0, stem)
        stages[f"layer{i + 1}"] = nn.Sequential(*blocks)
        cin = w
    return StagedNet(stages, cin, num_classes, mean, std, dropout)


ARCHITECTURES = {"small_cnn": small_cnn, "resnet18": resnet18}


def build_model(arch: str, **kwargs) -> StagedNet:
    if arch not in ARCHITECTURES:
        raise ConfigurationError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    return ARCHITECTURES[arch](**kwargs)


def fingerprint_module(module: nn.Module, arch: str = "") -> str:
    h = hashlib.sha256(arch.encode())
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


class TappedClassifier(nn.Module):
    """A staged network split at ``layer_id`` into A (activations) and h (head).

    ``forward`` is literally ``head(activations(x))`` so the split identity
    holds bit for bit. ``images_seen`` counts inputs pushed through A, which
    is one base forward pass per image.
    """

    def __init__(self, net: StagedNet, layer_id: str, class_names=None, arch: str = "", arch_kwargs=None):
        super().__init__()
        if layer_id not in net.layer_ids:
            raise ConfigurationError(f"unknown layer_id {layer_id!r}; valid layer ids: {net.layer_ids}")
        self.net = net.eval()
        self.layer_id = layer_id
        self._split = net.layer_ids.index(layer_id) + 1
        self.num_classes = net.fc.out_features
        self.class_names = list(class_names) if class_names else [str(c) for c in range(self.num_classes)]
        if len(self.class_names) != self.num_classes:
            raise ConfigurationError("class_names length does not match the classifier output")
        self.arch = arch
        self.arch_kwargs = dict(arch_kwargs or {})
        self.num_neurons = self._probe_width()
        self.fingerprint = fingerprint_module(net, arch)
        self.images_seen = 0
        for p in self.net.parameters():
            p.requires_grad_(False)

    def _probe_width(self):
        stage = self.net.stages[self.layer_id]
        convs = [m for m in stage.modules() if isinstance(m, nn.Conv2d)]
        if isinstance(stage[-1], BasicBlock):
            return stage[-1].conv2.out_channels
        return convs[-1].out_channels

    @property
    def layer_ids(self):
        return self.net.layer_ids

    def activations(self, x):
        self.images_seen += x.shape[0]
        return self.net.run_stages(self.net.normalize(x), 0, self._split)

    def head(self, a):
        return self.net.classify(self.net.run_stages(a, self._split))

    def forward(self, x):
        return self.head(self.activations(x))

    def retap(self, layer_id: str) -> "TappedClassifier":
        return TappedClassifier(self.net, layer_id, self.class_names, self.arch, self.arch_kwargs)


def tap(model, layer_id: str, class_names=None) -> TappedClassifier:
    """Split ``model`` (a StagedNet or TappedClassifier) at ``layer_id``."""
    if isinstance(model, TappedClassifier):
        return model.retap(layer_id)
    return TappedClassifier(model, layer_id, class_names)


def ablate_channel(a: torch.Tensor, j: int) -> torch.Tensor:
    a = a.clone()
    a[:, j] = 0
    return a


def neuron_ablated_forward(tapped: TappedClassifier, x, j: int):
    """Logits of the model with channel ``j`` of the tapped layer zeroed."""
    if not 0 <= j < tapped.num_neurons:
        raise IndexError(f"neuron index {j} out of range [0, {tapped.num_neurons})")
    return tapped.head(ablate_channel(tapped.activations(x), j))


def input_gradient(model, x, loss_spec="ce", y=None, target=None):
    """Gradient of the summed per-sample loss w.r.t. the input batch."""
    from .attacks.losses import LossSpec, loss_value

    spec = loss_spec if isinstance(loss_spec, LossSpec) else LossSpec(kind=loss_spec, target=target)
    x = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        loss = loss_value(spec.kind, model(x), y, spec.target).sum()
        if not loss.requires_grad:
            return torch.zeros_like(x)
        (grad,) = torch.autograd.grad(loss, x, allow_unused=True)
    return torch.zeros_like(x) if grad is None else grad.detach()


# -- training -------------------------------------------------------------


@dataclass
class TrainConfig:
    mode: str = "standard"
    epochs: int = 10
    lr: float = 0.05
    schedule: str = "cosine"
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epsilon: float = 8 / 255
    attack_steps: int = 7
    attack_step_size: float = 2 / 255
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("standard", "pgd_adversarial"):
            raise ConfigurationError(f"unknown training mode {self.mode!r}")
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be non-negative")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be at least 1")
        if self.schedule not in ("cosine", "constant", "step"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")


def _lr_at(cfg: TrainConfig, epoch: int, frac: float) -> float:
    t = (epoch + frac) / cfg.epochs
    if cfg.schedule == "cosine":
        return 0.5 * cfg.lr * (1 + math.cos(math.pi * t))
    if cfg.schedule == "step":
        return cfg.lr * (0.1 ** int(t >= 0.5)) * (0.1 ** int(t >= 0.75))
    return cfg.lr


def train_base_model(architecture, dataset: ProbeDataset, cfg: TrainConfig,
                     layer_id: str | None = None, **arch_kwargs) -> TappedClassifier:
    """Train a classifier from scratch and return it tapped at ``layer_id``.

    ``architecture`` is an entry of ARCHITECTURES. ``pgd_adversarial`` mode
    trains on PGD examples (random start) generated against the current
    weights in eval mode.
    """
    from .attacks.gradient import pgd
    from .attacks.base import ThreatModel

    missing = set(range(dataset.num_classes)) - set(dataset.labels.tolist())
    if missing:
        raise ConfigurationError(f"training data lacks classes {sorted(missing)}")
    arch_kwargs = {"in_channels": dataset.images.shape[1], "num_classes": dataset.num_classes, **arch_kwargs}
    torch.manual_seed(cfg.seed)
    net = build_model(architecture, **arch_kwargs)
    opt = torch.optim.SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    g = torch.Generator().manual_seed(cfg.seed)
    threat = ThreatModel(cfg.epsilon)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=g)
        total = 0.0
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x, y = dataset.images[idx], dataset.labels[idx]
            if cfg.mode == "pgd_adversarial" and cfg.epsilon > 0:
                net.eval()
                res = pgd(net, x, y, threat, steps=cfg.attack_steps, step_size=cfg.attack_step_size,
                          random_start=True, mode="last", generator=g)
                x = (x + res.delta).detach()
            net.train()
            for group in opt.param_groups:
                group["lr"] = _lr_at(cfg, epoch, b / steps_per_epoch)
            loss = F.cross_entropy(net(x), y)
            if not torch.isfinite(loss):
                raise TrainingError(f"loss diverged (non-finite) at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        logger.info("epoch %d loss %.4f", epoch, total / n)
    net.eval()
    layer_id = layer_id or net.layer_ids[-1]
    return TappedClassifier(net, layer_id, dataset.class_names, architecture, arch_kwargs)


# -- checkpoints ----------------------------------------------------------


def save_checkpoint(model: TappedClassifier, path, train_config: TrainConfig | None = None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": model.arch,
        "arch_kwargs": model.arch_kwargs,
        "layer_id": model.layer_id,
        "class_names": model.class_names,
        "fingerprint": model.fingerprint,
        "normalization": {"mean": model.net.normalize.mean.flatten().tolist(),
                          "std": model.net.normalize.std.flatten().tolist()},
        "train_config": asdict(train_config) if train_config else None,
        "state_dict": model.net.state_dict(),
    }
    from .io_utils import atomic_write_bytes

    buf = io.BytesIO()
    torch.save(payload, buf)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path, layer_id: str | None = None) -> TappedClassifier:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types on corrupt files
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an igdefense checkpoint")
    if payload["version"] > CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {payload['version']} is newer than supported")
    net = build_model(payload["arch"], **payload["arch_kwargs"])
    net.load_state_dict(payload["state_dict"])
    model = TappedClassifier(net, layer_id or payload["layer_id"], payload["class_names"],
                             payload["arch"], payload["arch_kwargs"])
    if model.fingerprint != payload["fingerprint"]:
        raise CheckpointError(f"fingerprint mismatch in {path}: stored {payload['fingerprint']}, "
                              f"recomputed {model.fingerprint}")
    return model


@torch.no_grad()
def predict(model, images, batch_size: int = 500):
    return torch.cat([model(images[i:i + batch_size]).argmax(1) for i in range(0, len(images), batch_size)])
