"""Small hand-built models shared by the tests."""
from __future__ import annotations

import torch
import torch.nn as nn

from igdefense.models import StagedNet, TappedClassifier


def conv_stage(cin, cout, relu=True, bias=True):
    layers = [nn.Conv2d(cin, cout, 1, bias=bias)]
    if relu:
        layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def linear_head_net(in_channels=1, neurons=6, classes=3, seed=0, relu=True) -> TappedClassifier:
    """One 1x1-conv stage (the tap) followed by GAP and a linear head."""
    torch.manual_seed(seed)
    net = StagedNet({"feat": conv_stage(in_channels, neurons, relu)}, neurons, classes, (0.0,) * in_channels,
                    (1.0,) * in_channels)
    return TappedClassifier(net.eval(), "feat", arch="toy")


def linear_model(in_channels=1, classes=2, seed=0) -> TappedClassifier:
    """Logits affine in the input: no nonlinearity anywhere."""
    return linear_head_net(in_channels, 4, classes, seed, relu=False)


def two_stage_net(neurons=(4, 6), classes=4, seed=0) -> TappedClassifier:
    torch.manual_seed(seed)
    stages = {"s1": conv_stage(1, neurons[0]), "s2": conv_stage(neurons[0], neurons[1])}
    return TappedClassifier(StagedNet(stages, neurons[1], classes, (0.5,), (0.5,)).eval(), "s2", arch="toy2")


class CountingModel(nn.Module):
    """Wraps a model and counts calls made with autograd enabled."""

    def __init__(self, model):
        super().__init__()
        self.model = model
        self.calls = 0
        self.grad_calls = 0

    def forward(self, x):
        self.calls += 1
        if torch.is_grad_enabled():
            self.grad_calls += 1
        return self.model(x)


class ConstantModel(nn.Module):
    def __init__(self, classes=4):
        super().__init__()
        self.classes = classes
        self.anchor = nn.Parameter(torch.zeros(()), requires_grad=False)

    def forward(self, x):
        return torch.zeros(len(x), self.classes) + 0 * x.flatten(1).sum(1, keepdim=True)


class LinearLogits(nn.Module):
    """z = x.flatten() @ W.T + b, a plain linear classifier on raw pixels."""

    def __init__(self, W, b=None):
        super().__init__()
        self.W = nn.Parameter(torch.as_tensor(W, dtype=torch.float32), requires_grad=False)
        self.b = nn.Parameter(torch.zeros(self.W.shape[0]) if b is None else torch.as_tensor(b, dtype=torch.float32),
                              requires_grad=False)

    def forward(self, x):
        return x.flatten(1) @ self.W.T + self.b
