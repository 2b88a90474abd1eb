"""Dataset containers and loaders.

Images live in model input space: float32 tensors of shape (M, C, H, W)
with values in [0, 1]. Normalization, when a model needs it, happens
inside the model so that attack budgets are always in pixel units.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F


class DatasetError(ValueError):
    pass


@dataclass
class ProbeDataset:
    images: torch.Tensor
    labels: torch.Tensor
    split_tag: str = "train"
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = torch.as_tensor(self.images, dtype=torch.float32)
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (M, C, H, W), got {tuple(self.images.shape)}")
        if len(self.images) < 1:
            raise DatasetError("dataset must contain at least one sample")
        if len(self.images) != len(self.labels):
            raise DatasetError("images and labels differ in length")
        if not self.class_names:
            self.class_names = [str(c) for c in range(int(self.labels.max()) + 1)]
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, index) -> "ProbeDataset":
        index = torch.as_tensor(index, dtype=torch.long)
        return ProbeDataset(self.images[index], self.labels[index], self.split_tag, list(self.class_names))

    def head(self, n: int) -> "ProbeDataset":
        return self.subset(torch.arange(min(n, len(self))))

    def fraction_indices(self, frac: float, seed: int = 0) -> np.ndarray:
        """Sorted indices of a class-stratified subset keeping at least one sample per present class."""
        if not 0 < frac <= 1:
            raise DatasetError(f"fraction must be in (0, 1], got {frac}")
        if frac == 1:
            return np.arange(len(self))
        rng = np.random.default_rng(seed)
        labels = self.labels.numpy()
        keep = []
        for c in np.unique(labels):
            idx = np.flatnonzero(labels == c)
            n = max(1, int(round(frac * len(idx))))
            keep.extend(rng.choice(idx, size=n, replace=False).tolist())
        return np.array(sorted(keep))

    def fraction(self, frac: float, seed: int = 0) -> "ProbeDataset":
        if frac == 1:
            return self
        return self.subset(self.fraction_indices(frac, seed))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels.numpy(), minlength=self.num_classes)


def _split(images, labels, test_size, seed):
    from sklearn.model_selection import train_test_split

    return train_test_split(images, labels, test_size=test_size, random_state=seed, stratify=labels)


def load_digits(size: int = 16, test_size: int = 500, seed: int = 0, contrast: float = 1.0):
    """The 8x8 handwritten digits bundled with scikit-learn, resized to ``size``.

    ``contrast`` < 1 squeezes pixel values towards 0.5, which scales the
    data's margins down relative to a fixed l_inf budget. Returns
    ``(train, test)``.
    """
    from sklearn.datasets import load_digits as _load

    bunch = _load()
    x = torch.tensor(bunch.images, dtype=torch.float32).unsqueeze(1) / 16.0
    if size != 8:
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False).clamp(0, 1)
    x = 0.5 + contrast * (x - 0.5)
    y = bunch.target.astype(np.int64)
    names = [str(n) for n in bunch.target_names]
    xtr, xte, ytr, yte = _split(x.numpy(), y, test_size, seed)
    return (ProbeDataset(xtr, ytr, "train", names), ProbeDataset(xte, yte, "test", names))


def make_synthetic(num_classes: int = 4, per_class: int = 64, channels: int = 1, size: int = 8,
                   noise: float = 0.15, seed: int = 0, split_tag: str = "train",
                   sample_seed: int | None = None) -> ProbeDataset:
    """Class-template images plus Gaussian noise, for tests and smoke runs.

    Templates depend on ``seed`` only; ``sample_seed`` draws a fresh sample
    from the same distribution (train and test splits share templates).
    """
    templates = torch.rand(num_classes, channels, size, size, generator=torch.Generator().manual_seed(seed))
    g = torch.Generator().manual_seed(seed if sample_seed is None else sample_seed)
    g.manual_seed(g.initial_seed() + 7919)
    labels = torch.arange(num_classes).repeat_interleave(per_class)
    images = templates[labels] + noise * torch.randn(len(labels), channels, size, size, generator=g)
    perm = torch.randperm(len(labels), generator=g)
    return ProbeDataset(images.clamp(0, 1)[perm], labels[perm], split_tag, [f"class_{c}" for c in range(num_classes)])


def load_array_dir(path, split: str) -> ProbeDataset:
    """Read ``<path>/<split>.npz`` holding ``images`` (M,C,H,W) and ``labels``.

    An optional ``class_names`` array sets the label vocabulary.
    """
    f = Path(path) / f"{split}.npz"
    if not f.exists():
        raise DatasetError(f"missing array file {f}")
    with np.load(f, allow_pickle=False) as z:
        images = z["images"].astype(np.float32)
        labels = z["labels"].astype(np.int64)
        names = [str(s) for s in z["class_names"]] if "class_names" in z.files else []
    if images.ndim == 3:
        images = images[:, None]
    return ProbeDataset(images, labels, split, names)


def save_array_dir(dataset: ProbeDataset, path, split: str | None = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    np.savez(path / f"{split or dataset.split_tag}.npz", images=dataset.images.numpy(),
             labels=dataset.labels.numpy(), class_names=np.array(dataset.class_names))


def load_dataset(spec: dict):
    """Build ``(train, test)`` from a dataset spec mapping (see RunConfig)."""
    spec = dict(spec)
    name = spec.pop("name", "digits")
    if name == "digits":
        return load_digits(**spec)
    if name == "synthetic":
        seed = spec.pop("seed", 0)
        return (make_synthetic(seed=seed, split_tag="train", **spec),
                make_synthetic(seed=seed, sample_seed=seed + 1, split_tag="test", **spec))
    if name == "arrays":
        path = spec["path"]
        return load_array_dir(path, "train"), load_array_dir(path, "test")
    raise DatasetError(f"unknown dataset {name!r}; expected digits, synthetic or arrays")
