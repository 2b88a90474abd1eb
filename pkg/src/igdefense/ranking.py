"""Class-wise neuron importance rankings and the masks derived from them.

Three rankers produce an N x C score matrix (higher = more important):

* ``loir_rank``: leave-one-out logit change, averaged over the probe
  samples of each class.
* ``cdir_rank``: soft-WPMI similarity between a neuron's activation vector
  over the probe set and image/class-name embedding products.
* ``random_rank``: i.i.d. uniform scores, the null baseline.
"""
from __future__ import annotations

import io
import json
import logging
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import ProbeDataset
from .io_utils import atomic_write_bytes
from .models import TappedClassifier

logger = logging.getLogger(__name__)

METHODS = ("LO-IR", "CD-IR", "RANDOM")
RANKING_MAGIC = b"IGRANK"
RANKING_VERSION = 1


class RankingError(ValueError):
    pass


class MissingClassError(RankingError):
    pass


class RankingFormatError(RankingError):
    pass


class ProvenanceError(RankingError):
    pass


@dataclass
class ImportanceRanking:
    scores: np.ndarray
    method: str
    layer_id: str = ""
    model_fingerprint: str = ""
    probe_tag: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise RankingError("scores must be an N x C matrix")
        if not np.isfinite(self.scores).all():
            raise RankingError("scores contain NaN or Inf")
        if self.method not in METHODS:
            raise RankingError(f"unknown ranking method {self.method!r}")

    @property
    def num_neurons(self):
        return self.scores.shape[0]

    @property
    def num_classes(self):
        return self.scores.shape[1]

    def metadata(self) -> dict:
        return {"method": self.method, "layer_id": self.layer_id, "model_fingerprint": self.model_fingerprint,
                "probe_tag": self.probe_tag}


@dataclass
class MaskSpec:
    mask: np.ndarray
    k: int
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float32)
        if not (self.mask.sum(0) == self.k).all():
            raise RankingError("every mask column must retain exactly k neurons")

    def tensor(self):
        return torch.from_numpy(self.mask)


# -- LO-IR ----------------------------------------------------------------


def _class_counts(probe: ProbeDataset, num_classes: int):
    counts = np.bincount(probe.labels.numpy(), minlength=num_classes)
    for c in range(num_classes):
        if counts[c] == 0:
            name = probe.class_names[c] if c < len(probe.class_names) else str(c)
            raise MissingClassError(f"probe set has no samples of class {c} ({name})")
    return counts


@torch.no_grad()
def loir_rank(tapped: TappedClassifier, probe: ProbeDataset, batch_size: int = 256, workers: int = 1,
              neuron_chunk: int = 16) -> ImportanceRanking:
    """Leave-one-out importance: mean drop of the class-c logit on class-c probe
    samples when neuron j is zeroed.

    Work is split over neurons; each worker does read-only head evaluations on
    cached activations, so ``workers`` threads can run concurrently.
    """
    C, N = tapped.num_classes, tapped.num_neurons
    counts = _class_counts(probe, C)
    batches = []
    for i in range(0, len(probe), batch_size):
        x, y = probe.images[i:i + batch_size], probe.labels[i:i + batch_size]
        a = tapped.activations(x)
        base = tapped.head(a).gather(1, y[:, None]).squeeze(1)
        batches.append((a, y, base))

    def drop_for(js):
        out = np.zeros((len(js), C))
        for a, y, base in batches:
            # chunk of ablated copies: (len(js) * B, N, H, W)
            rep = a.unsqueeze(0).repeat(len(js), *[1] * a.ndim)
            for r, j in enumerate(js):
                rep[r, :, j] = 0
            logits = tapped.head(rep.flatten(0, 1)).view(len(js), len(y), C)
            ablated = logits.gather(2, y.view(1, -1, 1).expand(len(js), -1, 1)).squeeze(2)
            change = (base.unsqueeze(0) - ablated).double()
            out += np.stack([np.bincount(y.numpy(), weights=row, minlength=C) for row in change.numpy()])
        return js, out

    chunks = [list(range(s, min(s + neuron_chunk, N))) for s in range(0, N, neuron_chunk)]
    sums = np.zeros((N, C))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(drop_for, chunks))
    else:
        results = [drop_for(js) for js in chunks]
    for js, out in results:
        sums[js] = out
    return ImportanceRanking(sums / counts[None, :], "LO-IR", tapped.layer_id, tapped.fingerprint, probe.split_tag)


# -- CD-IR ----------------------------------------------------------------


@dataclass
class EmbeddingBundle:
    image_embeddings: np.ndarray
    text_embeddings: np.ndarray

    def __post_init__(self):
        self.image_embeddings = np.asarray(self.image_embeddings, dtype=np.float64)
        self.text_embeddings = np.asarray(self.text_embeddings, dtype=np.float64)
        for name, e in (("image", self.image_embeddings), ("text", self.text_embeddings)):
            if e.ndim != 2:
                raise RankingError(f"{name} embeddings must be a matrix")
            if not np.allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-5):
                raise RankingError(f"{name} embedding rows must have unit norm")
        if self.image_embeddings.shape[1] != self.text_embeddings.shape[1]:
            raise RankingError("image and text embeddings differ in dimension")

    @classmethod
    def from_raw(cls, image_embeddings, text_embeddings) -> "EmbeddingBundle":
        def unit(e):
            e = np.asarray(e, dtype=np.float64)
            return e / np.linalg.norm(e, axis=1, keepdims=True)
        return cls(unit(image_embeddings), unit(text_embeddings))

    @property
    def inner_products(self) -> np.ndarray:
        return np.clip(self.image_embeddings @ self.text_embeddings.T, -1.0, 1.0)

    @property
    def M(self):
        return self.image_embeddings.shape[0]

    @property
    def C(self):
        return self.text_embeddings.shape[0]

    @property
    def D(self):
        return self.image_embeddings.shape[1]

    def save(self, path):
        buf = io.BytesIO()
        np.savez(buf, D=self.D, M=self.M, C=self.C, image_embeddings=self.image_embeddings,
                 text_embeddings=self.text_embeddings, normalized=True)
        atomic_write_bytes(path, buf.getvalue())

    @classmethod
    def load(cls, path) -> "EmbeddingBundle":
        try:
            with np.load(path) as z:
                img, txt = z["image_embeddings"], z["text_embeddings"]
                if img.shape != (int(z["M"]), int(z["D"])) or txt.shape != (int(z["C"]), int(z["D"])):
                    raise RankingFormatError(f"{path}: header does not match matrix shapes")
                normalized = bool(z["normalized"])
        except (OSError, KeyError, ValueError) as exc:
            raise RankingFormatError(f"cannot read embedding bundle {path}: {exc}") from exc
        return cls(img, txt) if normalized else cls.from_raw(img, txt)


def mock_encoder(probe: ProbeDataset, dim: int = 32, seed: int = 0, pool: int = 4) -> EmbeddingBundle:
    """Deterministic stand-in for a joint image/text encoder.

    Image embeddings are a seeded Gaussian projection of simple pixel
    statistics (a ``pool x pool`` average-pooled copy of each channel plus
    its mean and std). The embedding of class c is the normalized mean image
    embedding of the probe samples labelled c.
    """
    x = probe.images.double()
    feats = torch.cat([F.adaptive_avg_pool2d(x, pool).flatten(1), x.mean(dim=(2, 3)), x.std(dim=(2, 3))], dim=1)
    feats = (feats - feats.mean(0)).numpy()
    proj = np.random.default_rng(seed).standard_normal((feats.shape[1], dim))
    img = feats @ proj
    img /= np.maximum(np.linalg.norm(img, axis=1, keepdims=True), 1e-12)
    labels = probe.labels.numpy()
    missing = [c for c in range(probe.num_classes) if not (labels == c).any()]
    if missing:
        raise MissingClassError(f"classes {missing} have no probe samples")
    txt = np.stack([img[labels == c].mean(0) for c in range(probe.num_classes)])
    return EmbeddingBundle.from_raw(img, txt)


@dataclass(frozen=True)
class SimilarityConfig:
    lam: float = 1.0
    activation_temperature: float = 0.1
    class_temperature: float = 0.05

    def __post_init__(self):
        if not 0 <= self.lam <= 1:
            raise RankingError("lambda must lie in [0, 1]")
        if self.activation_temperature <= 0 or self.class_temperature <= 0:
            raise RankingError("temperatures must be positive")


def _softmax(z, axis):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def class_probabilities(P, cfg: SimilarityConfig):
    """p(c | x_i): softmax over classes of the embedding inner products."""
    return _softmax(np.asarray(P, dtype=np.float64) / cfg.class_temperature, axis=1)


def soft_wpmi(q, P, k: int, cfg: SimilarityConfig = SimilarityConfig()) -> float:
    """log sum_i w_i p(c_k|x_i) - lam * log mean_i p(c_k|x_i), w = softmax(q / T_a)."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or len(q) < 1:
        raise RankingError("q must be a non-empty vector")
    w = _softmax(q / cfg.activation_temperature, axis=0)
    pk = class_probabilities(P, cfg)[:, k]
    return float(np.log(w @ pk) - cfg.lam * np.log(pk.mean()))


def soft_wpmi_matrix(Q, P, cfg: SimilarityConfig = SimilarityConfig()) -> np.ndarray:
    """Vectorized soft-WPMI for all neurons (rows of Q, shape N x M) and classes."""
    W = _softmax(np.asarray(Q, dtype=np.float64) / cfg.activation_temperature, axis=1)
    p = class_probabilities(P, cfg)
    return np.log(W @ p) - cfg.lam * np.log(p.mean(0))[None, :]


@torch.no_grad()
def activation_matrix(tapped: TappedClassifier, probe: ProbeDataset, batch_size: int = 256) -> np.ndarray:
    """Spatial-mean activations of every neuron, shape (N, M)."""
    cols = [tapped.activations(probe.images[i:i + batch_size]).mean(dim=(2, 3))
            for i in range(0, len(probe), batch_size)]
    return torch.cat(cols).double().numpy().T


def neuron_activation_vector(tapped: TappedClassifier, probe: ProbeDataset, j: int) -> np.ndarray:
    if not 0 <= j < tapped.num_neurons:
        raise IndexError(f"neuron index {j} out of range [0, {tapped.num_neurons})")
    return activation_matrix(tapped, probe)[j]


def cdir_rank(tapped: TappedClassifier, probe: ProbeDataset, bundle: EmbeddingBundle,
              cfg: SimilarityConfig = SimilarityConfig()) -> ImportanceRanking:
    if bundle.M != len(probe):
        raise RankingError(f"bundle has {bundle.M} image embeddings but the probe set has {len(probe)} samples")
    if bundle.C != tapped.num_classes:
        raise RankingError(f"bundle has {bundle.C} class embeddings but the model has {tapped.num_classes} classes")
    scores = soft_wpmi_matrix(activation_matrix(tapped, probe), bundle.inner_products, cfg)
    return ImportanceRanking(scores, "CD-IR", tapped.layer_id, tapped.fingerprint, probe.split_tag)


def random_rank(N: int, C: int, seed: int = 0, layer_id: str = "", model_fingerprint: str = "") -> ImportanceRanking:
    scores = np.random.default_rng(seed).uniform(size=(N, C))
    return ImportanceRanking(scores, "RANDOM", layer_id, model_fingerprint, f"seed={seed}")


# -- masks ----------------------------------------------------------------


def top_k_indices(ranking: ImportanceRanking, k: int) -> np.ndarray:
    """(C, k) neuron indices; ties go to the lower index."""
    N = ranking.num_neurons
    if not 1 <= k <= N:
        raise RankingError(f"k must lie in [1, {N}], got {k}")
    # stable sort on -score keeps index order among equal scores
    order = np.argsort(-ranking.scores, axis=0, kind="stable")
    return order[:k].T


def top_k_mask(ranking: ImportanceRanking, k: int) -> MaskSpec:
    idx = top_k_indices(ranking, k)
    mask = np.zeros(ranking.scores.shape, dtype=np.float32)
    for c, rows in enumerate(idx):
        mask[rows, c] = 1
    return MaskSpec(mask, k, ranking.metadata())


def unimportant_indices(ranking: ImportanceRanking, k: int) -> np.ndarray:
    important = np.unique(top_k_indices(ranking, k))
    return np.setdiff1d(np.arange(ranking.num_neurons), important)


# -- persistence ----------------------------------------------------------


def ranking_to_bytes(ranking: ImportanceRanking) -> bytes:
    header = json.dumps({**ranking.metadata(), "N": ranking.num_neurons, "C": ranking.num_classes}).encode()
    body = np.ascontiguousarray(ranking.scores, dtype="<f8").tobytes()
    return RANKING_MAGIC + struct.pack("<HI", RANKING_VERSION, len(header)) + header + body


def ranking_from_bytes(data: bytes) -> ImportanceRanking:
    if not data.startswith(RANKING_MAGIC) or len(data) < len(RANKING_MAGIC) + 6:
        raise RankingFormatError("not a ranking cache file")
    off = len(RANKING_MAGIC)
    version, hlen = struct.unpack_from("<HI", data, off)
    if version > RANKING_VERSION:
        raise RankingFormatError(f"unsupported ranking file version {version}")
    off += 6
    try:
        header = json.loads(data[off:off + hlen])
    except ValueError as exc:
        raise RankingFormatError("corrupt ranking header") from exc
    off += hlen
    n, c = header["N"], header["C"]
    body = data[off:]
    if len(body) != 8 * n * c:
        raise RankingFormatError(f"ranking body has {len(body)} bytes, expected {8 * n * c}")
    scores = np.frombuffer(body, dtype="<f8").reshape(n, c).copy()
    return ImportanceRanking(scores, header["method"], header["layer_id"], header["model_fingerprint"],
                             header["probe_tag"])


def save_ranking(ranking: ImportanceRanking, path):
    atomic_write_bytes(path, ranking_to_bytes(ranking))


def load_ranking(path, model: TappedClassifier | None = None, allow_mismatch: bool = False) -> ImportanceRanking:
    with open(path, "rb") as f:
        ranking = ranking_from_bytes(f.read())
    if model is not None:
        check_provenance(ranking, model, allow_mismatch)
    return ranking


def check_provenance(ranking: ImportanceRanking, model: TappedClassifier, allow_mismatch: bool = False):
    problems = []
    if ranking.model_fingerprint and ranking.model_fingerprint != model.fingerprint:
        problems.append(f"fingerprint {ranking.model_fingerprint} != model {model.fingerprint}")
    if ranking.num_neurons != model.num_neurons or ranking.num_classes != model.num_classes:
        problems.append(f"shape {ranking.scores.shape} != model ({model.num_neurons}, {model.num_classes})")
    if not problems:
        return
    msg = "ranking does not match model: " + "; ".join(problems)
    if allow_mismatch and ranking.scores.shape == (model.num_neurons, model.num_classes):
        warnings.warn(msg, stacklevel=3)
        return
    raise ProvenanceError(msg)
