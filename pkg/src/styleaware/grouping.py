"""Related-style retrieval.

An artist classifier is trained from scratch as a surrogate task; the
activations of its first fully connected layer (``fc6``) embed artworks.
A query's style set is every artwork whose cosine distance to the query
falls below a quantile of all pairwise distances in the collection.
"""

import io
import math
import struct
from dataclasses import dataclass, field, asdict
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ClassifierError, GroupingError
from .model import scaled_channels

VGG16_BLOCKS = (2, 2, 3, 3, 3)
VGG16_WIDTHS = (64, 128, 256, 512, 512)
FC_WIDTH = 4096
DEFAULT_PAIR_CAP = 10**6

INDEX_MAGIC = b"SAEMBIDX"
INDEX_VERSION = 1


# --------------------------------------------------------------------------
# surrogate artist classifier

@dataclass
class ClassifierSpec:
    """VGG16 layout (13 conv + fc6/fc7/fc8) with a width multiplier."""

    width_scale: float = 1.0
    image_size: int = 224
    blocks: tuple = VGG16_BLOCKS

    def __post_init__(self):
        self.blocks = tuple(self.blocks)
        if not self.width_scale > 0:
            raise ValueError("width_scale must be positive")
        if self.image_size < 2 ** len(self.blocks):
            raise ValueError(f"image_size {self.image_size} too small for {len(self.blocks)} pooling stages")

    @property
    def feature_width(self) -> int:
        return scaled_channels(FC_WIDTH, self.width_scale)

    def to_dict(self):
        return asdict(self)


class ArtistClassifier(nn.Module):
    def __init__(self, spec: ClassifierSpec, labels: Sequence[str]):
        super().__init__()
        self.spec = spec
        self.labels = list(labels)
        self.trained = False
        self.holdout_accuracy = float("nan")
        layers = []
        in_ch = 3
        for n_conv, base in zip(spec.blocks, VGG16_WIDTHS):
            out_ch = scaled_channels(base, spec.width_scale)
            for _ in range(n_conv):
                layers += [nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.ReLU()]
                in_ch = out_ch
            layers.append(nn.MaxPool2d(2))
        self.features = nn.Sequential(*layers)
        side = spec.image_size // 2 ** len(spec.blocks)
        fc = spec.feature_width
        self.fc6 = nn.Linear(in_ch * side * side, fc)
        self.fc7 = nn.Linear(fc, fc)
        self.fc8 = nn.Linear(fc, len(self.labels))

    def resize(self, images: torch.Tensor) -> torch.Tensor:
        """Bilinear resize to the training resolution."""
        if images.dim() == 3:
            images = images.unsqueeze(0)
        size = self.spec.image_size
        if images.shape[-2:] != (size, size):
            images = F.interpolate(images, size=(size, size), mode="bilinear", align_corners=False)
        return images

    def prepare(self, images: torch.Tensor) -> torch.Tensor:
        return self.resize(images) - 0.5

    def fc6_activations(self, images):
        h = self.features(self.prepare(images)).flatten(1)
        return F.relu(self.fc6(h))

    def forward(self, images):
        return self.fc8(F.relu(self.fc7(self.fc6_activations(images))))

    def label_index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise ClassifierError(f"unknown artist {label!r}; known: {self.labels}") from None

    def save(self, path):
        torch.save({
            "spec": self.spec.to_dict(),
            "labels": self.labels,
            "state_dict": self.state_dict(),
            "trained": self.trained,
            "holdout_accuracy": self.holdout_accuracy,
        }, path)

    @classmethod
    def load(cls, path) -> "ArtistClassifier":
        try:
            blob = torch.load(path, map_location="cpu", weights_only=False)
            clf = cls(ClassifierSpec(**blob["spec"]), blob["labels"])
            clf.load_state_dict(blob["state_dict"])
            clf.trained = blob["trained"]
            clf.holdout_accuracy = blob["holdout_accuracy"]
        except FileNotFoundError:
            raise
        except Exception as exc:
            raise ClassifierError(f"{path}: unreadable classifier file ({exc})") from exc
        clf.eval()
        return clf


def _batch_for(clf: "ArtistClassifier", images) -> torch.Tensor:
    """Images (a tensor or a list of differently sized ones) resized and
    stacked to ``[N, 3, S, S]``."""
    if isinstance(images, torch.Tensor):
        return clf.resize(images)
    return torch.cat([clf.resize(im) for im in images])


def split_holdout(corpus: Mapping[str, Sequence], holdout_fraction: float, seed: int):
    """Per-class seeded split.  Classes with a single image keep it for training."""
    rng = np.random.default_rng(seed)
    train, holdout = [], []
    for label_idx, (_, images) in enumerate(corpus.items()):
        order = rng.permutation(len(images))
        n_hold = int(round(len(images) * holdout_fraction))
        n_hold = min(n_hold, len(images) - 1)
        for rank, i in enumerate(order):
            (holdout if rank < n_hold else train).append((images[i], label_idx))
    return train, holdout


def train_artist_classifier(
    corpus: Mapping[str, Sequence[torch.Tensor]],
    spec: ClassifierSpec = None,
    epochs: int = 20,
    lr: float = 1e-3,
    batch_size: int = 16,
    holdout_fraction: float = 0.2,
    seed: int = 0,
) -> ArtistClassifier:
    """Train an artist classifier from scratch on ``{artist: [image, ...]}``.

    Images are ``[3, H, W]`` tensors in [0, 1]; they are resized to
    ``spec.image_size``.  The held-out accuracy is stored on the returned
    classifier as ``holdout_accuracy``.
    """
    spec = spec or ClassifierSpec()
    if len(corpus) < 2:
        raise ClassifierError(f"need at least 2 artist classes, got {len(corpus)}")
    for label, images in corpus.items():
        if len(images) == 0:
            raise ClassifierError(f"artist class {label!r} has no images")

    train_set, holdout_set = split_holdout(corpus, holdout_fraction, seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        clf = ArtistClassifier(spec, list(corpus.keys()))
        for m in clf.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
    xs = _batch_for(clf, [im for im, _ in train_set])
    ys = torch.tensor([y for _, y in train_set])
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    rng = np.random.default_rng(seed + 1)
    clf.train()
    for _ in range(epochs):
        order = torch.from_numpy(rng.permutation(len(xs)))
        for start in range(0, len(xs), batch_size):
            idx = order[start:start + batch_size]
            loss = F.cross_entropy(clf(xs[idx]), ys[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    clf.eval()
    clf.trained = True
    if holdout_set:
        preds = predict(clf, [im for im, _ in holdout_set])
        truth = np.array([y for _, y in holdout_set])
        clf.holdout_accuracy = float((preds == truth).mean())
    return clf


def _require_trained(clf: ArtistClassifier):
    if not getattr(clf, "trained", False):
        raise ClassifierError("classifier has not been trained")


@torch.no_grad()
def predict(clf: ArtistClassifier, images, batch_size: int = 64) -> np.ndarray:
    """Arg-max class index for each image."""
    _require_trained(clf)
    batch = _batch_for(clf, images)
    out = [clf(batch[i:i + batch_size]).argmax(dim=1) for i in range(0, len(batch), batch_size)]
    return torch.cat(out).numpy()


@torch.no_grad()
def embed(images, clf: ArtistClassifier) -> np.ndarray:
    """fc6 activations, shape ``[N, F]`` (or ``[F]`` for a single 3-D image)."""
    _require_trained(clf)
    single = isinstance(images, torch.Tensor) and images.dim() == 3
    batch = _batch_for(clf, images)
    vecs = torch.cat([clf.fc6_activations(batch[i:i + 1]) for i in range(len(batch))])
    vecs = vecs.numpy()
    return vecs[0] if single else vecs


# --------------------------------------------------------------------------
# distances and retrieval

# Every distance goes through ``_row_dots``: an elementwise product followed
# by a row sum.  Unlike a matrix product, the result for a pair does not
# depend on how many other pairs are computed alongside it, so the pairwise
# definition, the full matrix and the sampled path agree bit for bit.

_PAIR_CHUNK = 4096


def _row_dots(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a * b).sum(axis=1)


def _unit_rows(vectors) -> np.ndarray:
    v = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    norms = np.sqrt(_row_dots(v, v))
    if (norms == 0).any():
        raise GroupingError("cosine distance is undefined for a zero vector")
    return v / norms[:, None]


def _pair_distances(unit: np.ndarray, rows, cols) -> np.ndarray:
    rows, cols = np.asarray(rows), np.asarray(cols)
    out = np.empty(len(rows))
    for start in range(0, len(rows), _PAIR_CHUNK):
        sl = slice(start, start + _PAIR_CHUNK)
        out[sl] = 1.0 - np.clip(_row_dots(unit[rows[sl]], unit[cols[sl]]), -1.0, 1.0)
    return out


def distance(a, b) -> float:
    """Cosine distance 1 - cos(a, b), in [0, 2]."""
    unit = _unit_rows(np.stack([np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)]))
    return float(_pair_distances(unit, [0], [1])[0])


def distances_to(query_vec, vectors) -> np.ndarray:
    unit = _unit_rows(np.concatenate([np.atleast_2d(query_vec), np.atleast_2d(vectors)]))
    n = len(unit) - 1
    return _pair_distances(unit, np.zeros(n, dtype=np.int64), np.arange(1, n + 1))


def distance_matrix(vectors) -> np.ndarray:
    """Symmetric matrix of cosine distances with an exact zero diagonal."""
    unit = _unit_rows(vectors)
    m = len(unit)
    rows, cols = np.triu_indices(m, k=1)
    out = np.zeros((m, m))
    d = _pair_distances(unit, rows, cols)
    out[rows, cols] = d
    out[cols, rows] = d
    return out


@dataclass
class EmbeddingIndex:
    ids: List[str]
    vectors: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise GroupingError(f"vectors shape {self.vectors.shape} does not match {len(self.ids)} ids")
        if len(self.ids) < 2:
            raise GroupingError("an embedding index needs at least 2 entries")
        if len(set(self.ids)) != len(self.ids):
            raise GroupingError("duplicate ids in embedding index")
        if not np.isfinite(self.vectors).all():
            raise GroupingError("embedding vectors must be finite")
        if (np.abs(self.vectors).sum(axis=1) == 0).any():
            raise GroupingError("embedding vectors must be non-zero")

    def __len__(self):
        return len(self.ids)

    def position(self, item_id) -> int:
        try:
            return self.ids.index(str(item_id))
        except ValueError:
            raise GroupingError(f"unknown query id {item_id!r}") from None

    def save(self, path) -> None:
        m, f = self.vectors.shape
        with open(path, "wb") as fh:
            fh.write(INDEX_MAGIC)
            fh.write(struct.pack("<III", INDEX_VERSION, m, f))
            for item_id in self.ids:
                raw = item_id.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
            fh.write(self.vectors.astype("<f4").tobytes(order="C"))

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        data = Path(path).read_bytes()
        buf = io.BytesIO(data)
        if buf.read(len(INDEX_MAGIC)) != INDEX_MAGIC:
            raise GroupingError(f"{path}: not an embedding index file")
        try:
            version, m, f = struct.unpack("<III", buf.read(12))
            if version != INDEX_VERSION:
                raise GroupingError(f"{path}: unsupported index version {version}")
            ids = []
            for _ in range(m):
                (n,) = struct.unpack("<I", buf.read(4))
                ids.append(buf.read(n).decode("utf-8"))
            raw = buf.read(4 * m * f)
        except struct.error as exc:
            raise GroupingError(f"{path}: truncated index file") from exc
        if len(raw) != 4 * m * f:
            raise GroupingError(f"{path}: truncated index file")
        vectors = np.frombuffer(raw, dtype="<f4").reshape(m, f).astype(np.float32)
        return cls(ids, vectors, source=str(path))


def build_embedding_index(images: Mapping[str, torch.Tensor], clf: ArtistClassifier, source: str = "") -> EmbeddingIndex:
    ids = list(images.keys())
    vectors = np.stack([embed(images[i], clf) for i in ids])
    return EmbeddingIndex(ids, vectors, source)


def order_statistic_index(q: float, n: int) -> int:
    """Position of the lower empirical q-quantile in ``n`` sorted values."""
    return math.floor(Fraction(str(q)) * (n - 1))


def quantile_threshold(
    index: EmbeddingIndex,
    q: float,
    max_pairs: int = DEFAULT_PAIR_CAP,
    seed: int = 0,
) -> float:
    """Lower (non-interpolated) q-quantile of distances over distinct pairs.

    When the number of pairs exceeds ``max_pairs`` the quantile is taken
    over ``max_pairs`` pairs drawn uniformly (with replacement) using ``seed``.
    """
    if not 0 < q < 1:
        raise GroupingError(f"quantile must be in (0, 1), got {q}")
    m = len(index)
    if m < 2:
        raise GroupingError("need at least 2 embeddings")
    n_pairs = m * (m - 1) // 2
    if n_pairs <= max_pairs:
        rows, cols = np.triu_indices(m, k=1)
        dists = distance_matrix(index.vectors)[rows, cols]
    else:
        rng = np.random.default_rng(seed)
        rows = rng.integers(0, m, size=max_pairs)
        cols = rng.integers(0, m - 1, size=max_pairs)
        cols = cols + (cols >= rows)  # uniform over j != i
        dists = _pair_distances(_unit_rows(index.vectors), rows, cols)
    k = order_statistic_index(q, len(dists))
    return float(np.partition(dists, k)[k])


@dataclass
class StyleSet:
    query_id: str
    member_ids: List[str]
    threshold: float
    quantile: Optional[float] = None
    distance_metric: str = "cosine"
    artist: Optional[str] = None

    def __len__(self):
        return len(self.member_ids)


def build_style_set(
    query_id,
    index: EmbeddingIndex,
    q: float = 0.10,
    threshold: float = None,
    max_pairs: int = DEFAULT_PAIR_CAP,
    seed: int = 0,
) -> StyleSet:
    """All entries strictly closer to the query than the q-quantile threshold.

    The query is always part of its own set.
    """
    pos = index.position(query_id)
    if threshold is None:
        threshold = quantile_threshold(index, q, max_pairs=max_pairs, seed=seed)
    d = distances_to(index.vectors[pos], index.vectors)
    members = [i for k, i in enumerate(index.ids) if d[k] < threshold or k == pos]
    return StyleSet(str(query_id), members, float(threshold), quantile=q)
