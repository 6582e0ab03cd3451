"""Synthetic datasets, CSV ingestion and IID / Dirichlet partitioning."""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import numpy.typing as npt

from byzfl.exceptions import DataError, ParameterError, ParseError
from byzfl.models import Batch
from byzfl.numcore import RngStream

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class Dataset:
    features: npt.NDArray[np.float64]
    labels: npt.NDArray[np.int64]
    name: str = "dataset"

    def __post_init__(self):
        features = np.array(np.atleast_2d(self.features), dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if features.shape[0] != labels.shape[0]:
            raise DataError(f"{features.shape[0]} feature rows vs {labels.shape[0]} labels")
        if labels.size and labels.min() < 0:
            raise DataError("labels must be non-negative")
        features.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.size else 0

    def subset(self, indices: npt.ArrayLike, name: Optional[str] = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], name or self.name)

    def batch(self, indices: npt.ArrayLike) -> Batch:
        idx = np.asarray(indices, dtype=np.int64)
        return Batch(self.features[idx], self.labels[idx])

    def as_batch(self) -> Batch:
        return Batch(self.features, self.labels)


@dataclass(frozen=True)
class Partition:
    """Per-client index lists. `repairs` counts samples moved to fill empty clients."""

    assignments: Tuple[npt.NDArray[np.int64], ...]
    scheme: str
    alpha: Optional[float] = None
    repairs: int = 0

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> List[int]:
        return [len(a) for a in self.assignments]


# ---------------------------------------------------------------------------- #
# Generation / IO

def synth_gaussian_mixture(
    L: int, input_dim: int, per_class: int, sep: float, rng: RngStream
) -> Dataset:
    """L unit-variance blobs; class c is centred at sep·(1 + c // dim)·e_{c mod dim}.

    Samples are laid out class by class, N = L·per_class.
    """
    if L < 2:
        raise ParameterError(f"need at least 2 classes, got {L}")
    if per_class < 1:
        raise ParameterError(f"per_class must be >= 1, got {per_class}")
    if sep <= 0:
        raise ParameterError(f"sep must be > 0, got {sep}")
    centers = np.zeros((L, input_dim), dtype=np.float64)
    for c in range(L):
        centers[c, c % input_dim] = sep * (1 + c // input_dim)
    labels = np.repeat(np.arange(L, dtype=np.int64), per_class)
    noise = rng.generator().standard_normal((L * per_class, input_dim))
    return Dataset(centers[labels] + noise, labels, name=f"gaussian_mixture_L{L}_d{input_dim}")


def load_csv(path: PathLike) -> Dataset:
    """Rows are `f_1,...,f_d,label`, no header.

    Labels already forming 0..L−1 are kept; any other label set is remapped to
    0..L−1 in order of first appearance.
    """
    path = Path(path)
    features: List[List[float]] = []
    raw_labels: List[int] = []
    width = None
    text: List[str] = []
    for line_no, chunk in enumerate(path.read_bytes().splitlines(), start=1):
        try:
            text.append(chunk.decode("utf-8"))
        except UnicodeDecodeError:
            raise ParseError("invalid UTF-8", line=line_no)
    for line_no, row in enumerate(csv.reader(text), start=1):
        if not row or all(not cell.strip() for cell in row):
            raise ParseError("empty row", line=line_no)
        if len(row) < 2:
            raise ParseError("need at least one feature and a label", line=line_no)
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ParseError(f"expected {width} columns, got {len(row)}", line=line_no)
        try:
            features.append([float(cell) for cell in row[:-1]])
        except ValueError:
            raise ParseError("non-numeric feature", line=line_no)
        try:
            raw_labels.append(int(row[-1]))
        except ValueError:
            raise ParseError(f"label {row[-1]!r} is not an integer", line=line_no)
    if not raw_labels:
        raise ParseError(f"{path} contains no rows")

    distinct = set(raw_labels)
    if distinct == set(range(len(distinct))):
        labels = raw_labels
    else:
        mapping = {}
        for label in raw_labels:
            mapping.setdefault(label, len(mapping))
        labels = [mapping[label] for label in raw_labels]
        logger.info(f"📥 Remapped labels {sorted(distinct)} of {path.name} to 0..{len(mapping) - 1}")
    return Dataset(np.array(features), np.array(labels), name=path.stem)


def save_csv(data: Dataset, path: PathLike) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        for row, label in zip(data.features, data.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def train_test_split(data: Dataset, test_fraction: float, rng: RngStream) -> Tuple[Dataset, Dataset]:
    """Random held-out split; the test side gets round(test_fraction·N) samples (≥ 1)."""
    if not 0 < test_fraction < 1:
        raise ParameterError(f"test_fraction must be in (0, 1), got {test_fraction}")
    order = rng.generator().permutation(data.size)
    n_test = min(max(1, int(round(test_fraction * data.size))), data.size - 1)
    return data.subset(np.sort(order[n_test:]), f"{data.name}_train"), data.subset(np.sort(order[:n_test]), f"{data.name}_test")


# ---------------------------------------------------------------------------- #
# Partitioning

def partition_iid(data: Dataset, K: int, rng: RngStream) -> Partition:
    """Shuffle then split into K lists; the first N mod K lists get one extra sample."""
    if K < 1 or K > data.size:
        raise ParameterError(f"need 1 <= K <= N, got K={K}, N={data.size}")
    order = rng.generator().permutation(data.size).astype(np.int64)
    return Partition(tuple(np.array_split(order, K)), "iid")


def _largest_remainder(proportions: npt.NDArray[np.float64], total: int) -> npt.NDArray[np.int64]:
    exact = proportions * total
    counts = np.floor(exact).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort: equal remainders go to the lower client index
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition_dirichlet(data: Dataset, K: int, alpha: float, rng: RngStream) -> Partition:
    """Per class l: p_l ~ Dir_K(alpha), class samples dealt out in those proportions."""
    if alpha <= 0:
        raise ParameterError(f"alpha must be > 0, got {alpha}")
    if K < 1 or K > data.size:
        raise ParameterError(f"need 1 <= K <= N, got K={K}, N={data.size}")
    gen = rng.generator()
    shards: List[List[int]] = [[] for _ in range(K)]
    for label in np.unique(data.labels):
        members = np.flatnonzero(data.labels == label)
        gen.shuffle(members)
        p = gen.dirichlet(np.full(K, alpha))
        if not np.all(np.isfinite(p)) or p.sum() <= 0:
            # tiny alpha can underflow every gamma draw
            p = np.zeros(K)
            p[int(gen.integers(K))] = 1.0
        counts = _largest_remainder(p / p.sum(), members.size)
        start = 0
        for k, count in enumerate(counts):
            shards[k].extend(members[start:start + count].tolist())
            start += count

    repairs = 0
    while True:
        empty = [k for k, shard in enumerate(shards) if not shard]
        if not empty:
            break
        donor = max(range(K), key=lambda k: (len(shards[k]), -k))
        shards[empty[0]].append(shards[donor].pop())
        repairs += 1
    if repairs:
        logger.info(f"⚠️ Dirichlet partition (alpha={alpha}) repaired {repairs} empty client(s)")
    return Partition(tuple(np.array(s, dtype=np.int64) for s in shards), "dirichlet", alpha, repairs)
