"""Vector primitives, keyed RNG streams and power iteration shared by every module.

A ParamVector is a 1-D float64 numpy array; an UpdateSet stacks n of them with
per-row byzantine flags in ascending client-id order.
"""
import hashlib
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from byzfl.exceptions import DimensionError, ParameterError

ParamVector = npt.NDArray[np.float64]
Label = Union[str, int]

_SEED_MASK = (1 << 64) - 1


def as_vector(x: Sequence[float]) -> ParamVector:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def _check_same_length(x: ParamVector, y: ParamVector) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")


def axpy(a: float, x: Sequence[float], y: Sequence[float]) -> ParamVector:
    """Return a·x + y."""
    x, y = as_vector(x), as_vector(y)
    _check_same_length(x, y)
    return a * x + y


def scale(a: float, x: Sequence[float]) -> ParamVector:
    return a * as_vector(x)


def l2_norm(x: Sequence[float]) -> float:
    return float(np.linalg.norm(as_vector(x)))


def mean_rows(m: npt.NDArray[np.float64]) -> ParamVector:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0:
        raise DimensionError(f"expected a non-empty matrix, got shape {m.shape}")
    return m.mean(axis=0)


# ---------------------------------------------------------------------------- #
# RNG streams

def _label_word(label: Label) -> int:
    # Stable across processes, unlike the builtin hash().
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class RngStream:
    """A named random stream: root seed plus a path of labels.

    Two streams with the same root and path draw identical values; the path is
    hashed into the SeedSequence spawn key, so execution order never matters.
    Drawing always starts from a fresh Philox generator.
    """

    root_seed: int
    path: Tuple[str, ...] = field(default_factory=tuple)

    @property
    def key(self) -> Tuple[int, ...]:
        return tuple(_label_word(label) for label in self.path)

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=self.root_seed & _SEED_MASK, spawn_key=self.key)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(self.seed_sequence()))

    def derive(self, *labels: Label) -> "RngStream":
        stream = self
        for label in labels:
            stream = derive_stream(stream, label)
        return stream


def derive_stream(parent: RngStream, label: Label) -> RngStream:
    return RngStream(parent.root_seed, parent.path + (str(label),))


def gaussian(rng: RngStream, mean: float, std: float, d: int) -> ParamVector:
    """d independent N(mean, std²) draws from a fresh copy of `rng`."""
    if std < 0:
        raise ParameterError(f"std must be >= 0, got {std}")
    if std == 0:
        return np.full(d, float(mean), dtype=np.float64)
    return mean + std * rng.generator().standard_normal(d)


# ---------------------------------------------------------------------------- #
# Power iteration

class SingularVector(NamedTuple):
    vector: ParamVector
    degenerate: bool
    rayleigh: Tuple[float, ...]  # vᵀ(mᵀm)v after each iteration


def _unit(d: int) -> ParamVector:
    e1 = np.zeros(d, dtype=np.float64)
    e1[0] = 1.0
    return e1


def top_right_singular_vector(
    m: npt.NDArray[np.float64], iters: int, rng: RngStream
) -> SingularVector:
    """Power iteration on mᵀm; the largest-magnitude component is made non-negative."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ParameterError(f"expected an n×d matrix with n, d >= 1, got shape {m.shape}")
    if iters < 1:
        raise ParameterError(f"iters must be >= 1, got {iters}")

    d = m.shape[1]
    if not np.any(m):
        return SingularVector(_unit(d), True, ())

    v = rng.generator().standard_normal(d)
    v /= np.linalg.norm(v)
    rayleigh = []
    for _ in range(iters):
        w = m.T @ (m @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return SingularVector(_unit(d), True, tuple(rayleigh))
        v = w / norm
        mv = m @ v
        rayleigh.append(float(mv @ mv))

    top = int(np.argmax(np.abs(v)))
    if v[top] < 0:
        v = -v
    return SingularVector(v, False, tuple(rayleigh))


# ---------------------------------------------------------------------------- #
# Update sets

@dataclass(frozen=True)
class UpdateSet:
    """n client updates of dimension d, rows in ascending client-id order."""

    rows: npt.NDArray[np.float64]
    byzantine_mask: npt.NDArray[np.bool_]
    client_ids: Tuple[int, ...]

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise DimensionError(f"update set needs an n×d matrix with n >= 1, got shape {rows.shape}")
        mask = np.array(self.byzantine_mask, dtype=bool)
        ids = tuple(int(i) for i in self.client_ids)
        if mask.shape != (rows.shape[0],) or len(ids) != rows.shape[0]:
            raise DimensionError("byzantine_mask and client_ids must have one entry per row")
        if any(a >= b for a, b in zip(ids, ids[1:])):
            raise ParameterError("client_ids must be distinct and ascending")
        rows.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "byzantine_mask", mask)
        object.__setattr__(self, "client_ids", ids)

    @classmethod
    def from_rows(
        cls,
        rows: npt.ArrayLike,
        byzantine_mask: Optional[Sequence[bool]] = None,
        client_ids: Optional[Sequence[int]] = None,
    ) -> "UpdateSet":
        rows = np.asarray(rows, dtype=np.float64)
        n = rows.shape[0]
        if byzantine_mask is None:
            byzantine_mask = np.zeros(n, dtype=bool)
        if client_ids is None:
            client_ids = range(n)
        return cls(rows, np.asarray(byzantine_mask, dtype=bool), tuple(client_ids))

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    @property
    def num_byzantine(self) -> int:
        return int(self.byzantine_mask.sum())

    def benign_rows(self) -> npt.NDArray[np.float64]:
        return self.rows[~self.byzantine_mask]

    def byzantine_rows(self) -> npt.NDArray[np.float64]:
        return self.rows[self.byzantine_mask]

    def finite_mask(self) -> npt.NDArray[np.bool_]:
        return np.isfinite(self.rows).all(axis=1)

    def with_rows(self, rows: npt.ArrayLike) -> "UpdateSet":
        return UpdateSet(np.asarray(rows, dtype=np.float64), self.byzantine_mask, self.client_ids)
