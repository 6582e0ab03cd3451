"""Robust aggregation rules, Bucketing, and the client-side update transforms.

Every rule is a pure function of (UpdateSet, parameters, rng); cross-round
state such as the CC memory is owned by the server and passed in explicitly.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
import numpy.typing as npt
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import cdist, squareform
from sklearn.cluster import KMeans

from byzfl.exceptions import ConfigurationError, ParameterError
from byzfl.numcore import ParamVector, RngStream, UpdateSet, as_vector, mean_rows, scale, top_right_singular_vector
from byzfl.schemas import AggregatorConfig, TransformConfig

logger = logging.getLogger(__name__)

# name → (description, characteristic)
AGGREGATOR_DESCRIPTIONS: Dict[str, Tuple[str, str]] = {
    "mean": ("Coordinate-wise arithmetic mean", "none"),
    "median": ("Coordinate-wise median", "dimension-wise"),
    "trimmed_mean": ("Drop b smallest and b largest per coordinate, average the rest", "dimension-wise"),
    "geomed": ("Geometric median via smoothed Weiszfeld iterations", "Euclidean"),
    "krum": ("Row with the smallest sum of squared distances to its n−f−2 neighbours", "Euclidean"),
    "cc": ("Centered clipping around the previous aggregate", "Euclidean"),
    "dnc": ("Divide-and-conquer spectral outlier filtering", "Euclidean"),
    "clipped_clustering": ("Median-norm clipping, then 2-way average-linkage clustering on cosine", "cosine"),
    "signguard": ("Norm filter and sign-statistics clustering", "dimension-wise"),
}


@dataclass(frozen=True)
class AggregationContext:
    rng: RngStream
    assumed_f: int = 0
    v0: Optional[ParamVector] = None  # previous aggregate (CC)
    clip_radius: Optional[float] = None  # ClippedClustering historical τ
    power_iters: int = 100


def _zero_safe_factors(norms: npt.NDArray[np.float64], tau: float) -> npt.NDArray[np.float64]:
    factors = np.ones_like(norms)
    big = norms > tau
    factors[big] = tau / norms[big]
    return factors


def clip_rows(rows: npt.NDArray[np.float64], tau: float) -> npt.NDArray[np.float64]:
    norms = np.linalg.norm(rows, axis=1)
    return rows * _zero_safe_factors(norms, tau)[:, None]


# ---------------------------------------------------------------------------- #
# Classical rules

def agg_mean(u: UpdateSet) -> ParamVector:
    return mean_rows(u.rows)


def agg_median(u: UpdateSet) -> ParamVector:
    return np.median(u.rows, axis=0)


def agg_trimmed_mean(u: UpdateSet, b: int) -> ParamVector:
    if b < 0 or 2 * b >= u.n:
        raise ConfigurationError(f"trimmed_mean needs 0 <= 2b < n, got b={b}, n={u.n}", "aggregator.b")
    ordered = np.sort(u.rows, axis=0)
    return mean_rows(ordered[b:u.n - b])


class WeiszfeldResult(NamedTuple):
    point: ParamVector
    objectives: Tuple[float, ...]
    iterations: int


def geomed_objective(points: npt.NDArray[np.float64], v: ParamVector) -> float:
    return float(np.linalg.norm(points - v, axis=1).sum())


def weiszfeld(points: npt.NDArray[np.float64], max_iters: int = 100, eps: float = 1e-6) -> WeiszfeldResult:
    v = points.mean(axis=0)
    objectives = [geomed_objective(points, v)]
    iterations = 0
    for iterations in range(1, max_iters + 1):
        weights = 1.0 / np.maximum(eps, np.linalg.norm(points - v, axis=1))
        new_v = weights @ points / weights.sum()
        step = np.linalg.norm(new_v - v)
        v = new_v
        objectives.append(geomed_objective(points, v))
        if step <= eps:
            break
    return WeiszfeldResult(v, tuple(objectives), iterations)


def agg_geomed(u: UpdateSet, max_iters: int = 100, eps: float = 1e-6) -> ParamVector:
    return weiszfeld(u.rows, max_iters, eps).point


def krum_scores(rows: npt.NDArray[np.float64], f: int) -> npt.NDArray[np.float64]:
    n = rows.shape[0]
    neighbours = n - f - 2
    if neighbours < 1:
        neighbours = min(max(n - 2, 1), n - 1)
        logger.warning(f"⚠️ krum: n={n} < f+3 with f={f}, using {neighbours} neighbour(s)")
    distances = cdist(rows, rows, "sqeuclidean")
    scores = np.empty(n)
    for i in range(n):
        others = np.delete(distances[i], i)
        scores[i] = np.sort(others)[:neighbours].sum()
    return scores


def agg_krum(u: UpdateSet, f: int) -> ParamVector:
    if u.n < 2:
        raise ConfigurationError(f"krum needs at least 2 updates, got {u.n}", "aggregator")
    if u.n < 2 * f + 3:
        logger.warning(f"⚠️ krum: n={u.n} below the recommended 2f+3={2 * f + 3}")
    # rows are in client-id order, so argmin breaks ties by lowest id
    return u.rows[int(np.argmin(krum_scores(u.rows, f)))].copy()


# ---------------------------------------------------------------------------- #
# Hybrid rules

def agg_cc(u: UpdateSet, tau: float, iters: int, v0: Optional[ParamVector] = None) -> ParamVector:
    if tau <= 0 or iters < 1:
        raise ParameterError(f"cc needs tau > 0 and iters >= 1, got tau={tau}, iters={iters}")
    v = np.zeros(u.d) if v0 is None else as_vector(v0).copy()
    for _ in range(iters):
        diff = u.rows - v
        v = v + mean_rows(clip_rows(diff, tau))
    return v


def agg_dnc(
    u: UpdateSet,
    niters: int,
    sub_dim: int,
    c: float,
    f: int,
    rng: RngStream,
    power_iters: int = 100,
) -> ParamVector:
    n, d = u.n, u.d
    removed = math.floor(c * f)
    if n < 2:
        raise ConfigurationError(f"dnc needs at least 2 updates, got {n}", "aggregator")
    if removed >= n:
        raise ConfigurationError(f"dnc would remove floor(c·f)={removed} of {n} updates", "aggregator.c")
    if n < 2 * f + 3:
        logger.warning(f"⚠️ dnc: n={n} below the recommended 2f+3={2 * f + 3}")
    sub_dim = min(max(sub_dim, 1), d)

    good = None
    last = None
    for i in range(niters):
        stream = rng.derive("dnc", i)
        coords = np.sort(stream.derive("coords").generator().choice(d, sub_dim, replace=False))
        sub = u.rows[:, coords]
        centered = sub - sub.mean(axis=0)
        v = top_right_singular_vector(centered, power_iters, stream.derive("power")).vector
        scores = (centered @ v) ** 2
        last = set(np.argsort(scores, kind="stable")[: n - removed].tolist())
        good = last if good is None else good & last
    selected = sorted(good) if good else sorted(last)
    return mean_rows(u.rows[selected])


def _cosine_distances(rows: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    norms = np.linalg.norm(rows, axis=1)
    unit = np.zeros_like(rows)
    nonzero = norms > 0
    unit[nonzero] = rows[nonzero] / norms[nonzero, None]
    dist = np.clip(1.0 - unit @ unit.T, 0.0, 2.0)
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)
    return dist


def _larger_group(labels: npt.NDArray[np.int64]) -> npt.NDArray[np.bool_]:
    """Mask of the biggest cluster; ties go to the cluster holding the lowest row."""
    best = None
    for label in np.unique(labels):
        members = labels == label
        key = (int(members.sum()), -int(np.argmax(members)))
        if best is None or key > best[0]:
            best = (key, members)
    return best[1]


def agg_clipped_clustering(u: UpdateSet, tau: Optional[float] = None) -> ParamVector:
    """τ defaults to the median norm of this round's updates."""
    if u.n < 2:
        raise ConfigurationError(f"clipped_clustering needs at least 2 updates, got {u.n}", "aggregator")
    if tau is None:
        tau = float(np.median(np.linalg.norm(u.rows, axis=1)))
    clipped = u.with_rows(clip_rows(u.rows, tau))
    dist = _cosine_distances(clipped.rows)
    if not np.any(dist):
        return agg_mean(clipped)
    tree = linkage(squareform(dist, checks=False), method="average")
    labels = fcluster(tree, t=2, criterion="maxclust")
    return mean_rows(clipped.rows[_larger_group(labels)])


def _sign_features(rows: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    signs = np.sign(rows)
    return np.column_stack([(signs > 0).mean(axis=1), (signs == 0).mean(axis=1), (signs < 0).mean(axis=1)])


def _two_means(features: npt.NDArray[np.float64]) -> npt.NDArray[np.bool_]:
    distances = cdist(features, features)
    if not np.any(distances):
        return np.ones(features.shape[0], dtype=bool)
    i, j = np.unravel_index(int(np.argmax(distances)), distances.shape)
    km = KMeans(n_clusters=2, init=features[[i, j]], n_init=1, random_state=0).fit(features)
    return _larger_group(km.labels_)


def agg_signguard(
    u: UpdateSet, lower: float, upper: float, coord_frac: float, rng: RngStream
) -> ParamVector:
    if not 0 < lower < upper:
        raise ParameterError(f"signguard needs 0 < lower < upper, got {lower}, {upper}")
    if not 0 < coord_frac <= 1:
        raise ParameterError(f"signguard needs 0 < coord_frac <= 1, got {coord_frac}")
    norms = np.linalg.norm(u.rows, axis=1)
    median_norm = float(np.median(norms))
    norm_ok = (norms >= lower * median_norm) & (norms <= upper * median_norm)

    k = math.ceil(coord_frac * u.d)
    coords = rng.generator().choice(u.d, k, replace=False)
    sign_ok = _two_means(_sign_features(u.rows[:, coords]))

    selected = norm_ok & sign_ok
    if not selected.any():
        logger.warning("⚠️ signguard: no update passed both filters, falling back to median")
        return agg_median(u)
    return mean_rows(clip_rows(u.rows[selected], median_norm))


def bucketing_wrap(
    u: UpdateSet,
    s: int,
    base: AggregatorConfig,
    rng: RngStream,
    ctx: Optional[AggregationContext] = None,
) -> ParamVector:
    if s < 1:
        raise ParameterError(f"bucket size must be >= 1, got {s}")
    order = rng.generator().permutation(u.n)
    buckets = [order[i:i + s] for i in range(0, u.n, s)]
    if len(buckets) == 1:
        return mean_rows(u.rows)
    means = np.stack([mean_rows(u.rows[b]) for b in buckets])
    flags = [bool(u.byzantine_mask[b].any()) for b in buckets]
    ctx = ctx or AggregationContext(rng=rng)
    limit = (len(buckets) - 1) // 2
    if ctx.assumed_f > limit:
        logger.warning(f"⚠️ bucketing: {len(buckets)} buckets, assumed f {ctx.assumed_f}→{limit}")
        ctx = replace(ctx, assumed_f=limit)
    return aggregate(UpdateSet.from_rows(means, flags), base.model_copy(update={"bucketing": None}), ctx)


def aggregate(u: UpdateSet, cfg: AggregatorConfig, ctx: AggregationContext) -> ParamVector:
    if cfg.bucketing:
        return bucketing_wrap(u, cfg.bucketing, cfg, ctx.rng.derive("bucketing"), ctx)
    f = cfg.f if cfg.f is not None else ctx.assumed_f
    kind = cfg.kind
    if kind == "mean":
        return agg_mean(u)
    if kind == "median":
        return agg_median(u)
    if kind == "trimmed_mean":
        return agg_trimmed_mean(u, cfg.b if cfg.b is not None else ctx.assumed_f)
    if kind == "geomed":
        return agg_geomed(u, cfg.max_iters, cfg.eps)
    if kind == "krum":
        return agg_krum(u, f)
    if kind == "cc":
        return agg_cc(u, cfg.tau, cfg.iters, ctx.v0)
    if kind == "dnc":
        return agg_dnc(u, cfg.niters, cfg.sub_dim, cfg.c, f, ctx.rng.derive("dnc"), ctx.power_iters)
    if kind == "clipped_clustering":
        return agg_clipped_clustering(u, ctx.clip_radius if cfg.historical else None)
    if kind == "signguard":
        return agg_signguard(u, cfg.lower, cfg.upper, cfg.coord_frac, ctx.rng.derive("signguard"))
    raise ConfigurationError(f"unknown aggregator {kind!r}", "aggregator.type")


def check_aggregator(cfg: AggregatorConfig, n: int, assumed_f: int) -> None:
    """Reject trim and filter sizes that cannot hold for n updates, counted after bucketing."""
    rows = n
    if cfg.bucketing:
        rows = math.ceil(n / cfg.bucketing)
        if rows == 1:
            return
        assumed_f = min(assumed_f, (rows - 1) // 2)
    if cfg.kind == "trimmed_mean":
        b = cfg.b if cfg.b is not None else assumed_f
        if 2 * b >= rows:
            raise ConfigurationError(
                f"trimmed_mean needs 2b < {rows} aggregated rows, got b={b}", "server_config.aggregator.b"
            )
    elif cfg.kind in ("dnc", "krum") and rows < 2:
        raise ConfigurationError(f"{cfg.kind} needs at least 2 aggregated rows, got {rows}", "server_config.aggregator")
    elif cfg.kind == "dnc":
        f = cfg.f if cfg.f is not None else assumed_f
        if math.floor(cfg.c * f) >= rows:
            raise ConfigurationError(
                f"dnc would remove floor(c·f)={math.floor(cfg.c * f)} of {rows} rows", "server_config.aggregator.c"
            )


# ---------------------------------------------------------------------------- #
# Update transforms

def clip_update(delta: ParamVector, tau: float) -> ParamVector:
    """Δ·min(1, τ/‖Δ‖); the zero vector comes back unchanged."""
    if tau <= 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    delta = as_vector(delta)
    length = np.linalg.norm(delta)
    if length <= tau:
        return delta.copy()
    return scale(tau / length, delta)


def dp_sigma(epsilon: float, delta: float, g_max: float, batch_b: int) -> float:
    """s = 2·G_max·√(2·ln(1.25/δ)) / (b·ε)."""
    if epsilon <= 0:
        raise ConfigurationError(f"epsilon must be > 0, got {epsilon}", "transforms.dp.epsilon")
    if not 0 < delta < 1:
        raise ConfigurationError(f"delta must be in (0, 1), got {delta}", "transforms.dp.delta")
    return 2.0 * g_max * math.sqrt(2.0 * math.log(1.25 / delta)) / (batch_b * epsilon)


def dp_noise(delta: ParamVector, cfg: TransformConfig, rng: RngStream) -> ParamVector:
    if cfg.dp is None:
        raise ConfigurationError("dp_noise called without a dp configuration", "transforms.dp")
    dp = cfg.dp
    s = dp_sigma(dp.epsilon, dp.delta, dp.g_max, dp.batch_b)
    delta = as_vector(delta)
    return delta + s * rng.generator().standard_normal(delta.shape[0])


def apply_transforms(delta: ParamVector, cfg: TransformConfig, rng: RngStream) -> ParamVector:
    """Clip, then add DP noise, as a client does before upload."""
    if cfg.clip_tau is not None:
        delta = clip_update(delta, cfg.clip_tau)
    if cfg.dp is not None:
        delta = dp_noise(delta, cfg, rng)
    return delta


def registry() -> List[Tuple[str, str, str]]:
    return [(name, desc, kind) for name, (desc, kind) in AGGREGATOR_DESCRIPTIONS.items()]
