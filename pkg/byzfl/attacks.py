"""Attacks, wired through client callbacks and adversary callbacks.

Client callbacks run inside the (parallel) local training of a malicious client:
`on_batch_begin` may rewrite the batch, `on_backward_end` may rewrite the
gradient. Adversary callbacks run once per round on the driver:
`on_algorithm_begin` installs client callbacks, `on_local_round_end` crafts the
malicious rows from a read-only view of the benign updates.
"""
import logging
import math
from typing import Dict, List, Protocol, Sequence, Tuple

import numpy as np
import numpy.typing as npt
from scipy.spatial.distance import pdist
from scipy.stats import norm

from byzfl.exceptions import ConfigurationError, DataError, ParameterError
from byzfl.numcore import ParamVector, RngStream, gaussian
from byzfl.schemas import ATTACK_LEVELS, AttackConfig

logger = logging.getLogger(__name__)

ATTACK_DESCRIPTIONS: Dict[str, str] = {
    "label_flip": "Labels l → L−l−1 on every malicious batch",
    "sign_flip": "Negates every local gradient of a malicious client",
    "noise": "Uploads N(0, σ²I) instead of (or on top of) the honest update",
    "alie": "μ + sign·z·σ from coordinate-wise benign statistics",
    "ipm": "−ε · benign mean (inner product manipulation)",
    "minmax": "μ + γ·p with γ bounded by the largest benign pairwise distance",
}


# ---------------------------------------------------------------------------- #
# Client-level attacks

def flip_label(l: int, L: int) -> int:
    if not 0 <= l < L:
        raise DataError(f"label {l} outside [0, {L})")
    return L - l - 1


def sign_flip(grad: ParamVector) -> ParamVector:
    return -np.asarray(grad, dtype=np.float64)


class ClientCallback:
    """Hooks invoked inside `client_local_round`; the defaults pass data through."""

    def on_batch_begin(self, features, labels):
        return features, labels

    def on_backward_end(self, grad: ParamVector) -> ParamVector:
        return grad


class LabelFlipCallback(ClientCallback):
    def __init__(self, num_classes: int):
        self.num_classes = num_classes

    def on_batch_begin(self, features, labels):
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")
        return features, self.num_classes - labels - 1


class SignFlipCallback(ClientCallback):
    def on_backward_end(self, grad: ParamVector) -> ParamVector:
        return sign_flip(grad)


# ---------------------------------------------------------------------------- #
# Adversary view

class AdversaryView:
    """What an omniscient adversary sees at the end of a local round.

    `benign_updates` is a read-only copy; `malicious_slots` starts as the
    malicious clients' own updates and is what the protocol uploads afterwards.
    """

    def __init__(
        self,
        benign_updates: npt.ArrayLike,
        malicious_slots: npt.ArrayLike,
        round: int,
        num_clients: int,
        rng: RngStream,
        malicious_ids: Sequence[int] = (),
    ):
        benign = np.array(benign_updates, dtype=np.float64)
        benign.flags.writeable = False
        self._benign = benign
        self._slots = np.array(malicious_slots, dtype=np.float64)
        self.round = round
        self.num_clients = num_clients
        self.rng = rng
        self.malicious_ids = tuple(malicious_ids) or tuple(range(self._slots.shape[0]))

    @property
    def benign_updates(self) -> npt.NDArray[np.float64]:
        return self._benign

    @property
    def malicious_slots(self) -> npt.NDArray[np.float64]:
        return self._slots

    @property
    def num_malicious(self) -> int:
        return self._slots.shape[0]

    @property
    def num_benign(self) -> int:
        return self._benign.shape[0]

    def fill(self, row: ParamVector) -> None:
        """Give every malicious client the same update."""
        self._slots[:] = row


# ---------------------------------------------------------------------------- #
# Omniscient attacks

def noise_update(d: int, sigma: float, rng: RngStream) -> ParamVector:
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    return gaussian(rng, 0.0, sigma, d)


def alie_z(n: int, m: int) -> float:
    """z = Φ⁻¹((n−s)/n) with s = ⌊n/2 + 1⌋ − m."""
    s = math.floor(n / 2 + 1) - m
    q = (n - s) / n
    if not 0 < q < 1:
        raise ConfigurationError(f"auto z undefined for n={n}, m={m} (quantile {q})", "adversary_config.z_mode")
    return float(norm.ppf(q))


def alie_updates(view: AdversaryView, cfg: AttackConfig) -> None:
    if view.num_benign < 2:
        raise ConfigurationError("ALIE needs at least 2 benign clients", "adversary_config")
    if view.num_malicious == 0:
        return
    mu = view.benign_updates.mean(axis=0)
    sigma = view.benign_updates.std(axis=0, ddof=1)
    z = cfg.z_max if cfg.z_mode == "fixed" else alie_z(view.num_clients, view.num_malicious)
    view.fill(mu + cfg.direction_sign * z * sigma)


def ipm_updates(view: AdversaryView, cfg: AttackConfig) -> None:
    if view.num_malicious == 0:
        return
    if view.num_benign < 1:
        raise ConfigurationError("IPM needs at least 1 benign client", "adversary_config")
    benign_sum = view.benign_updates.sum(axis=0)
    view.fill(-(cfg.epsilon / view.num_benign) * benign_sum)


def minmax_direction(benign: npt.NDArray[np.float64], perturbation: str) -> ParamVector:
    mu = benign.mean(axis=0)
    if perturbation == "neg_sign":
        return -np.sign(mu)
    base = benign.std(axis=0, ddof=1) if perturbation == "neg_std" else mu
    length = np.linalg.norm(base)
    if length == 0:
        return np.zeros_like(mu)
    return -base / length


def minmax_gamma(
    benign: npt.NDArray[np.float64],
    mu: ParamVector,
    p: ParamVector,
    gamma_init: float,
    gamma_tol: float,
) -> float:
    """Largest γ ≥ 0 (to gamma_tol) with max_j ‖μ + γp − Δ_j‖ ≤ max_{j,k} ‖Δ_j − Δ_k‖."""
    threshold = float(pdist(benign).max()) if benign.shape[0] > 1 else 0.0
    if threshold == 0.0 or not np.any(p):
        return 0.0

    def feasible(gamma: float) -> bool:
        return float(np.linalg.norm(benign - (mu + gamma * p), axis=1).max()) <= threshold

    lo, hi = 0.0, gamma_init
    if feasible(hi):
        lo = hi
        for _ in range(64):
            hi *= 2.0
            if not feasible(hi):
                break
            lo = hi
        else:
            return lo
    # the feasible γ form an interval [0, γ*]: the distance bound is convex in γ
    while hi - lo > gamma_tol:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def minmax_updates(view: AdversaryView, cfg: AttackConfig) -> None:
    if view.num_benign < 2:
        raise ConfigurationError("MinMax needs at least 2 benign clients", "adversary_config")
    if view.num_malicious == 0:
        return
    benign = view.benign_updates
    mu = benign.mean(axis=0)
    p = minmax_direction(benign, cfg.perturbation)
    gamma = minmax_gamma(benign, mu, p, cfg.gamma_init, cfg.gamma_tol)
    view.fill(mu + gamma * p)


# ---------------------------------------------------------------------------- #
# Adversaries

class HasCallbacks(Protocol):
    id: int
    callbacks: List[ClientCallback]


class AdversaryCallback:
    """Driver-side hooks shared by all malicious clients of a trial."""

    def __init__(self, cfg: AttackConfig):
        self.cfg = cfg

    @property
    def level(self) -> int:
        return self.cfg.taxonomy_level

    def on_algorithm_begin(self, malicious_clients: Sequence[HasCallbacks]) -> None:
        pass

    def on_local_round_end(self, view: AdversaryView) -> None:
        pass


class LabelFlipAdversary(AdversaryCallback):
    def __init__(self, cfg: AttackConfig, num_classes: int):
        super().__init__(cfg)
        self.num_classes = num_classes

    def on_algorithm_begin(self, malicious_clients):
        for client in malicious_clients:
            client.callbacks.append(LabelFlipCallback(self.num_classes))


class SignFlipAdversary(AdversaryCallback):
    def on_algorithm_begin(self, malicious_clients):
        for client in malicious_clients:
            client.callbacks.append(SignFlipCallback())


class NoiseAdversary(AdversaryCallback):
    def on_local_round_end(self, view):
        d = view.malicious_slots.shape[1]
        for i, client_id in enumerate(view.malicious_ids):
            noise = noise_update(d, self.cfg.sigma, view.rng.derive("noise", client_id))
            if self.cfg.noise_mode == "add":
                view.malicious_slots[i] += noise
            else:
                view.malicious_slots[i] = noise


class ALIEAdversary(AdversaryCallback):
    def on_local_round_end(self, view):
        alie_updates(view, self.cfg)


class IPMAdversary(AdversaryCallback):
    def on_local_round_end(self, view):
        ipm_updates(view, self.cfg)


class MinMaxAdversary(AdversaryCallback):
    def on_local_round_end(self, view):
        minmax_updates(view, self.cfg)


def build_adversary(cfg: AttackConfig, num_classes: int) -> AdversaryCallback:
    if cfg.kind == "label_flip":
        return LabelFlipAdversary(cfg, num_classes)
    adversaries = {
        "sign_flip": SignFlipAdversary,
        "noise": NoiseAdversary,
        "alie": ALIEAdversary,
        "ipm": IPMAdversary,
        "minmax": MinMaxAdversary,
    }
    return adversaries[cfg.kind](cfg)


def registry() -> List[Tuple[str, str, int]]:
    return [(name, ATTACK_DESCRIPTIONS[name], ATTACK_LEVELS[name]) for name in ATTACK_DESCRIPTIONS]
