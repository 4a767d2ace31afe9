"""SecDT: label-space dimension transformation, gradient normalisation, label noise.

All three mechanisms run on the label party. Original labels in ``[0, k)``
are replaced by codes in ``[0, K)`` drawn from disjoint per-class pools;
the cut-layer gradients of every batch are rescaled to a common norm before
they leave the guest; and each K-wide one-hot target is softened with
softmax-normalised Gaussian noise (SGN).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .models import _raw_cross_entropy, cross_entropy_soft
from .numerics import RngStream, softmax

log = logging.getLogger(__name__)

NORM_STANDARDS = ("min", "mean", "max", "off")
RESAMPLE_POLICIES = ("per-epoch", "once")
_STANDARD_REDUCERS = {"min": np.min, "mean": np.mean, "max": np.max}


@dataclass
class MappingPools:
    """Disjoint code pools, one per original class.

    ``pools[y]`` lists the codes reserved for class ``y`` in shuffled order.
    ``weights[y]`` is the 0/1 indicator of that pool over all K codes.
    ``per_sample_codes`` is filled once by :func:`transform_labels` and is
    read-only afterwards.
    """

    k: int
    K: int
    pools: tuple
    seed: int = None
    per_sample_codes: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.pools = tuple(np.asarray(p, dtype=np.int64) for p in self.pools)
        if len(self.pools) != self.k:
            raise ValueError(f"need {self.k} pools, got {len(self.pools)}")
        flat = np.concatenate(self.pools)
        if flat.size != self.K or not np.array_equal(np.sort(flat), np.arange(self.K)):
            raise ValueError("pools must partition 0..K-1")
        self.code_to_class = np.empty(self.K, dtype=np.int64)
        for y, pool in enumerate(self.pools):
            self.code_to_class[pool] = y
        self.weights = np.zeros((self.k, self.K))
        self.weights[self.code_to_class, np.arange(self.K)] = 1.0
        for arr in (self.code_to_class, self.weights):
            arr.flags.writeable = False

    @property
    def sigma(self):
        return self.K // self.k

    def to_text(self) -> str:
        """Sidecar form: a seed line, then ``class: code code ...`` per pool."""
        lines = [f"seed = {self.seed}", f"k = {self.k}", f"K = {self.K}"]
        lines += [f"{y}: " + " ".join(str(int(c)) for c in pool) for y, pool in enumerate(self.pools)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MappingPools":
        header, pools = {}, {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if "=" in line:
                key, value = (s.strip() for s in line.split("=", 1))
                header[key] = None if value == "None" else int(value)
            else:
                y, codes = line.split(":", 1)
                pools[int(y)] = [int(c) for c in codes.split()]
        k = header["k"]
        return cls(k, header["K"], tuple(pools[y] for y in range(k)), header.get("seed"))


def build_mapping_pools(k: int, K: int, rng: RngStream) -> MappingPools:
    if k < 1:
        raise ValueError("k must be >= 1")
    if K < k or K % k:
        raise ValueError(f"K={K} must be a multiple of k={k} and at least k")
    shuffled = rng.permutation(K)
    sigma = K // k
    return MappingPools(k, K, tuple(shuffled[y * sigma:(y + 1) * sigma] for y in range(k)), rng.seed)


def transform_labels(labels, pools: MappingPools, rng: RngStream):
    """K-wide one-hot targets, one pool code per sample.

    The first call draws each sample's code uniformly from its class pool and
    stores it on ``pools``; later calls with the same labels reuse it.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= pools.k):
        raise ValueError(f"labels must lie in [0, {pools.k})")
    if pools.per_sample_codes is None:
        slot = rng.integers(0, pools.sigma, size=labels.size)
        table = np.stack(pools.pools)  # (k, sigma)
        codes = table[labels, slot]
        codes.flags.writeable = False
        pools.per_sample_codes = codes
    else:
        codes = pools.per_sample_codes
        if codes.size != labels.size or not np.array_equal(pools.code_to_class[codes], labels):
            raise ValueError("pools already carry codes for a different label vector")
    return np.eye(pools.K)[codes]


def maximum_mapping(p_K, pools: MappingPools):
    """Class whose pool holds the arg-max code (lowest code wins ties)."""
    p = np.asarray(p_K, dtype=np.float64)
    return pools.code_to_class[np.argmax(p, axis=-1)]


def weighted_mapping(p_K, pools: MappingPools):
    """Class whose pool carries the most probability mass (lowest class wins ties)."""
    p = np.asarray(p_K, dtype=np.float64)
    return np.argmax(p @ pools.weights.T, axis=-1)


def normalize_gradients(grads, standard="mean"):
    """Rescale every nonzero row to the batch's min/mean/max row norm.

    All-zero rows are left alone and do not enter the standard norm.
    """
    if standard not in NORM_STANDARDS:
        raise ValueError(f"unknown norm standard {standard!r}")
    grads = np.asarray(grads, dtype=np.float64)
    if grads.ndim != 2 or grads.shape[0] < 1:
        raise ValueError("expected a non-empty (batch, width) matrix")
    if standard == "off":
        return grads
    norms = np.sqrt(np.einsum("ij,ij->i", grads, grads))
    reduce = _STANDARD_REDUCERS[standard]
    if norms.min() > 0.0:
        # common case: no zero rows
        return grads * (reduce(norms) / norms)[:, None]
    nz = norms > 0.0
    if not nz.any():
        log.debug("all gradient rows are zero; normalisation skipped")
        return grads
    scale = np.ones_like(norms)
    scale[nz] = reduce(norms[nz]) / norms[nz]
    return grads * scale[:, None]


def sgn_noise(target, mu, rng: RngStream, renormalize=True):
    """Add ``mu * softmax(gamma)``, gamma ~ N(0, I), to a one-hot target."""
    target = np.asarray(target, dtype=np.float64)
    return sgn_noise_batch(target[None, :], mu, rng, renormalize)[0]


def sgn_noise_batch(targets, mu, rng: RngStream, renormalize=True):
    """Row-wise :func:`sgn_noise` over an (n, K) target matrix."""
    if not 0.0 <= mu < 1.0:
        raise ValueError("noise level mu must lie in [0, 1)")
    targets = np.asarray(targets, dtype=np.float64)
    if mu == 0.0:
        return targets.copy()
    noisy = targets + mu * softmax(rng.gaussian(targets.shape), axis=1)
    if renormalize:
        noisy /= noisy.sum(axis=1, keepdims=True)
    return noisy


@dataclass
class DefenseConfig:
    """SecDT settings. ``K=None`` keeps the original label space."""

    K: int = None
    norm_standard: str = "mean"
    mu: float = 0.0
    noise_resample: str = "per-epoch"
    renormalize: bool = True

    def __post_init__(self):
        if self.norm_standard not in NORM_STANDARDS:
            raise ValueError(f"norm_standard must be one of {NORM_STANDARDS}")
        if not 0.0 <= self.mu < 1.0:
            raise ValueError("mu must lie in [0, 1)")
        if self.noise_resample not in RESAMPLE_POLICIES:
            raise ValueError(f"noise_resample must be one of {RESAMPLE_POLICIES}")

    def validate(self, k):
        K = self.resolved_K(k)
        if K < k or K % k:
            raise ValueError(f"K={K} must be a multiple of k={k} and at least k")

    def resolved_K(self, k):
        return k if self.K is None else int(self.K)

    def as_dict(self):
        return dict(self.__dict__)


class SecDTGuest:
    """Label-party side of the defense, plugged into the training loop.

    Builds pools and fixed per-sample codes at construction, serves the
    (optionally noised) targets for each epoch, and normalises outgoing
    gradients.
    """

    def __init__(self, config: DefenseConfig, labels, k, rng: RngStream):
        t0 = time.perf_counter()
        config.validate(k)
        self.config = config
        K = config.resolved_K(k)
        if config.K is None:
            self.pools = MappingPools(k, k, tuple([y] for y in range(k)))
        else:
            self.pools = build_mapping_pools(k, K, rng.child("pools"))
        self.base_targets = transform_labels(labels, self.pools, rng.child("codes"))
        self._noise_rng = rng.child("noise")
        self._cached = None
        self.loss = cross_entropy_soft if config.renormalize else _raw_cross_entropy
        self.setup_seconds = time.perf_counter() - t0

    def targets(self, epoch):
        cfg = self.config
        if cfg.mu == 0.0:
            return self.base_targets
        if cfg.noise_resample == "once" and self._cached is not None:
            return self._cached
        self._cached = sgn_noise_batch(self.base_targets, cfg.mu, self._noise_rng, cfg.renormalize)
        return self._cached

    def filter_gradients(self, grads):
        return normalize_gradients(grads, self.config.norm_standard)


@dataclass
class Architecture:
    cut_width: int = 16
    bottom_hidden: int = 64
    top_hidden: int = 32

    def build(self, n_features, n_out, seed):
        from .models import bottom_network, top_network

        rng = RngStream(seed)
        bottom = bottom_network(n_features, self.cut_width, self.bottom_hidden, rng.child("bottom"))
        top = top_network(self.cut_width, n_out, self.top_hidden, rng.child("top"))
        return bottom, top


def fit(data, cfg, arch: Architecture = None, tap=None):
    """Train a split model on ``data`` with or without the defense.

    Returns ``(TrainingResult, MappingPools or None)``.
    """
    from .splitproto import run_training

    arch = arch or Architecture()
    provider, pools, n_out = None, None, data.k
    if cfg.defense is not None:
        provider = SecDTGuest(cfg.defense, data.labels, data.k, RngStream(cfg.seed).child("secdt"))
        pools, n_out = provider.pools, provider.pools.K
    bottom, top = arch.build(data.n_features, n_out, cfg.seed)
    return run_training(bottom, top, data, cfg, provider=provider, tap=tap), pools


def secdt_fit(data, cfg, arch: Architecture = None, test=None):
    """Train under SecDT; returns ``(SplitModel, MappingPools, GradientTap, RunRecord)``.

    If ``test`` is given the record carries held-out utility, computed with
    the weighted mapping back to the original classes.
    """
    from .records import RunRecord
    from .splitproto import evaluate

    if cfg.defense is None:
        raise ValueError("secdt_fit needs cfg.defense")
    result, pools = fit(data, cfg, arch)
    utility = evaluate(result.model, test, pools).as_dict() if test is not None else {}
    record = RunRecord(
        config={
            "epochs": cfg.epochs, "batch_size": cfg.batch_size, "seed": cfg.seed,
            "learning_rate": cfg.learning_rate, "defense": cfg.defense.as_dict(),
            "tap_window": list(cfg.tap_window) if cfg.tap_window else None,
        },
        losses=list(result.losses),
        initial_loss=result.initial_loss,
        utility=utility,
        timing=result.timing.as_dict(),
    )
    return result.model, pools, result.tap, record
