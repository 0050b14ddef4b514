"""Training objective: per-part identity cross-entropy, batch-hard triplet,
entropy-derived sample weights, and the per-level weighted adversarial term.

The combined objective is
    total = sum_i xent(f_i) + triplet - sum_j adv(g_j, w)
so the extractor's minimization maximizes the adversarial term while the
discriminator phase minimizes the same adversarial sum directly. Sample
weights w are constants in differentiation: no gradient flows through the
entropy that produced them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, UsageError
from .model import BatchRecord, DomainClassifierBank
from .tensor import LOG_EPS, Tensor

ABLATIONS = ("baseline", "vanilla", "shallow", "shallow+weighting")


@dataclass(frozen=True)
class LossConfig:
    num_identities: int
    triplet_margin: float = 0.3
    adv_levels: tuple[int, ...] = (1, 2, 3, 4)
    weighting_enabled: bool = True
    vanilla_mode: bool = False

    def __post_init__(self):
        if self.triplet_margin < 0:
            raise ConfigError(f"triplet margin must be >= 0, got {self.triplet_margin}")
        if any(j not in (1, 2, 3, 4) for j in self.adv_levels):
            raise ConfigError(f"adv_levels must be within 1..4, got {self.adv_levels}")
        if self.vanilla_mode:
            if self.weighting_enabled:
                raise ConfigError("the deep-layers-only adversarial mode is unweighted")
            if not self.adv_levels:
                raise ConfigError("vanilla mode applies an adversarial term; adv_levels is empty")

    @property
    def adversarial_active(self) -> bool:
        return bool(self.adv_levels) or self.vanilla_mode

    @property
    def adv_keys(self) -> tuple[str, ...]:
        """Breakdown keys in log order: levels then the descriptor head."""
        keys = tuple(str(j) for j in self.adv_levels)
        if self.vanilla_mode:
            keys += ("f",)
        return keys

    @classmethod
    def from_ablation(cls, name: str, num_identities: int, triplet_margin: float = 0.3) -> "LossConfig":
        common = dict(num_identities=num_identities, triplet_margin=triplet_margin)
        if name == "baseline":
            return cls(adv_levels=(), weighting_enabled=False, **common)
        if name == "vanilla":
            return cls(adv_levels=(4,), weighting_enabled=False, vanilla_mode=True, **common)
        if name == "shallow":
            return cls(adv_levels=(1, 2, 3, 4), weighting_enabled=False, **common)
        if name == "shallow+weighting":
            return cls(adv_levels=(1, 2, 3, 4), weighting_enabled=True, **common)
        raise ConfigError(f"unknown ablation {name!r}; choose from {ABLATIONS}")


@dataclass
class LossReport:
    """Scalar values of every objective term for one batch."""

    xent_per_part: list[float]
    triplet: float
    adv_per_level: dict[str, float]
    weights: np.ndarray
    total: float

    def recombined(self) -> float:
        return sum(self.xent_per_part) + self.triplet - sum(self.adv_per_level.values())

    def terms_finite(self) -> bool:
        vals = [*self.xent_per_part, self.triplet, *self.adv_per_level.values(), self.total]
        return bool(np.isfinite(vals).all())


# -- identity terms -------------------------------------------------------------


def cross_entropy_part(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label] in stabilized log-sum-exp form."""
    logits = T.as_tensor(logits)
    if logits.data.ndim != 1:
        raise UsageError(f"expected a logit vector, got shape {logits.shape}")
    c = logits.shape[0]
    if not 0 <= label < c:
        raise UsageError(f"label {label} out of range for {c} identities")
    lp = T.log_softmax(T.reshape(logits, (1, c)))
    return T.neg(T.reshape(T.gather_pairs(lp, [0], [label]), ()))


def cross_entropy_mean(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Batch mean of the per-sample cross-entropy for one part."""
    logits = T.as_tensor(logits)
    m, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (m,):
        raise UsageError(f"labels shape {labels.shape} does not match batch {m}")
    if labels.min() < 0 or labels.max() >= c:
        raise UsageError(f"labels must lie in 0..{c - 1}")
    lp = T.log_softmax(logits)
    return T.neg(T.tmean(T.gather_pairs(lp, np.arange(m), labels)))


def triplet_batch_hard(descriptors: Tensor, identity_labels: np.ndarray, margin: float) -> Tensor:
    """Mean over anchors of max(0, hardest-pos - hardest-neg + margin) with
    Euclidean distances on the raw (pre-normalization) descriptors."""
    x = T.as_tensor(descriptors)
    labels = np.asarray(identity_labels)
    m = x.shape[0]
    if labels.shape != (m,):
        raise UsageError(f"labels shape {labels.shape} does not match batch {m}")
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2:
        raise UsageError("triplet needs at least two identities in the batch")
    if counts.min() < 2:
        bad = uniq[counts.argmin()]
        raise UsageError(f"identity {bad} has a single sample; triplet needs >= 2 per identity")

    r = T.tsum(T.mul(x, x), axis=1)
    col = T.reshape(r, (m, 1))
    row = T.reshape(r, (1, m))
    d2 = T.add(T.add(col, row), T.mul(T.matmul(x, T.transpose(x)), -2.0))
    # Floor before the sqrt so unselected zero entries (the diagonal) cannot
    # poison the backward pass with inf * 0.
    dist = T.sqrt(T.clamp(d2, lo=1e-12))

    same = labels[:, None] == labels[None, :]
    eye = np.eye(m, dtype=bool)
    dvals = dist.data
    pos_cols = np.where(same & ~eye, dvals, -np.inf).argmax(axis=1)
    neg_cols = np.where(~same, dvals, np.inf).argmin(axis=1)
    rows = np.arange(m)
    hard_pos = T.gather_pairs(dist, rows, pos_cols)
    hard_neg = T.gather_pairs(dist, rows, neg_cols)
    return T.tmean(T.relu(T.add(T.sub(hard_pos, hard_neg), margin)))


# -- entropy weighting -----------------------------------------------------------


def entropy(distribution: np.ndarray) -> float:
    """Shannon entropy of a probability vector, 0*log(0) := 0."""
    p = np.asarray(distribution, dtype=np.float64)
    if p.ndim != 1:
        raise UsageError(f"expected a probability vector, got shape {p.shape}")
    if (p < 0).any() or not np.isfinite(p).all():
        raise UsageError("distribution entries must be finite and non-negative")
    if abs(p.sum() - 1.0) > 1e-6:
        raise UsageError(f"distribution sums to {p.sum():.8f}, not 1")
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return float(-terms.sum())


def batch_weights(entropies: np.ndarray) -> np.ndarray:
    """Per-sample weights (1 + e^{-H_k}) / sum_k' (1 + e^{-H_k'}).

    Treated as constants in differentiation; callers pass the result as a
    plain array so no graph is built through it.
    """
    h = np.asarray(entropies, dtype=np.float64)
    if h.ndim != 1 or h.size < 1:
        raise UsageError(f"expected a non-empty entropy vector, got shape {h.shape}")
    raw = 1.0 + np.exp(-h)
    return raw / raw.sum()


def uniform_weights(m: int) -> np.ndarray:
    return np.full(m, 1.0 / m)


# -- adversarial terms ------------------------------------------------------------


def adversarial_vanilla(d_out: float, m: int) -> float:
    """Single-sample domain cross-entropy -m*log D - (1-m)*log(1-D)."""
    if m not in (0, 1):
        raise UsageError(f"modality must be 0 or 1, got {m}")
    d = min(max(float(d_out), LOG_EPS), 1.0 - LOG_EPS)
    return float(-(m * np.log(d) + (1 - m) * np.log(1.0 - d)))


def weighted_domain_bce(probs: Tensor, modalities: np.ndarray, weights: np.ndarray) -> Tensor:
    """sum_k w_k * (-m_k log d_k - (1-m_k) log(1-d_k))."""
    d = T.clamp(T.as_tensor(probs), LOG_EPS, 1.0 - LOG_EPS)
    m = np.asarray(modalities, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if d.shape != m.shape or d.shape != w.shape:
        raise UsageError(
            f"probabilities {d.shape}, modalities {m.shape} and weights {w.shape} must align"
        )
    per_sample = T.neg(T.add(T.mul(T.log(d), m), T.mul(T.log(T.sub(1.0, d)), 1.0 - m)))
    return T.tsum(T.mul(per_sample, w))


def adversarial_weighted(
    record: BatchRecord,
    bank: DomainClassifierBank,
    weights: np.ndarray,
    levels: tuple[int, ...],
    include_descriptor: bool = False,
    raw_descriptor: Tensor | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted adversarial loss summed over the requested levels; with all
    weights at 1/M this reduces to the per-level batch mean of the plain
    domain cross-entropy."""
    if not levels and not include_descriptor:
        raise UsageError("no adversarial levels requested")
    terms: list[Tensor] = []
    breakdown: dict[str, float] = {}
    for j in levels:
        d = bank.discriminate(record.g[j - 1], j)
        term = weighted_domain_bce(d, record.modalities, weights)
        breakdown[str(j)] = term.item()
        terms.append(term)
    if include_descriptor:
        if raw_descriptor is None:
            raise UsageError("descriptor-level adversarial term needs the raw descriptor")
        d = bank.discriminate_descriptor(raw_descriptor)
        term = weighted_domain_bce(d, record.modalities, weights)
        breakdown["f"] = term.item()
        terms.append(term)
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return total, breakdown


# -- combined objective ------------------------------------------------------------


def resolve_weights(record: BatchRecord, config: LossConfig) -> np.ndarray:
    if config.weighting_enabled:
        return batch_weights(record.entropy)
    return uniform_weights(record.batch_size)


def total_objective(
    record: BatchRecord,
    labels: np.ndarray,
    bank: DomainClassifierBank | None,
    config: LossConfig,
    weights_override: np.ndarray | None = None,
) -> tuple[Tensor, LossReport]:
    """Combined extractor objective and its per-term report.

    `weights_override` substitutes precomputed constant weights (used by the
    detachment instrumentation tests); training never passes it.
    """
    labels = np.asarray(labels)
    raw_desc = T.concat(record.parts, axis=1)

    xent_terms = [cross_entropy_mean(lg, labels) for lg in record.logits]
    total = xent_terms[0]
    for term in xent_terms[1:]:
        total = T.add(total, term)

    triplet = triplet_batch_hard(raw_desc, labels, config.triplet_margin)
    total = T.add(total, triplet)

    adv_breakdown: dict[str, float] = {}
    if config.adversarial_active:
        if bank is None:
            raise UsageError("adversarial term requested but no discriminator bank given")
        weights = weights_override if weights_override is not None else resolve_weights(record, config)
        adv_total, adv_breakdown = adversarial_weighted(
            record, bank, weights,
            levels=config.adv_levels,
            include_descriptor=config.vanilla_mode,
            raw_descriptor=raw_desc if config.vanilla_mode else None,
        )
        total = T.sub(total, adv_total)
    else:
        weights = uniform_weights(record.batch_size)

    report = LossReport(
        xent_per_part=[t.item() for t in xent_terms],
        triplet=triplet.item(),
        adv_per_level=adv_breakdown,
        weights=weights,
        total=total.item(),
    )
    return total, report
