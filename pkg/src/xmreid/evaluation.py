"""Retrieval metrics and modality diagnostics.

Rank lists order the gallery by ascending descriptor distance with ties
broken by gallery index, so evaluation is deterministic. The domain probe
trains a fresh two-layer classifier on frozen features and reports
held-out accuracy: 0.5 means the features carry no modality signal. The
per-level correlation diagnostic compares pooled taps of colour/infrared
renders of the same identity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import UsageError
from .model import BatchRecord, PartStripeExtractor
from .rng import new_rng
from .tensor import Tensor


@dataclass
class RankList:
    probe_identity: int
    order: np.ndarray       # permutation of gallery indices, best first
    relevance: np.ndarray   # bool flags aligned with `order`


@dataclass
class EvalResult:
    rank1: float
    rank10: float
    mean_ap: float
    probe_accuracy: float
    layer_correlations: list[float]
    skipped_pairs: int

    def to_json(self) -> str:
        payload = {
            "rank1": self.rank1,
            "rank10": self.rank10,
            "mAP": self.mean_ap,
            "probe_accuracy": self.probe_accuracy,
            "layer_correlations": self.layer_correlations,
            "skipped_pairs": self.skipped_pairs,
        }
        return json.dumps(payload, sort_keys=True, indent=1)


def euclidean_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.sqrt(np.maximum(d2, 0.0))


def cosine_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return 1.0 - an @ bn.T

DISTANCES = {"euclidean": euclidean_distances, "cosine": cosine_distances}


def build_rank_lists(
    probe_desc: np.ndarray,
    probe_ids: np.ndarray,
    gallery_desc: np.ndarray,
    gallery_ids: np.ndarray,
    distance: str = "euclidean",
) -> list[RankList]:
    if distance not in DISTANCES:
        raise UsageError(f"unknown distance {distance!r}; use one of {sorted(DISTANCES)}")
    dist = DISTANCES[distance](np.asarray(probe_desc), np.asarray(gallery_desc))
    gallery_ids = np.asarray(gallery_ids)
    lists = []
    tie_break = np.arange(len(gallery_ids))
    for row, pid in zip(dist, np.asarray(probe_ids)):
        order = np.lexsort((tie_break, row))
        relevance = gallery_ids[order] == pid
        if not relevance.any():
            raise UsageError(f"probe identity {pid} has no relevant gallery item")
        lists.append(RankList(int(pid), order, relevance))
    return lists


def cmc(rank_lists: list[RankList], k: int) -> float:
    """Fraction of probes with a relevant item somewhere in the top k."""
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    hits = [rl.relevance[:k].any() for rl in rank_lists]
    return float(np.mean(hits))


def mean_average_precision(rank_lists: list[RankList]) -> float:
    """Mean over probes of the average precision over relevant hits."""
    aps = []
    for rl in rank_lists:
        rel = rl.relevance.astype(np.float64)
        cum = rel.cumsum()
        positions = np.nonzero(rl.relevance)[0]
        aps.append((cum[positions] / (positions + 1)).mean())
    return float(np.mean(aps))


# -- modality diagnostics --------------------------------------------------------


def domain_probe(
    features: np.ndarray,
    modality_labels: np.ndarray,
    seed: int = 0,
    hidden: int = 32,
    steps: int = 250,
    lr: float = 0.3,
) -> float:
    """Train a fresh 2-layer modality classifier on half the frozen features
    and report held-out accuracy (0.5 = modality-invariant features)."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(modality_labels, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise UsageError(f"features {x.shape} and labels {y.shape} do not align")
    if len(np.unique(y)) < 2:
        raise UsageError("domain probe needs both modalities present")

    # Deterministic stratified split: alternate samples within each class.
    train_idx, held_idx = [], []
    for cls in (0.0, 1.0):
        members = np.flatnonzero(y == cls)
        train_idx.extend(members[0::2])
        held_idx.extend(members[1::2])
    train_idx, held_idx = np.sort(train_idx), np.sort(held_idx)
    mu = x[train_idx].mean(axis=0)
    sd = np.maximum(x[train_idx].std(axis=0), 1e-8)
    xs = (x - mu) / sd

    rng = new_rng(seed)
    dim = x.shape[1]
    w1 = Tensor(rng.normal(0.0, np.sqrt(2.0 / dim), size=(dim, hidden)), requires_grad=True)
    b1 = Tensor(np.zeros(hidden), requires_grad=True)
    w2 = Tensor(rng.normal(0.0, np.sqrt(2.0 / hidden), size=(hidden, 1)), requires_grad=True)
    b2 = Tensor(np.zeros(1), requires_grad=True)
    params = [w1, b1, w2, b2]
    vel = [np.zeros_like(p.data) for p in params]

    def forward(data: np.ndarray) -> Tensor:
        h = T.relu(T.add(T.matmul(Tensor(data), w1), b1))
        logits = T.add(T.matmul(h, w2), b2)
        return T.sigmoid(T.reshape(logits, (len(data),)))

    xt, yt = xs[train_idx], y[train_idx]
    for _ in range(steps):
        p = forward(xt)
        nll = T.neg(T.add(T.mul(T.log(p), yt), T.mul(T.log(T.sub(1.0, p)), 1.0 - yt)))
        T.tmean(nll).backward()
        T.sgd_momentum_step(params, vel, lr=lr, momentum=0.9)
    with T.no_grad():
        pred = forward(xs[held_idx]).data > 0.5
    return float((pred == y[held_idx].astype(bool)).mean())


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    ac = a - a.mean()
    bc = b - b.mean()
    denom = np.sqrt((ac * ac).sum() * (bc * bc).sum())
    if denom == 0.0:
        return np.nan
    return float((ac * bc).sum() / denom)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0.0:
        return np.nan
    return float(a @ b / denom)

CORRELATIONS = {"pearson": pearson, "cosine": cosine}


def layer_correlation_from_taps(
    taps_colour: list[np.ndarray],
    taps_infrared: list[np.ndarray],
    kind: str = "pearson",
) -> tuple[list[float], int]:
    """Mean per-level correlation over paired tap rows; zero-variance pairs
    are skipped and counted."""
    if kind not in CORRELATIONS:
        raise UsageError(f"unknown correlation {kind!r}; use one of {sorted(CORRELATIONS)}")
    fn = CORRELATIONS[kind]
    means, skipped = [], 0
    for ga, gb in zip(taps_colour, taps_infrared):
        vals = [fn(a, b) for a, b in zip(ga, gb)]
        good = [v for v in vals if not np.isnan(v)]
        skipped += len(vals) - len(good)
        means.append(float(np.mean(good)) if good else np.nan)
    return means, skipped


# -- full evaluation over a dataset ------------------------------------------------


def _forward_taps_and_descriptors(
    model: PartStripeExtractor,
    images: np.ndarray,
    modalities: np.ndarray,
    chunk: int = 64,
) -> tuple[list[np.ndarray], np.ndarray]:
    taps: list[list[np.ndarray]] = [[] for _ in range(4)]
    descs = []
    with T.no_grad():
        for lo in range(0, len(images), chunk):
            hi = min(lo + chunk, len(images))
            rec = model.forward_batch(images[lo:hi], modalities[lo:hi], train_mode=False)
            for j in range(4):
                taps[j].append(rec.g[j].data)
            descs.append(model.descriptors(rec).data)
    return [np.concatenate(t) for t in taps], np.concatenate(descs)


def evaluate_model(
    model: PartStripeExtractor,
    dataset,
    distance: str = "euclidean",
    correlation: str = "pearson",
    probe_seed: int = 0,
) -> EvalResult:
    """Retrieval metrics on the single-shot protocol plus both diagnostics."""
    query = dataset.query
    gallery = dataset.gallery
    if not query or not gallery:
        raise UsageError("dataset has an empty query or gallery split")

    q_imgs = np.stack([s.image for s in query])
    q_ids = np.array([s.identity for s in query])
    g_imgs = np.stack([s.image for s in gallery])
    g_ids = np.array([s.identity for s in gallery])

    _, q_desc = _forward_taps_and_descriptors(model, q_imgs, np.ones(len(query), dtype=int))
    _, g_desc = _forward_taps_and_descriptors(model, g_imgs, np.zeros(len(gallery), dtype=int))
    lists = build_rank_lists(q_desc, q_ids, g_desc, g_ids, distance)

    # Diagnostics run on every held-out image so both modalities are balanced.
    colour_test = gallery + dataset.test_pool
    c_imgs = np.stack([s.image for s in colour_test])
    c_ids = np.array([s.identity for s in colour_test])
    c_taps, c_desc = _forward_taps_and_descriptors(model, c_imgs, np.zeros(len(colour_test), dtype=int))
    q_taps, _ = _forward_taps_and_descriptors(model, q_imgs, np.ones(len(query), dtype=int))

    probe_feats = np.concatenate([c_desc, q_desc])
    probe_labels = np.concatenate([np.zeros(len(colour_test)), np.ones(len(query))])
    probe_acc = domain_probe(probe_feats, probe_labels, seed=probe_seed)

    # Cross-modal pairs: every (colour, infrared) combination per identity.
    pair_c, pair_q = [], []
    for identity in np.unique(c_ids):
        ci = np.flatnonzero(c_ids == identity)
        qi = np.flatnonzero(q_ids == identity)
        for a in ci:
            for b in qi:
                pair_c.append(a)
                pair_q.append(b)
    taps_c = [tap[pair_c] for tap in c_taps]
    taps_q = [tap[pair_q] for tap in q_taps]
    corrs, skipped = layer_correlation_from_taps(taps_c, taps_q, correlation)

    return EvalResult(
        rank1=cmc(lists, 1),
        rank10=cmc(lists, 10),
        mean_ap=mean_average_precision(lists),
        probe_accuracy=probe_acc,
        layer_correlations=corrs,
        skipped_pairs=skipped,
    )
