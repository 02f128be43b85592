"""Contrastive losses, category centroids, and negative importance scores.

Three losses share one temperature-scaled cosine InfoNCE core:

* cross-modal: visual vs textual refined features of the same instance,
  with the rest of the batch as negatives (both instance sides);
* intra-modal: microvideo vs product within each modality, other
  products as negatives;
* cross-instance: key-encoded anchors against query-encoded positives,
  with bank-drawn key embeddings as negatives, each weighted by a
  category-distance importance score.

All denominators go through max-subtracted log-sum-exp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LossWeights:
    cross_modal: float = 0.1
    intra_modal: float = 0.1
    cross_instance: float = 0.8
    temperature: float = 0.07
    importance_strength: float = 0.1

    def validate(self) -> None:
        for name in ("cross_modal", "intra_modal", "cross_instance"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"loss weight {name} must be in [0, 1], got {v}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.importance_strength < 0:
            raise ValueError(f"importance_strength must be >= 0, got {self.importance_strength}")


def info_nce(anchor: Tensor, positive: Tensor, negatives, weights, temperature: float) -> Tensor:
    """Single-anchor InfoNCE over cosine logits, negatives weighted.

    -ln( e^{cos(a,p)/t} / (e^{cos(a,p)/t} + sum_k w_k e^{cos(a,n_k)/t}) )
    """
    negatives = list(negatives)
    weights = [float(w) for w in weights]
    if len(weights) != len(negatives):
        raise ValueError("info_nce: one weight per negative required")
    if any(w < 0 for w in weights):
        raise ValueError("info_nce: negative weight")
    inv_t = 1.0 / temperature
    pos = ad.cosine_similarity(anchor, positive) * inv_t
    logits = [ad.reshape(pos, (1,))]
    for n in negatives:
        logits.append(ad.reshape(ad.cosine_similarity(anchor, n) * inv_t, (1,)))
    stacked = ad.concat(logits, axis=0)
    w = np.asarray([1.0] + weights, dtype=stacked.data.dtype)
    lse = ad.logsumexp(stacked, axis=0, weights=w)
    return ad.add(lse, -pos)


def _in_batch_nce(anchors: Tensor, gallery: Tensor, temperature: float) -> Tensor:
    """Per-anchor loss vector; positive i pairs with gallery i, the full
    gallery row (all B entries) forms the softmax denominator."""
    an = ad.normalize_rows(anchors)
    gn = ad.normalize_rows(gallery)
    inv_t = 1.0 / temperature
    scores = ad.matmul(an, ad.transpose(gn)) * inv_t
    pos = ad.reduce_sum(ad.mul(an, gn), axis=1) * inv_t
    lse = ad.logsumexp(scores, axis=1)
    return ad.add(lse, -pos)


def _weighted_nce(
    anchors: Tensor,
    positives: Tensor,
    negatives: Tensor,
    weights: np.ndarray,
    temperature: float,
) -> Tensor:
    """Per-anchor loss vector against a shared (K, d) negative set."""
    b = anchors.shape[0]
    k = negatives.shape[0]
    if weights.shape != (b, k):
        raise ad.ShapeMismatchError(f"importance weights {weights.shape} vs batch ({b}, {k})")
    if np.any(weights < 0):
        raise ValueError("negative importance weight")
    an = ad.normalize_rows(anchors)
    pn = ad.normalize_rows(positives)
    nn = ad.normalize_rows(negatives)
    inv_t = 1.0 / temperature
    pos = ad.reduce_sum(ad.mul(an, pn), axis=1) * inv_t
    neg_scores = ad.matmul(an, ad.transpose(nn)) * inv_t
    stacked = ad.concat([ad.reshape(pos, (b, 1)), neg_scores], axis=1)
    w = np.concatenate([np.ones((b, 1)), weights], axis=1)
    lse = ad.logsumexp(stacked, axis=1, weights=w)
    return ad.add(lse, -pos)


def cross_modal_loss(
    mv_visual: Tensor,
    mv_text: Tensor,
    prod_visual: Tensor,
    prod_text: Tensor,
    temperature: float,
) -> Tensor:
    """Consistency between modalities of the same instance, both sides."""
    if mv_visual.shape[0] < 2:
        raise ValueError("cross_modal_loss needs batch size >= 2 for in-batch negatives")
    per_anchor = ad.add(
        _in_batch_nce(mv_visual, mv_text, temperature),
        _in_batch_nce(prod_visual, prod_text, temperature),
    )
    return ad.reduce_mean(per_anchor)


def intra_modal_loss(
    mv_visual: Tensor,
    mv_text: Tensor,
    prod_visual: Tensor,
    prod_text: Tensor,
    temperature: float,
    modalities=("visual", "text"),
) -> Tensor:
    """Microvideo against its product within each modality.

    `modalities` narrows the terms for single-modality ablations where
    the other side's features are zeroed out.
    """
    if mv_visual.shape[0] < 2:
        raise ValueError("intra_modal_loss needs batch size >= 2 for in-batch negatives")
    terms = []
    if "visual" in modalities:
        terms.append(_in_batch_nce(mv_visual, prod_visual, temperature))
    if "text" in modalities:
        terms.append(_in_batch_nce(mv_text, prod_text, temperature))
    if not terms:
        raise ValueError("intra_modal_loss: at least one modality required")
    per_anchor = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    return ad.reduce_mean(per_anchor)


def cross_instance_loss(
    mv_query: Tensor,
    prod_query: Tensor,
    mv_key: Tensor,
    prod_key: Tensor,
    mv_negatives: Tensor,
    prod_negatives: Tensor,
    importance_vs_prod: np.ndarray,
    importance_vs_mv: np.ndarray,
    temperature: float,
) -> Tensor:
    """Instance-level loss over bank-drawn negatives.

    Anchors and negatives are key-role embeddings (no gradient);
    positives are query-role, so gradients reach only query-side
    parameters. Each negative column k for anchor row i is weighted by
    the importance score of their category paths.
    """
    term_mv = _weighted_nce(mv_key, prod_query, prod_negatives, importance_vs_prod, temperature)
    term_prod = _weighted_nce(prod_key, mv_query, mv_negatives, importance_vs_mv, temperature)
    return ad.reduce_mean(ad.add(term_mv, term_prod))


def combined_loss(l1: Tensor, l2: Tensor, l3: Tensor, weights: LossWeights) -> Tensor:
    return ad.add(
        ad.add(l1 * weights.cross_modal, l2 * weights.intra_modal),
        l3 * weights.cross_instance,
    )


# ---------------------------------------------------------------------------
# category centroids and importance scores
# ---------------------------------------------------------------------------


@dataclass
class CentroidTable:
    """Mean embedding per category id at both ontology levels.

    `max_dist` per level is the largest pairwise centroid distance in
    the table, the normalizer that maps raw distances into [0, 1].
    """

    level1: dict[int, np.ndarray]
    level2: dict[int, np.ndarray]
    counts1: dict[int, int]
    counts2: dict[int, int]
    max_dist1: float
    max_dist2: float


def _max_pairwise_distance(centroids: dict[int, np.ndarray]) -> float:
    ids = sorted(centroids)
    if len(ids) < 2:
        return 0.0
    mat = np.stack([centroids[i] for i in ids])
    sq = np.sum(mat * mat, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (mat @ mat.T)
    return float(np.sqrt(max(float(d2.max()), 0.0)))


def build_centroids(vectors: np.ndarray, paths) -> CentroidTable:
    """Arithmetic-mean centroid per category at each level.

    `vectors` is (N, d), `paths` a sequence of (level1_id, level2_id);
    order of the inputs does not matter.
    """
    if len(paths) == 0:
        raise ValueError("build_centroids: empty input")
    vectors = np.asarray(vectors, dtype=np.float64)
    sums1: dict[int, np.ndarray] = {}
    sums2: dict[int, np.ndarray] = {}
    counts1: dict[int, int] = {}
    counts2: dict[int, int] = {}
    for vec, (c1, c2) in zip(vectors, paths):
        if c1 in sums1:
            sums1[c1] += vec
            counts1[c1] += 1
        else:
            sums1[c1] = vec.copy()
            counts1[c1] = 1
        if c2 in sums2:
            sums2[c2] += vec
            counts2[c2] += 1
        else:
            sums2[c2] = vec.copy()
            counts2[c2] = 1
    level1 = {c: s / counts1[c] for c, s in sums1.items()}
    level2 = {c: s / counts2[c] for c, s in sums2.items()}
    return CentroidTable(
        level1=level1,
        level2=level2,
        counts1=counts1,
        counts2=counts2,
        max_dist1=_max_pairwise_distance(level1),
        max_dist2=_max_pairwise_distance(level2),
    )


def importance(path_a, path_b, table: CentroidTable, strength: float) -> float:
    """Anchor-negative weight from category-path distance, in [0, 1].

    Same-path pairs score 1 - 2*strength; the score falls as the
    categories' centroids move apart, clamped at 0. Symmetric in its
    path arguments.
    """
    a1, a2 = path_a
    b1, b2 = path_b
    for cid, level in ((a1, table.level1), (b1, table.level1), (a2, table.level2), (b2, table.level2)):
        if cid not in level:
            raise ValueError(f"importance: unknown category id {cid}")
    d1 = float(np.linalg.norm(table.level1[a1] - table.level1[b1]))
    d2 = float(np.linalg.norm(table.level2[a2] - table.level2[b2]))
    n1 = d1 / table.max_dist1 if table.max_dist1 > 0 else 0.0
    n2 = d2 / table.max_dist2 if table.max_dist2 > 0 else 0.0
    raw = 1.0 - strength * math.exp(n1) - strength * math.exp(n2)
    return min(1.0, max(0.0, raw))


def importance_matrix(anchor_paths, negative_paths, table: CentroidTable, strength: float) -> np.ndarray:
    """(B, K) matrix of importance scores; scores depend only on the
    two category paths, so distinct pairs are computed once."""
    cache: dict[tuple, float] = {}
    out = np.empty((len(anchor_paths), len(negative_paths)), dtype=np.float64)
    for i, pa in enumerate(anchor_paths):
        for k, pb in enumerate(negative_paths):
            key = (pa[0], pa[1], pb[0], pb[1])
            e = cache.get(key)
            if e is None:
                e = importance(pa, pb, table, strength)
                cache[key] = e
            out[i, k] = e
    return out
