"""Bidirectional retrieval scoring and rank metrics.

Test instances are embedded with the query encoders (batch norm frozen
to running statistics), scored by cosine similarity, and ranked with
ties broken by ascending gallery index. The product->microvideo matrix
is the exact transpose of microvideo->product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model
from .autodiff import Tensor
from .dataio import Dataset


@dataclass
class DirectionMetrics:
    r1: float
    r5: float
    r10: float
    medr: float
    rsum: float

    def as_record(self) -> dict:
        return {"R@1": self.r1, "R@5": self.r5, "R@10": self.r10, "MedR": self.medr, "Rsum": self.rsum}


@dataclass
class RetrievalReport:
    mv2prod: DirectionMetrics
    prod2mv: DirectionMetrics
    degenerate: bool  # all scores equal (e.g. an untrained zero model)


def _rowwise_normalize(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    return np.divide(mat, norms, out=np.zeros_like(mat), where=norms != 0)


def embed_instances(dataset: Dataset, indices: np.ndarray, params, modality_mode: str = "all"):
    """Query-encoder embeddings for both sides of the given pairs."""
    if len(indices) == 0:
        raise ValueError("empty evaluation split")
    outs = {}
    chunks = max(1, len(indices) // 256 + (1 if len(indices) % 256 else 0))
    for side, vis_feats, txt_feats in (
        ("mv", dataset.mv_visual, dataset.mv_text),
        ("prod", dataset.prod_visual, dataset.prod_text),
    ):
        fusion = params[f"fusion-{side}"]
        refined_dim = fusion.tensors["w_visual"].shape[0]
        dtype = fusion.tensors["w_visual"].dtype
        rows = []
        for piece in np.array_split(indices, chunks):
            if modality_mode == "text-only":
                rv = Tensor(np.zeros((len(piece), refined_dim), dtype=dtype))
            else:
                rv = model.project(
                    Tensor(vis_feats[piece].astype(dtype)), params[f"projector-{side}-visual"], training=False
                )
            if modality_mode == "visual-only":
                rt = Tensor(np.zeros((len(piece), refined_dim), dtype=dtype))
            else:
                rt = model.project(
                    Tensor(txt_feats[piece].astype(dtype)), params[f"projector-{side}-text"], training=False
                )
            fused = model.fuse(rv, rt, params[f"fusion-{side}"])
            encoded = model.encode(fused, params[f"encoder-{side}-query"])
            rows.append(encoded.data)
        outs[side] = np.concatenate(rows, axis=0)
    return outs["mv"], outs["prod"]


def score_matrix(mv_embed: np.ndarray, prod_embed: np.ndarray) -> np.ndarray:
    """Cosine scores, microvideo rows x product columns.

    Zero-norm embeddings score 0 against everything rather than
    erroring, so a degenerate untrained model still evaluates.
    """
    return _rowwise_normalize(mv_embed) @ _rowwise_normalize(prod_embed).T


def ranks_of_truth(scores: np.ndarray) -> np.ndarray:
    """1-based rank of the diagonal entry in each row under descending
    score, equal scores ordered by ascending gallery index."""
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ValueError(f"score matrix must be square, got {scores.shape}")
    n = scores.shape[0]
    diag = scores[np.arange(n), np.arange(n)]
    higher = (scores > diag[:, None]).sum(axis=1)
    cols = np.arange(n)
    tied_before = ((scores == diag[:, None]) & (cols[None, :] < np.arange(n)[:, None])).sum(axis=1)
    return (higher + tied_before + 1).astype(np.int64)


def direction_metrics(scores: np.ndarray) -> DirectionMetrics:
    ranks = ranks_of_truth(scores)
    n = len(ranks)
    r1 = 100.0 * float((ranks <= 1).sum()) / n
    r5 = 100.0 * float((ranks <= 5).sum()) / n
    r10 = 100.0 * float((ranks <= 10).sum()) / n
    medr = float(np.sort(ranks)[(n - 1) // 2])  # lower median
    return DirectionMetrics(r1=r1, r5=r5, r10=r10, medr=medr, rsum=r1 + r5 + r10)


def evaluate_embeddings(mv_embed: np.ndarray, prod_embed: np.ndarray) -> RetrievalReport:
    scores = score_matrix(mv_embed, prod_embed)
    degenerate = bool(scores.size) and float(scores.max()) == float(scores.min())
    return RetrievalReport(
        mv2prod=direction_metrics(scores),
        prod2mv=direction_metrics(scores.T),
        degenerate=degenerate,
    )
