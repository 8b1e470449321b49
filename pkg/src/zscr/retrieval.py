"""Retrieval over the common embedding space and the ranking metrics.

A query class is represented by its per-class text embedding. The text side
is encoded, passed through the generator with a deterministic per-query
noise draw and mapped into the common space; every candidate image
embedding is mapped the same way, and cosine similarity ranks candidates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import ClassQuery, EmbeddingDataset, per_class_text_embedding
from .errors import EmptyQuerySet, EmptyUnseenSplit, ModelUntrained, ZeroVector
from .model import Model, sample_latent

NORM_EPS = ad.NORM_EPS


@dataclass
class RankedRetrieval:
    """Top-k candidates for one query, best first; ties broken by index."""

    query_class: int
    entries: list[tuple[float, int]]  # (similarity, item index)
    k: int


@dataclass
class PerQueryMetrics:
    class_id: int
    prec_at_k: float
    ave_p_at_k: float
    top1_hit: bool
    relevant_ranks: tuple[int, ...]


@dataclass
class MetricsReport:
    per_query: list[PerQueryMetrics]
    prec50: float
    map50: float
    top1: float
    q: int
    k: int


def retrieve(
    model: Model,
    query: ClassQuery,
    candidates: np.ndarray,
    candidate_indices: np.ndarray,
    k: int,
    seed: int,
    sample_code: bool = False,
    skip_generator: bool = False,
) -> RankedRetrieval:
    """Rank candidate image embeddings against one class query.

    The noise vector (and the optional latent-code perturbation) come from
    an rng derived from (seed, query_class), so rankings are reproducible.
    skip_generator compares candidates against the raw latent mean instead
    of a generated embedding (used when the model was trained without the
    GAN stage).
    """
    if query.phi_t.shape[0] != model.dims.d_t or candidates.shape[1] != model.dims.d_i:
        raise ModelUntrained(
            f"model dims ({model.dims.d_t}, {model.dims.d_i}) do not match "
            f"query/candidates ({query.phi_t.shape[0]}, {candidates.shape[1]})"
        )
    rng = np.random.default_rng([seed, query.class_id])
    z = rng.standard_normal(model.dims.d_z).astype(np.float32)
    code = model.text_encode(ad.tensor(query.phi_t))
    if sample_code:
        c_hat = sample_latent(code, rng)
    else:
        c_hat = code.mu
    if skip_generator:
        theta_t = c_hat.data
    else:
        i_t = model.generate(ad.tensor(z), c_hat)
        theta_t = model.csem_map(i_t).data
    tq = theta_t.astype(np.float64)
    nq = np.linalg.norm(tq)
    if nq < NORM_EPS:
        raise ZeroVector(f"query side of class {query.class_id} mapped to a zero vector")
    theta_i = model.csem_map(ad.tensor(candidates)).data.astype(np.float64)
    ni = np.linalg.norm(theta_i, axis=1)
    bad = np.nonzero(ni < NORM_EPS)[0]
    if bad.size:
        raise ZeroVector(f"candidate item {int(candidate_indices[bad[0]])} mapped to a zero vector")
    sims = (theta_i @ tq) / (ni * nq)
    order = np.lexsort((candidate_indices, -sims))
    top = order[: min(k, len(order))]
    entries = [(float(sims[j]), int(candidate_indices[j])) for j in top]
    return RankedRetrieval(query.class_id, entries, k)


def precision_at_k(ranked: RankedRetrieval, relevant: set[int]) -> float:
    """Fraction of the requested depth occupied by relevant items.

    The divisor is k even when fewer candidates exist.
    """
    hits = sum(1 for _, idx in ranked.entries[: ranked.k] if idx in relevant)
    return hits / ranked.k


def average_precision_at_k(ranked: RankedRetrieval, relevant: set[int], k: int | None = None, classical: bool = False) -> float:
    """Mean of Precision@r over the ranks r holding relevant items.

    The default divisor is the number of relevant items found within the
    depth; classical=True divides by min(|relevant|, k) instead.
    """
    depth = k if k is not None else ranked.k
    found_ranks = []
    hits = 0
    precisions = []
    for pos, (_, idx) in enumerate(ranked.entries[:depth], start=1):
        if idx in relevant:
            hits += 1
            found_ranks.append(pos)
            precisions.append(hits / pos)
    if classical:
        denom = min(len(relevant), depth)
        return sum(precisions) / denom if denom else 0.0
    if not found_ranks:
        return 0.0
    return sum(precisions) / len(found_ranks)


def top1_accuracy(rankings: list[RankedRetrieval], relevance: dict[int, set[int]]) -> float:
    """Fraction of queries whose best-ranked item is relevant."""
    if not rankings:
        raise EmptyQuerySet("no queries to aggregate")
    hits = 0
    for r in rankings:
        if r.entries and r.entries[0][1] in relevance[r.query_class]:
            hits += 1
    return hits / len(rankings)


def evaluate(
    model: Model,
    ds: EmbeddingDataset,
    k: int = 50,
    seed: int = 0,
    skip_generator: bool = False,
) -> MetricsReport:
    """Run every unseen class as a query against all unseen-split items."""
    if not ds.unseen:
        raise EmptyUnseenSplit("dataset has no unseen classes")
    pool = np.nonzero(np.isin(ds.labels, np.asarray(ds.unseen, dtype=np.uint32)))[0]
    candidates = ds.images[pool]
    per_query = []
    rankings = []
    relevance = {}
    for cls in ds.unseen:
        query = per_class_text_embedding(ds, cls)
        ranked = retrieve(model, query, candidates, pool, k, seed, skip_generator=skip_generator)
        relevant = set(int(j) for j in ds.items_of(cls))
        relevance[cls] = relevant
        ranks = tuple(
            pos for pos, (_, idx) in enumerate(ranked.entries[:k], start=1) if idx in relevant
        )
        per_query.append(
            PerQueryMetrics(
                class_id=cls,
                prec_at_k=precision_at_k(ranked, relevant),
                ave_p_at_k=average_precision_at_k(ranked, relevant),
                top1_hit=bool(ranked.entries and ranked.entries[0][1] in relevant),
                relevant_ranks=ranks,
            )
        )
        rankings.append(ranked)
    q = len(per_query)
    return MetricsReport(
        per_query=per_query,
        prec50=sum(p.prec_at_k for p in per_query) / q,
        map50=sum(p.ave_p_at_k for p in per_query) / q,
        top1=top1_accuracy(rankings, relevance),
        q=q,
        k=k,
    )


def metrics_csv(report: MetricsReport) -> str:
    """Per-class CSV plus the one-line aggregate summary."""
    lines = ["class_id,prec_at_50,ap_at_50,top1_hit"]
    for p in report.per_query:
        lines.append(f"{p.class_id},{p.prec_at_k:.6f},{p.ave_p_at_k:.6f},{int(p.top1_hit)}")
    lines.append("Q,prec50,map50,top1")
    lines.append(f"{report.q},{report.prec50:.6f},{report.map50:.6f},{report.top1:.6f}")
    return "\n".join(lines) + "\n"
