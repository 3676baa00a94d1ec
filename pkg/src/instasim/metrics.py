"""Rank-based evaluation metrics, hand-computed.

Tie policy, fixed across the suite: AP and nDCG break ranking ties by
ascending item id (or input position when no ids exist); ROC-AUC gives
ties half credit (Mann-Whitney); triplet comparisons count exact ties
as incorrect; Spearman uses average ranks; Kendall is the tau-b tie
corrected variant. Every function raises UndefinedMetric where the
quantity has no mathematical value, rather than returning 0.
"""
from __future__ import annotations

import numpy as np

from .errors import InvalidInput, UndefinedMetric


def cosine_similarity(u, v) -> float:
    """Cosine of two vectors; the similarity both heads are scored with."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise InvalidInput(f"vector shapes differ: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise InvalidInput("zero-norm vector in cosine similarity")
    return float(u @ v / (nu * nv))


def triplet_correct(sim_pos: float, sim_neg: float) -> bool:
    """Strict comparison; an exact tie counts as incorrect."""
    return sim_pos > sim_neg


def _ranked_order(scores: np.ndarray, tie_key) -> np.ndarray:
    """Indices sorting by descending score, ties by ascending tie_key."""
    if tie_key is None:
        tie_key = np.arange(scores.size)
    else:
        tie_key = np.asarray(tie_key)
    # lexsort's last key is primary
    return np.lexsort((tie_key, -scores))


def _check_scores_labels(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.size != labels.size:
        raise InvalidInput("scores and labels must have equal length")
    if scores.size == 0:
        raise InvalidInput("empty input")
    if not np.all(np.isfinite(scores)):
        raise InvalidInput("scores must be finite")
    if not np.all(np.isin(labels, (0, 1))):
        raise InvalidInput("labels must be binary 0/1")
    return scores, labels.astype(np.int64)


def average_precision(scores, labels, tie_key=None) -> float:
    """Mean of precision at each positive's rank, descending-score order."""
    scores, labels = _check_scores_labels(scores, labels)
    if labels.sum() == 0:
        raise UndefinedMetric("average precision needs at least one positive")
    order = _ranked_order(scores, tie_key)
    ranked = labels[order]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, ranked.size + 1)
    precisions = hits[ranked == 1] / ranks[ranked == 1]
    return float(precisions.mean())


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score+ > score-) + 0.5 P(equal)."""
    scores, labels = _check_scores_labels(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("ROC-AUC needs both classes")
    ranks = rank_average(scores)
    rank_sum_pos = ranks[labels == 1].sum()
    return float((rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def ndcg_from_ranking(labels_in_rank_order) -> float:
    """Binary-gain nDCG with 1/log2(rank+1) discounts over a full ranking."""
    ranked = np.asarray(labels_in_rank_order).ravel()
    if ranked.size == 0:
        raise InvalidInput("empty ranking")
    if not np.all(np.isin(ranked, (0, 1))):
        raise InvalidInput("relevance must be binary 0/1")
    n_pos = int(ranked.sum())
    if n_pos == 0:
        raise UndefinedMetric("nDCG needs at least one relevant item")
    discounts = 1.0 / np.log2(np.arange(2, ranked.size + 2))
    dcg = float((ranked * discounts).sum())
    idcg = float(discounts[:n_pos].sum())
    return dcg / idcg


def ndcg_score(scores, labels, tie_key=None) -> float:
    scores, labels = _check_scores_labels(scores, labels)
    return ndcg_from_ranking(labels[_ranked_order(scores, tie_key)])


def rank_average(x) -> np.ndarray:
    """1-based average (mid) ranks, ties sharing their mean rank."""
    x = np.asarray(x, dtype=np.float64).ravel()
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        # positions i..j (0-based) share the average of ranks i+1..j+1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rho(x, y) -> float:
    """Spearman correlation: Pearson on average ranks."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise InvalidInput("length mismatch")
    if x.size < 2:
        raise InvalidInput("need at least 2 observations")
    rx = rank_average(x)
    ry = rank_average(y)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    sx = np.sqrt((dx * dx).sum())
    sy = np.sqrt((dy * dy).sum())
    if sx == 0.0 or sy == 0.0:
        raise UndefinedMetric("zero variance in ranks")
    return float((dx * dy).sum() / (sx * sy))


def kendall_tau_b(x, y) -> float:
    """Kendall tau-b with tie correction, O(n^2) pair enumeration."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise InvalidInput("length mismatch")
    n = x.size
    if n < 2:
        raise InvalidInput("need at least 2 observations")
    sx = np.sign(x[:, None] - x[None, :])
    sy = np.sign(y[:, None] - y[None, :])
    iu = np.triu_indices(n, k=1)
    concordant_minus_discordant = float((sx[iu] * sy[iu]).sum())
    n0 = n * (n - 1) / 2.0
    n1 = _tie_pair_count(x)
    n2 = _tie_pair_count(y)
    denom = np.sqrt((n0 - n1) * (n0 - n2))
    if denom == 0.0:
        raise UndefinedMetric("zero variance on one side")
    return concordant_minus_discordant / float(denom)


def _tie_pair_count(x) -> float:
    _, counts = np.unique(x, return_counts=True)
    return float((counts * (counts - 1) / 2.0).sum())


def rank_correlations(pred_scores, human_ratings) -> tuple[float, float]:
    """(Spearman rho, Kendall tau-b) of predictions against ratings."""
    return spearman_rho(pred_scores, human_ratings), kendall_tau_b(pred_scores, human_ratings)
