"""Evaluation protocols: retrieval, verification, triplet and rating
correlation, reported as deterministic canonical JSON.

The single similarity entry point scores a pair of bundle items: CLS
bundles use cosine, PATCH bundles the negated transport divergence on
L2-normalized rows. Distance is 1 - similarity either way. Every
protocol scores with this one function, so the trainer's validation
accuracy and the reports here can never drift apart.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ._version import __version__
from .bundle import EmbeddingBundle
from .errors import DuplicateId, FormatError, InvalidInput, IoError, UndefinedMetric
from .metrics import (
    average_precision,
    cosine_similarity,
    kendall_tau_b,
    ndcg_from_ranking,
    roc_auc,
    spearman_rho,
    triplet_correct,
    _ranked_order,
)
from .records import PairLabel
from .reporting import FORMAT_VERSION, config_hash
from .sinkhorn import SinkhornConfig, sim_patch

PROTOCOLS = ("RETRIEVAL", "VERIFICATION", "TRIPLET", "CORRELATION")
TRIPLET_MODES = ("EASY", "HARD")


class SimilarityResult(NamedTuple):
    similarity: float
    distance: float


def similarity(
    x_id: str, y_id: str, bundle: EmbeddingBundle, sink_cfg: SinkhornConfig | None = None
) -> SimilarityResult:
    """Pairwise similarity and distance D = 1 - similarity.

    CLS bundles: cosine, in [-1, 1]. PATCH bundles: negated debiased
    divergence on row-normalized token matrices (0 for identical sets,
    negative otherwise).
    """
    x = bundle.get(x_id)
    y = bundle.get(y_id)
    if bundle.token_kind == "CLS":
        sim = cosine_similarity(x.ravel(), y.ravel())
    else:
        sim = sim_patch(_unit_rows(x), _unit_rows(y), sink_cfg)
    return SimilarityResult(similarity=sim, distance=1.0 - sim)


def _unit_rows(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    norms = np.linalg.norm(M, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise InvalidInput("zero-norm patch row")
    return M / norms


# ---------------------------------------------------------------------------
# task containers


@dataclass
class RetrievalTask:
    queries: list[str]
    gallery: list[str]
    relevance: dict[str, set[str]]

    def validate(self) -> None:
        if not self.queries or not self.gallery:
            raise InvalidInput("retrieval task needs queries and a gallery")
        if len(set(self.queries)) != len(self.queries):
            raise DuplicateId("duplicate query ids")
        if len(set(self.gallery)) != len(self.gallery):
            raise DuplicateId("duplicate gallery ids")
        gallery = set(self.gallery)
        for q in self.queries:
            rel = self.relevance.get(q, set())
            if not rel:
                raise InvalidInput(f"query {q!r} has no relevant gallery items")
            if not rel <= gallery:
                raise InvalidInput(f"query {q!r} lists relevant ids outside the gallery")


@dataclass
class TripletTask:
    triplets: list[tuple[str, str, str, str]] = field(default_factory=list)  # (a, p, n, mode)

    def validate(self) -> None:
        if not self.triplets:
            raise InvalidInput("triplet task is empty")
        for a, p, n, mode in self.triplets:
            if mode not in TRIPLET_MODES:
                raise InvalidInput(f"unknown triplet mode {mode!r}")


def load_retrieval_task(path) -> RetrievalTask:
    """Task JSONL: one {"gallery": [...]} line plus one
    {"query": id, "relevant": [...]} line per query."""
    gallery: list[str] | None = None
    queries: list[str] = []
    relevance: dict[str, set[str]] = {}
    for lineno, obj in _jsonl(path):
        if "gallery" in obj:
            if gallery is not None:
                raise FormatError(f"{path}:{lineno}: repeated gallery record")
            gallery = _str_list(obj["gallery"], path, lineno, "gallery")
        elif "query" in obj:
            q = obj["query"]
            if not isinstance(q, str):
                raise FormatError(f"{path}:{lineno}: query must be a string")
            if q in relevance:
                raise DuplicateId(f"{path}:{lineno}: duplicate query {q!r}")
            queries.append(q)
            relevance[q] = set(_str_list(obj.get("relevant"), path, lineno, "relevant"))
        else:
            raise FormatError(f"{path}:{lineno}: expected a gallery or query record")
    if gallery is None:
        raise FormatError(f"{path}: missing gallery record")
    task = RetrievalTask(queries=queries, gallery=gallery, relevance=relevance)
    task.validate()
    return task


def load_triplet_task(path) -> TripletTask:
    """Task JSONL: {"anchor", "positive", "negative", "mode"} per line."""
    rows = []
    for lineno, obj in _jsonl(path):
        try:
            row = (obj["anchor"], obj["positive"], obj["negative"], obj["mode"])
        except KeyError as exc:
            raise FormatError(f"{path}:{lineno}: missing field {exc}") from exc
        if not all(isinstance(x, str) for x in row):
            raise FormatError(f"{path}:{lineno}: fields must be strings")
        if row[3] not in TRIPLET_MODES:
            raise FormatError(f"{path}:{lineno}: unknown mode {row[3]!r}")
        rows.append(row)
    task = TripletTask(triplets=rows)
    task.validate()
    return task


def _jsonl(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
                if not isinstance(obj, dict):
                    raise FormatError(f"{path}:{lineno}: expected an object")
                yield lineno, obj
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def _str_list(val, path, lineno, name) -> list[str]:
    if not isinstance(val, list) or not val or not all(isinstance(x, str) for x in val):
        raise FormatError(f"{path}:{lineno}: {name} must be a non-empty string array")
    return val


# ---------------------------------------------------------------------------
# protocol drivers


def _query_ranking(task: RetrievalTask, bundle, query: str, sink_cfg):
    gallery = sorted(task.gallery)
    scores = np.array([similarity(query, g, bundle, sink_cfg).similarity for g in gallery])
    labels = np.array([1 if g in task.relevance[query] else 0 for g in gallery])
    order = _ranked_order(scores, np.array(gallery))
    return scores, labels, labels[order]


def _retrieval_per_query(task: RetrievalTask, bundle, sink_cfg=None) -> dict[str, dict]:
    task.validate()
    out: dict[str, dict] = {}
    for query in sorted(task.queries):
        scores, labels, ranked = _query_ranking(task, bundle, query, sink_cfg)
        try:
            auc = roc_auc(scores, labels)
        except UndefinedMetric:
            auc = None
        out[query] = {
            "ap": average_precision(scores, labels, tie_key=np.array(sorted(task.gallery))),
            "ndcg": ndcg_from_ranking(ranked),
            "auc": auc,
        }
    return out


def mean_average_precision(task: RetrievalTask, bundle, sink_cfg=None) -> float:
    """Unweighted mean of per-query average precision."""
    per_query = _retrieval_per_query(task, bundle, sink_cfg)
    return float(np.mean([d["ap"] for d in per_query.values()]))


def ndcg(task: RetrievalTask, bundle, sink_cfg=None) -> float:
    """Macro-averaged binary-gain nDCG."""
    per_query = _retrieval_per_query(task, bundle, sink_cfg)
    return float(np.mean([d["ndcg"] for d in per_query.values()]))


def triplet_accuracy(task: TripletTask, bundle, sink_cfg=None) -> dict[str, float]:
    """Accuracy per mode (strict ties-incorrect comparison)."""
    task.validate()
    correct: dict[str, int] = {}
    totals: dict[str, int] = {}
    for a, p, n, mode in task.triplets:
        sim_p = similarity(a, p, bundle, sink_cfg).similarity
        sim_n = similarity(a, n, bundle, sink_cfg).similarity
        totals[mode] = totals.get(mode, 0) + 1
        correct[mode] = correct.get(mode, 0) + (1 if triplet_correct(sim_p, sim_n) else 0)
    return {mode: correct[mode] / totals[mode] for mode in sorted(totals)}


def _verification_rows(pairs: list[PairLabel], bundle, sink_cfg, binary: bool):
    rows = sorted(pairs, key=lambda p: (p.ref_id, p.cand_id))
    if not rows:
        raise InvalidInput("no labeled pairs")
    scores = np.array(
        [similarity(p.ref_id, p.cand_id, bundle, sink_cfg).similarity for p in rows]
    )
    labels = np.array([p.label for p in rows])
    if binary and not np.all(np.isin(labels, (0.0, 1.0))):
        raise InvalidInput("verification labels must be binary 0/1")
    return rows, scores, labels


def run_protocol(
    protocol: str,
    bundle: EmbeddingBundle,
    task: RetrievalTask | TripletTask | None = None,
    pairs: list[PairLabel] | None = None,
    seed: int = 0,
    sink_cfg: SinkhornConfig | None = None,
) -> dict:
    """Run one evaluation protocol and assemble the EvalReport dict.

    The report is a plain dict meant for canonical JSON serialization:
    byte-identical across reruns on the same inputs and independent of
    input record order.
    """
    if protocol not in PROTOCOLS:
        raise InvalidInput(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    metrics: dict = {}
    detail: dict = {}

    if protocol == "RETRIEVAL":
        if not isinstance(task, RetrievalTask):
            raise InvalidInput("RETRIEVAL needs a RetrievalTask")
        per_query = _retrieval_per_query(task, bundle, sink_cfg)
        aucs = [d["auc"] for d in per_query.values() if d["auc"] is not None]
        metrics = {
            "map": float(np.mean([d["ap"] for d in per_query.values()])),
            "mean_ndcg": float(np.mean([d["ndcg"] for d in per_query.values()])),
            "mean_auc": float(np.mean(aucs)) if aucs else None,
            "n_queries": len(per_query),
            "n_auc_undefined": sum(1 for d in per_query.values() if d["auc"] is None),
        }
        detail = {"per_query": per_query}
    elif protocol == "VERIFICATION":
        if pairs is None:
            raise InvalidInput("VERIFICATION needs labeled pairs")
        rows, scores, labels = _verification_rows(pairs, bundle, sink_cfg, binary=True)
        metrics = {
            "ap": average_precision(scores, labels.astype(int)),
            "auc": roc_auc(scores, labels.astype(int)),
        }
        detail = {
            "pairs": [
                {
                    "ref_id": p.ref_id,
                    "cand_id": p.cand_id,
                    "label": int(p.label),
                    "score": float(s),
                }
                for p, s in zip(rows, scores)
            ]
        }
    elif protocol == "TRIPLET":
        if not isinstance(task, TripletTask):
            raise InvalidInput("TRIPLET needs a TripletTask")
        per_mode = triplet_accuracy(task, bundle, sink_cfg)
        counts: dict[str, int] = {}
        for _, _, _, mode in task.triplets:
            counts[mode] = counts.get(mode, 0) + 1
        overall_correct = sum(per_mode[m] * counts[m] for m in per_mode)
        metrics = {
            "accuracy": {m: float(per_mode[m]) for m in per_mode},
            "overall_accuracy": float(overall_correct / len(task.triplets)),
            "n_triplets": len(task.triplets),
        }
        detail = {"per_mode_counts": counts}
    else:  # CORRELATION
        if pairs is None:
            raise InvalidInput("CORRELATION needs labeled pairs")
        rows, scores, labels = _verification_rows(pairs, bundle, sink_cfg, binary=False)
        metrics = {
            "spearman": spearman_rho(scores, labels),
            "kendall_tau_b": kendall_tau_b(scores, labels),
            "n_pairs": len(rows),
        }
        detail = {
            "pairs": [
                {
                    "ref_id": p.ref_id,
                    "cand_id": p.cand_id,
                    "label": float(p.label),
                    "score": float(s),
                }
                for p, s in zip(rows, scores)
            ]
        }

    sink = sink_cfg if sink_cfg is not None else SinkhornConfig()
    params = {
        "protocol": protocol,
        "seed": int(seed),
        "token_kind": bundle.token_kind,
        "sinkhorn": {
            "epsilon": sink.epsilon,
            "max_iters": sink.max_iters,
            "tol": sink.tol,
            "max_tokens": sink.max_tokens,
            "debiased": sink.debiased,
        },
    }
    return {
        "format_version": FORMAT_VERSION,
        "tool_version": __version__,
        "protocol": protocol,
        "seed": int(seed),
        "config_hash": config_hash(params),
        "metrics": metrics,
        "detail": detail,
    }
