"""Ranking metrics, significance testing, the offline candidate index and the
per-sample latency benchmark."""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import stdtr

from . import heads as H
from . import tensor as T
from .data import Example, TokenizedSet, joint_ids, tokenize
from .errors import ContractError, DataError, UnsupportedHeadError

# ----------------------------------------------------------------------------
# ranks and metrics
# ----------------------------------------------------------------------------


@dataclass
class RankingResult:
    scores: np.ndarray
    gold: int
    rank: int = field(init=False)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not 0 <= self.gold < self.scores.size:
            raise ContractError(f"gold index {self.gold} outside {self.scores.size} candidates")
        self.rank = gold_rank(self.scores, self.gold)


def gold_rank(scores, gold: int) -> int:
    """1-based rank of ``gold``; equal scores rank the lower index first."""
    scores = np.asarray(scores)
    g = scores[gold]
    return 1 + int(np.sum(scores > g)) + int(np.sum(scores[:gold] == g))


def rank_results(score_matrix, gold) -> list[RankingResult]:
    score_matrix = np.asarray(score_matrix, dtype=np.float64)
    return [RankingResult(row, int(g)) for row, g in zip(score_matrix, gold)]


def _require(results):
    if len(results) == 0:
        raise ContractError("metrics need at least one ranking result")


def recall_at_1(results: Sequence[RankingResult]) -> float:
    _require(results)
    return sum(r.rank == 1 for r in results) / len(results)


def mrr(results: Sequence[RankingResult]) -> float:
    _require(results)
    return sum(1.0 / r.rank for r in results) / len(results)


def reciprocal_ranks(results: Sequence[RankingResult]) -> np.ndarray:
    return np.array([1.0 / r.rank for r in results])


def paired_ttest(per_example_a, per_example_b) -> float:
    """Two-tailed p-value of the paired t statistic.

    With zero variance in the differences the test is degenerate: p is 1 when
    the mean difference is zero and 0 otherwise.
    """
    a = np.asarray(per_example_a, dtype=np.float64)
    b = np.asarray(per_example_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"paired_ttest: unpaired inputs {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise ContractError("paired_ttest needs at least two pairs")
    diff = a - b
    mean = diff.mean()
    sd = diff.std(ddof=1)
    if sd == 0.0 or sd < 1e-15 * max(1.0, abs(mean)):
        return 1.0 if mean == 0.0 else 0.0
    t_stat = mean / (sd / math.sqrt(n))
    return float(2.0 * stdtr(n - 1, -abs(t_stat)))


# ----------------------------------------------------------------------------
# model evaluation
# ----------------------------------------------------------------------------


def score_dataset(model, data: TokenizedSet, batch_size: int = 64) -> np.ndarray:
    """(N, K) candidate scores, computed without recording gradients."""
    out = np.empty(data.cand_len.shape)
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            sl = slice(start, start + batch_size)
            out[sl] = model.candidate_scores(data.ctx[sl], data.ctx_len[sl], data.cand[sl], data.cand_len[sl]).data
    return out


def evaluate_model(model, data: TokenizedSet, batch_size: int = 64) -> dict:
    results = rank_results(score_dataset(model, data, batch_size), data.gold)
    return {
        "recall_at_1": recall_at_1(results),
        "mrr": mrr(results),
        "n": len(results),
        "reciprocal_ranks": reciprocal_ranks(results),
    }


def metrics_report(metrics: dict, comparisons: dict[str, float] | None = None) -> dict:
    """Flat report: metrics ×100 for display, plus sample count and p-values."""
    report = {
        "R@1": round(100.0 * metrics["recall_at_1"], 4),
        "MRR": round(100.0 * metrics["mrr"], 4),
        "n": int(metrics["n"]),
    }
    for name, p in (comparisons or {}).items():
        report[f"p_value[{name}]"] = p
    return report


# ----------------------------------------------------------------------------
# candidate index
# ----------------------------------------------------------------------------

INDEX_MAGIC = b"KDRIDX\x00\x01"
INDEX_VERSION = 1
_HEADER = struct.Struct("<8sIIQ32sI")


@dataclass
class CandidateIndex:
    vectors: np.ndarray  # (count, d)
    ids: list[str]
    checksum: str
    version: int = INDEX_VERSION

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise DataError(f"index holds {self.vectors.shape} vectors for {len(self.ids)} ids")

    def __len__(self):
        return len(self.ids)

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def verify(self, model) -> None:
        if model.encoder_checksum() != self.checksum:
            raise DataError("candidate index was built by a different encoder; refusing lookup")

    def scores(self, context_vector, rows=None) -> np.ndarray:
        vec = self.vectors if rows is None else self.vectors[rows]
        return vec @ np.asarray(context_vector, dtype=np.float64)

    def score_contexts(self, model, contexts: Sequence[str]) -> np.ndarray:
        """(len(contexts), count) dot-product scores for raw context texts."""
        self.verify(model)
        ids, lengths = _pad_texts(model, contexts, "context")
        return model.vectors(ids, lengths) @ self.vectors.T

    def save(self, path) -> None:
        ids_blob = json.dumps(self.ids).encode("utf-8")
        header = _HEADER.pack(INDEX_MAGIC, self.version, self.d, len(self), bytes.fromhex(self.checksum), len(ids_blob))
        body = np.ascontiguousarray(self.vectors, dtype="<f8").tobytes()
        Path(path).write_bytes(header + ids_blob + body)

    @classmethod
    def load(cls, path) -> "CandidateIndex":
        raw = Path(path).read_bytes()
        if len(raw) < _HEADER.size:
            raise DataError(f"{path}: truncated index header")
        magic, version, d, count, checksum, n_ids = _HEADER.unpack_from(raw)
        if magic != INDEX_MAGIC or version != INDEX_VERSION:
            raise DataError(f"{path}: not a version-{INDEX_VERSION} candidate index")
        start = _HEADER.size + n_ids
        ids = json.loads(raw[_HEADER.size:start].decode("utf-8"))
        expected = count * d * 8
        if len(raw) - start != expected:
            raise DataError(f"{path}: expected {expected} bytes of vectors, found {len(raw) - start}")
        vectors = np.frombuffer(raw, dtype="<f8", offset=start, count=count * d).reshape(count, d).astype(np.float64)
        return cls(vectors, ids, checksum.hex(), version)


def _pad_texts(model, texts: Sequence[str], side: str):
    limit = model.ctx_max if side == "context" else model.resp_max
    seqs = [tokenize(t, model.vocab, limit, side) for t in texts]
    width = max((s.valid_len for s in seqs), default=1)
    ids = np.zeros((len(seqs), width), dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : s.valid_len] = s.ids
    return ids, np.array([s.valid_len for s in seqs], dtype=np.int64)


def build_candidate_index(model, responses: Sequence[tuple[str, str]], batch_size: int = 256) -> CandidateIndex:
    """Pre-encode ``(id, text)`` responses into their bi-encoder vectors."""
    if model.head.kind != "bi":
        raise UnsupportedHeadError(f"only bi-encoder models can pre-encode candidates, not {model.head.kind!r}")
    width = model.head.d * (3 if model.head.bi_aggregation == "cls_max_mean" else 1)
    chunks = []
    for start in range(0, len(responses), batch_size):
        part = responses[start:start + batch_size]
        ids, lengths = _pad_texts(model, [text for _, text in part], "response")
        chunks.append(model.vectors(ids, lengths))
    vectors = np.concatenate(chunks) if chunks else np.zeros((0, width))
    return CandidateIndex(vectors, [rid for rid, _ in responses], model.encoder_checksum())


# ----------------------------------------------------------------------------
# latency
# ----------------------------------------------------------------------------


@dataclass
class LatencyReport:
    entries: list[dict] = field(default_factory=list)

    def entry(self, head: str, k: int) -> dict:
        for e in self.entries:
            if e["head"] == head and e["k"] == k:
                return e
        raise KeyError((head, k))

    def ratio(self, head: str, k_hi: int, k_lo: int) -> float:
        return self.entry(head, k_hi)["mean_ms"] / self.entry(head, k_lo)["mean_ms"]

    def to_dict(self) -> dict:
        return {"entries": self.entries}


def _candidate_pool(test_set: Sequence[Example]):
    pool = []
    for ex in test_set:
        for j, text in enumerate(ex.candidates):
            pool.append((f"{ex.id}#{j}", text))
    return pool


def benchmark_latency(model, test_set: Sequence[Example], candidate_counts: Sequence[int],
                      n_samples: int = 20, warmup: int = 10, index: CandidateIndex | None = None) -> LatencyReport:
    """Milliseconds per test sample for each candidate count K.

    Candidate sets hold the sample's gold response plus pooled responses from
    the test set.  Bi-encoder timing covers context encoding plus K dot
    products against pre-encoded vectors; cross-encoder timing covers K full
    paired forward passes.  Tokenization is done up front for both.
    """
    if not test_set:
        raise ContractError("benchmark_latency needs a non-empty test set")
    pool = _candidate_pool(test_set)
    texts = dict(pool)
    kind = model.head.kind
    if kind == "bi":
        if index is None:
            index = build_candidate_index(model, pool)
        index.verify(model)
        row_of = {rid: i for i, rid in enumerate(index.ids)}
    report = LatencyReport()
    total = warmup + n_samples
    for k in candidate_counts:
        if k < 1:
            raise ContractError(f"candidate count must be positive, got {k}")
        times = []
        for s in range(total):
            ex = test_set[s % len(test_set)]
            gold_id = f"{ex.id}#{ex.gold}"
            others = [pool[(s * 7919 + j) % len(pool)][0] for j in range(4 * k)]
            cand_ids = [gold_id] + [c for c in others if c != gold_id][: k - 1]
            ctx_ids, ctx_len = _pad_texts(model, [ex.context], "context")
            if kind == "bi":
                rows = np.array([row_of[c] for c in cand_ids])
                t0 = time.perf_counter()
                vec = model.vectors(ctx_ids, ctx_len)[0]
                int(np.argmax(index.vectors[rows] @ vec))
            else:
                seqs = [_pad_texts(model, [texts[c]], "response") for c in cand_ids]
                t0 = time.perf_counter()
                with T.no_grad():
                    scores = [_paired_forward(model, ctx_ids, ctx_len, r_ids, r_len) for r_ids, r_len in seqs]
                int(np.argmax(scores))
            elapsed = (time.perf_counter() - t0) * 1e3
            if s >= warmup:
                times.append(elapsed)
        report.entries.append({
            "head": kind,
            "k": int(k),
            "mean_ms": float(np.mean(times)),
            "median_ms": float(np.median(times)),
            "n": len(times),
            "warmup": warmup,
        })
    return report


def _paired_forward(model, ctx_ids, ctx_len, r_ids, r_len) -> float:
    if model.head.kind == "plain_cross":
        jid, jlen = joint_ids(ctx_ids, ctx_len, r_ids, r_len)
        return float(H.plain_cross_scores(model.encode(jid, jlen), model.head).data[0])
    c = model.encode(ctx_ids, ctx_len)
    r = model.encode(r_ids, r_len)
    return float(H.enhanced_pair_scores(c, r, model.head).data[0])
