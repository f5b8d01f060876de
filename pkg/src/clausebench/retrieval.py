"""Lexical and vector-proxy retrieval over clause text.

The lexical side is Okapi BM25 over an inverted index. The vector side is a
deterministic TF-IDF proxy: smoothed IDF, L2-normalized sparse vectors, cosine
similarity. Hybrid search fuses cosine with max-normalized BM25.

Tokenization is shared: lowercase, split on anything that is not a letter or
digit, no stemming, no stop list.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

from .canon import digest

BM25_K1 = 1.2
BM25_B = 0.75
DEFAULT_K = 10
POOL_FACTOR = 4
MODES = ("bm25", "hybrid", "vector")

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _docs(clauses) -> list[tuple[str, str]]:
    out = []
    for c in clauses:
        if isinstance(c, tuple):
            out.append((c[0], c[1]))
        else:
            out.append((c.clause_id, c.text))
    return out


class RankedEntry(NamedTuple):
    clause_id: str
    score: float
    rank: int


@dataclass(frozen=True)
class RankedList:
    entries: tuple[RankedEntry, ...]
    mode: str
    k: int

    @property
    def ids(self) -> list[str]:
        return [e.clause_id for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, clause_id: object) -> bool:
        return any(e.clause_id == clause_id for e in self.entries)

    def rank_of(self, clause_id: str) -> int | None:
        for e in self.entries:
            if e.clause_id == clause_id:
                return e.rank
        return None

    @classmethod
    def from_scores(cls, scored: Iterable[tuple[str, float]], mode: str, k: int) -> "RankedList":
        ordered = sorted(((cid, s) for cid, s in scored if s > 0), key=lambda p: (-p[1], p[0]))[:k]
        return cls(tuple(RankedEntry(cid, s, i + 1) for i, (cid, s) in enumerate(ordered)), mode, k)

    @classmethod
    def from_ids(cls, ids: Sequence[str], mode: str = "bm25", k: int | None = None) -> "RankedList":
        n = len(ids)
        return cls(tuple(RankedEntry(cid, float(n - i), i + 1) for i, cid in enumerate(ids)),
                   mode, k if k is not None else max(n, 1))


@dataclass(frozen=True)
class FusionWeights:
    w_vec: float = 0.6
    w_bm25: float = 0.4

    def __post_init__(self):
        if not (0.0 <= self.w_vec <= 1.0 and 0.0 <= self.w_bm25 <= 1.0):
            raise ValueError("fusion weights must lie in [0, 1]")
        if abs(self.w_vec + self.w_bm25 - 1.0) > 1e-9:
            raise ValueError(f"fusion weights must sum to 1, got {self.w_vec} + {self.w_bm25}")


class LexIndex:
    """Inverted index answering BM25-scored queries."""

    name = "bm25"

    def __init__(self, docs: Sequence[tuple[str, str]], k1: float = BM25_K1, b: float = BM25_B):
        if not docs:
            raise ValueError("cannot build a lexical index over an empty corpus")
        self.k1, self.b = k1, b
        self.doc_len: dict[str, int] = {}
        self.postings: dict[str, dict[str, int]] = {}
        for doc_id, text in docs:
            counts = Counter(tokenize(text))
            self.doc_len[doc_id] = sum(counts.values())
            for term, tf in counts.items():
                self.postings.setdefault(term, {})[doc_id] = tf
        self.n_docs = len(self.doc_len)
        self.avgdl = sum(self.doc_len.values()) / self.n_docs

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def scores(self, query: str) -> dict[str, float]:
        """Raw BM25 score per document that matches at least one query term."""
        out: dict[str, float] = {}
        for term in set(tokenize(query)):
            posting = self.postings.get(term)
            if not posting:
                continue
            idf = self.idf(term)
            for doc_id, tf in posting.items():
                norm = self.k1 * (1.0 - self.b + self.b * self.doc_len[doc_id] / self.avgdl)
                out[doc_id] = out.get(doc_id, 0.0) + idf * tf * (self.k1 + 1.0) / (tf + norm)
        return out

    def snapshot(self) -> dict:
        return {
            "version": 1,
            "scorer": "bm25",
            "params": {"k1": self.k1, "b": self.b},
            "doc_len": dict(sorted(self.doc_len.items())),
            "postings": {t: dict(sorted(p.items())) for t, p in sorted(self.postings.items())},
        }

    def digest(self) -> str:
        return digest(self.snapshot())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.snapshot(), sort_keys=True, indent=1))


class VecIndex:
    """TF-IDF vectors with smoothed IDF, compared by cosine."""

    name = "tfidf"

    def __init__(self, docs: Sequence[tuple[str, str]]):
        if not docs:
            raise ValueError("cannot build a vector index over an empty corpus")
        counts = {doc_id: Counter(tokenize(text)) for doc_id, text in docs}
        n = len(counts)
        df = Counter(t for c in counts.values() for t in c)
        self.idf = {t: math.log((1 + n) / (1 + d)) + 1.0 for t, d in df.items()}
        self.vectors = {doc_id: self._normalize(c) for doc_id, c in counts.items()}

    def _normalize(self, counts: Counter) -> dict[str, float]:
        weights = {t: tf * self.idf[t] for t, tf in counts.items() if t in self.idf}
        norm = math.sqrt(sum(w * w for w in weights.values()))
        if norm == 0.0:
            return {}
        return {t: w / norm for t, w in weights.items()}

    def embed(self, text: str) -> dict[str, float]:
        return self._normalize(Counter(tokenize(text)))

    def scores(self, query: str) -> dict[str, float]:
        q = self.embed(query)
        if not q:
            return {}
        out = {}
        for doc_id, vec in self.vectors.items():
            if len(vec) < len(q):
                s = sum(w * q.get(t, 0.0) for t, w in vec.items())
            else:
                s = sum(w * vec.get(t, 0.0) for t, w in q.items())
            if s > 0.0:
                out[doc_id] = s
        return out

    def snapshot(self) -> dict:
        return {
            "version": 1,
            "scorer": "tfidf-cosine",
            "idf": dict(sorted(self.idf.items())),
            "vectors": {d: dict(sorted(v.items())) for d, v in sorted(self.vectors.items())},
        }

    def digest(self) -> str:
        return digest(self.snapshot())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.snapshot(), sort_keys=True, indent=1))


def build_lexical_index(clauses) -> LexIndex:
    return LexIndex(_docs(clauses))


def build_vector_index(clauses) -> VecIndex:
    return VecIndex(_docs(clauses))


def _top(scores: dict[str, float], n: int) -> list[str]:
    return [cid for cid, _ in sorted(scores.items(), key=lambda p: (-p[1], p[0]))[:n]]


def fuse(cos: dict[str, float], bm25: dict[str, float], w_vec: float, w_bm25: float,
         pool: Iterable[str]) -> dict[str, float]:
    """Linear fusion of cosine and max-normalized BM25 over a candidate pool."""
    pool = list(pool)
    max_raw = max((bm25.get(c, 0.0) for c in pool), default=0.0)
    out = {}
    for cid in pool:
        norm = bm25.get(cid, 0.0) / max_raw if max_raw > 0 else 0.0
        out[cid] = w_vec * cos.get(cid, 0.0) + w_bm25 * norm
    return out


def search(lex: LexIndex, vec: VecIndex | None, query: str, mode: str = "bm25",
           k: int = DEFAULT_K, w: FusionWeights | None = None,
           allow_vector: bool = False) -> RankedList:
    if k <= 0:
        raise ValueError(f"k must be >= 1, got {k}")
    if mode not in MODES:
        raise ValueError(f"unknown retrieval mode {mode!r}")
    if mode == "bm25":
        return RankedList.from_scores(lex.scores(query).items(), mode, k)
    if vec is None:
        raise ValueError(f"mode {mode!r} needs a vector index")
    if mode == "vector":
        if not allow_vector:
            raise ValueError("vector-only retrieval is disabled; use bm25 or hybrid")
        return RankedList.from_scores(vec.scores(query).items(), mode, k)
    w = w or FusionWeights()
    bm25 = lex.scores(query)
    cos = vec.scores(query)
    depth = POOL_FACTOR * k
    pool = sorted(set(_top(bm25, depth)) | set(_top(cos, depth)))
    return RankedList.from_scores(fuse(cos, bm25, w.w_vec, w.w_bm25, pool).items(), mode, k)


def rerank_topN(candidates: RankedList, vec: VecIndex, query: str, n: int = 50) -> RankedList:
    """Reorder the first ``n`` entries by TF-IDF cosine; the tail keeps its order."""
    if n <= 0 or not candidates.entries:
        return candidates
    head, tail = candidates.entries[:n], candidates.entries[n:]
    q = vec.embed(query)

    def cosine(cid: str) -> float:
        v = vec.vectors.get(cid, {})
        return sum(w * v.get(t, 0.0) for t, w in q.items())

    rescored = sorted(((e.clause_id, cosine(e.clause_id)) for e in head), key=lambda p: -p[1])
    ordered = rescored + [(e.clause_id, e.score) for e in tail]
    return RankedList(tuple(RankedEntry(cid, s, i + 1) for i, (cid, s) in enumerate(ordered)),
                      candidates.mode, candidates.k)


def self_retrieval_check(lex: LexIndex, vec: VecIndex, clauses, k: int = 5) -> dict[str, tuple]:
    """Query every clause with its own text; report its rank in each index's top-k."""
    out = {}
    for doc_id, text in _docs(clauses):
        lex_ranked = search(lex, None, text, "bm25", k)
        vec_ranked = RankedList.from_scores(vec.scores(text).items(), "vector", k)
        out[doc_id] = (lex_ranked.rank_of(doc_id), vec_ranked.rank_of(doc_id))
    return out


def rank_histogram(check: dict[str, tuple], which: int) -> dict[str, int]:
    """Histogram of ranks (``None`` reported as ``absent``) for index 0=lexical, 1=vector."""
    hist = Counter("absent" if ranks[which] is None else str(ranks[which]) for ranks in check.values())
    return dict(sorted(hist.items()))
