"""Inverted index with BM25 and TF-IDF scoring, Borda fusion and preselection."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .events import Claim, EvidenceDoc, EventSummary, ViewKind, view

INDEX_FORMAT_VERSION = 1

_SPLIT_RE = re.compile(r"[^\W_]+")


class EmptyCorpus(ValueError):
    pass


class UnknownDoc(KeyError):
    pass


class QueryMismatch(ValueError):
    pass


class IndexFormatError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase alphanumeric tokens; ``[Mask]`` comes out as ``mask``."""
    return _SPLIT_RE.findall(text.lower())


@dataclass(frozen=True)
class RankedList:
    query_id: str
    items: tuple[tuple[str, float], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "items", tuple((d, float(s)) for d, s in self.items))

    @classmethod
    def from_scores(
        cls, query_id: str, scores: Mapping[str, float], limit: int | None = None
    ) -> "RankedList":
        ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
        if limit is not None:
            ranked = ranked[:limit]
        return cls(query_id, tuple(ranked))

    @property
    def ids(self) -> list[str]:
        return [d for d, _ in self.items]

    def __len__(self) -> int:
        return len(self.items)

    def truncate(self, n: int) -> "RankedList":
        return RankedList(self.query_id, self.items[:n])

    def check(self) -> None:
        ids = self.ids
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate doc ids in ranking")
        for (d1, s1), (d2, s2) in zip(self.items, self.items[1:]):
            if s1 < s2 or (s1 == s2 and d1 > d2):
                raise ValueError(f"ranking out of order at {d1!r}, {d2!r}")


def summary_text(summary: EventSummary | None, raw: str, field: ViewKind | str) -> str:
    if field == "raw":
        return raw
    if summary is None:
        return ""
    try:
        return view(summary, ViewKind(field))
    except ValueError:
        return ""


def doc_text(doc: EvidenceDoc, field: ViewKind | str = ViewKind.FULL) -> str:
    return summary_text(doc.summary, doc.raw_text, field)


@dataclass
class SparseIndex:
    vocabulary: dict[str, int]
    postings: dict[int, list[tuple[str, int]]]
    doc_lengths: dict[str, int]
    doc_count: int
    avg_doc_length: float
    k1: float = 1.2
    b: float = 0.75
    _doc_tf: dict[str, dict[int, int]] = field(default_factory=dict, repr=False)
    _df: dict[int, int] = field(default_factory=dict, repr=False)
    _tfidf_norm: dict[str, float] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self._rebuild_caches()

    def _rebuild_caches(self) -> None:
        self._doc_tf = {d: {} for d in self.doc_lengths}
        for tid, plist in self.postings.items():
            for d, tf in plist:
                self._doc_tf[d][tid] = tf
        self._df = {tid: len(plist) for tid, plist in self.postings.items()}
        self._tfidf_norm = {}
        for d, tfs in self._doc_tf.items():
            sq = 0.0
            for tid, tf in tfs.items():
                w = (1.0 + math.log(tf)) * self.idf_tfidf(tid)
                sq += w * w
            self._tfidf_norm[d] = math.sqrt(sq)

    @classmethod
    def from_texts(
        cls, texts: Mapping[str, str] | Iterable[tuple[str, str]], k1: float = 1.2, b: float = 0.75
    ) -> "SparseIndex":
        items = list(texts.items()) if isinstance(texts, Mapping) else list(texts)
        if not items:
            raise EmptyCorpus("cannot index an empty corpus")
        vocabulary: dict[str, int] = {}
        postings: dict[int, list[tuple[str, int]]] = {}
        doc_lengths: dict[str, int] = {}
        for doc_id, text in items:
            if doc_id in doc_lengths:
                raise ValueError(f"duplicate doc id {doc_id!r}")
            toks = tokenize(text)
            doc_lengths[doc_id] = len(toks)
            for tok, tf in Counter(toks).items():
                tid = vocabulary.setdefault(tok, len(vocabulary))
                postings.setdefault(tid, []).append((doc_id, tf))
        if not any(doc_lengths.values()):
            raise EmptyCorpus("no document has any indexable text")
        avg = sum(doc_lengths.values()) / len(doc_lengths)
        return cls(vocabulary, postings, doc_lengths, len(doc_lengths), avg, k1, b)

    # -- idf variants -------------------------------------------------------

    def idf_bm25(self, tid: int) -> float:
        n = self._df.get(tid, 0)
        return math.log((self.doc_count - n + 0.5) / (n + 0.5) + 1.0)

    def idf_tfidf(self, tid: int) -> float:
        n = self._df.get(tid, 0)
        return math.log(self.doc_count / n) if n else 0.0

    def _require(self, doc: str) -> dict[int, int]:
        try:
            return self._doc_tf[doc]
        except KeyError:
            raise UnknownDoc(doc) from None

    # -- scoring ------------------------------------------------------------

    def bm25_score(self, query: Sequence[str], doc: str) -> float:
        tfs = self._require(doc)
        norm = self.k1 * (1.0 - self.b + self.b * self.doc_lengths[doc] / self.avg_doc_length)
        score = 0.0
        for tok in query:
            tid = self.vocabulary.get(tok)
            tf = tfs.get(tid, 0) if tid is not None else 0
            if tf:
                score += self.idf_bm25(tid) * tf * (self.k1 + 1.0) / (tf + norm)
        return score

    def tfidf_score(self, query: Sequence[str], doc: str) -> float:
        tfs = self._require(doc)
        dnorm = self._tfidf_norm[doc]
        qw: dict[int, float] = {}
        for tok, tf in Counter(query).items():
            tid = self.vocabulary.get(tok)
            if tid is not None:
                qw[tid] = (1.0 + math.log(tf)) * self.idf_tfidf(tid)
        qnorm = math.sqrt(sum(w * w for w in qw.values()))
        if qnorm == 0.0 or dnorm == 0.0:
            return 0.0
        dot = 0.0
        for tid, w in qw.items():
            tf = tfs.get(tid)
            if tf:
                dot += w * (1.0 + math.log(tf)) * self.idf_tfidf(tid)
        return dot / (qnorm * dnorm)

    def _candidates(self, query: Sequence[str]) -> set[str]:
        docs: set[str] = set()
        for tok in set(query):
            tid = self.vocabulary.get(tok)
            if tid is not None:
                docs.update(d for d, _ in self.postings[tid])
        return docs

    def rank(
        self, query: Sequence[str], query_id: str = "", method: str = "bm25", limit: int | None = None
    ) -> RankedList:
        """Docs with a positive score, best first."""
        fn = self.bm25_score if method == "bm25" else self.tfidf_score
        scores = {d: fn(query, d) for d in self._candidates(query)}
        return RankedList.from_scores(query_id, {d: s for d, s in scores.items() if s > 0}, limit)

    # -- persistence --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "daclr-sparse-index",
            "version": INDEX_FORMAT_VERSION,
            "k1": self.k1,
            "b": self.b,
            "doc_count": self.doc_count,
            "avg_doc_length": self.avg_doc_length,
            "vocabulary": self.vocabulary,
            "doc_lengths": self.doc_lengths,
            "postings": {str(t): [[d, tf] for d, tf in pl] for t, pl in self.postings.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SparseIndex":
        if d.get("format") != "daclr-sparse-index" or d.get("version") != INDEX_FORMAT_VERSION:
            raise IndexFormatError("not a supported sparse index file")
        idx = cls(
            vocabulary=dict(d["vocabulary"]),
            postings={int(t): [(doc, int(tf)) for doc, tf in pl] for t, pl in d["postings"].items()},
            doc_lengths={k: int(v) for k, v in d["doc_lengths"].items()},
            doc_count=int(d["doc_count"]),
            avg_doc_length=float(d["avg_doc_length"]),
            k1=float(d["k1"]),
            b=float(d["b"]),
        )
        idx.validate()
        return idx

    def validate(self) -> None:
        if self.doc_count != len(self.doc_lengths):
            raise IndexFormatError("doc_count does not match doc_lengths")
        if self.doc_count and not math.isclose(
            self.avg_doc_length, sum(self.doc_lengths.values()) / self.doc_count, rel_tol=1e-12
        ):
            raise IndexFormatError("avg_doc_length does not match doc_lengths")
        ids = set(self.vocabulary.values())
        for tid, plist in self.postings.items():
            if tid not in ids:
                raise IndexFormatError(f"posting for unknown token id {tid}")
            for doc, _ in plist:
                if doc not in self.doc_lengths:
                    raise IndexFormatError(f"posting references unknown doc {doc!r}")

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SparseIndex":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_index(
    corpus: Sequence[EvidenceDoc], field: ViewKind | str = ViewKind.FULL, k1: float = 1.2, b: float = 0.75
) -> SparseIndex:
    if not corpus:
        raise EmptyCorpus("cannot index an empty corpus")
    return SparseIndex.from_texts([(d.id, doc_text(d, field)) for d in corpus], k1, b)


def bm25_score(index: SparseIndex, query: Sequence[str], doc: str) -> float:
    return index.bm25_score(query, doc)


def tfidf_score(index: SparseIndex, query: Sequence[str], doc: str) -> float:
    return index.tfidf_score(query, doc)


def fuse_rankings(lists: Sequence[RankedList], cutoff: int) -> RankedList:
    """Borda fusion: rank r (0-based) in a list is worth ``cutoff - r`` points.

    Only the first ``cutoff`` entries of each list vote.
    """
    if not lists:
        raise ValueError("need at least one ranking")
    qid = lists[0].query_id
    if any(r.query_id != qid for r in lists):
        raise QueryMismatch("rankings are for different queries")
    points: dict[str, float] = {}
    for r in lists:
        for rank, doc in enumerate(r.ids[:cutoff]):
            points[doc] = points.get(doc, 0.0) + (cutoff - rank)
    return RankedList.from_scores(qid, points, cutoff)


@dataclass
class PageIndex:
    """Page-level and unit-level indexes plus the page -> evidence-unit map."""

    pages: SparseIndex
    units: SparseIndex
    page_units: dict[str, list[str]]

    def to_dict(self) -> dict:
        return {"pages": self.pages.to_dict(), "units": self.units.to_dict(), "page_units": self.page_units}

    @classmethod
    def from_dict(cls, d: dict) -> "PageIndex":
        return cls(SparseIndex.from_dict(d["pages"]), SparseIndex.from_dict(d["units"]),
                   {k: list(v) for k, v in d["page_units"].items()})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PageIndex":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_page_index(
    corpus: Sequence[EvidenceDoc], field: ViewKind | str = ViewKind.FULL, k1: float = 1.2, b: float = 0.75
) -> PageIndex:
    if not corpus:
        raise EmptyCorpus("cannot index an empty corpus")
    page_units: dict[str, list[str]] = {}
    page_text: dict[str, list[str]] = {}
    for d in corpus:
        page_units.setdefault(d.page_id, []).append(d.id)
        page_text.setdefault(d.page_id, []).append(doc_text(d, field))
    pages = SparseIndex.from_texts({p: " ".join(t) for p, t in page_text.items()}, k1, b)
    units = build_index(corpus, field, k1, b)
    return PageIndex(pages, units, page_units)


def preselect(
    index: PageIndex,
    claim: Claim,
    pages: int = 150,
    per_doc: int = 30,
    field: ViewKind | str = ViewKind.FULL,
) -> list[str]:
    """Candidate evidence ids for a claim, in fused TF-IDF + BM25 page order."""
    query_id = claim.id
    q = tokenize(summary_text(claim.summary, claim.raw_text, field))
    if not q:
        return []
    fused = fuse_rankings(
        [
            index.pages.rank(q, query_id, "tfidf", limit=pages),
            index.pages.rank(q, query_id, "bm25", limit=pages),
        ],
        pages,
    )
    out: list[str] = []
    seen: set[str] = set()
    for page in fused.ids:
        units = index.page_units[page]
        scored = sorted(units, key=lambda u: (-index.units.bm25_score(q, u), u))
        for u in scored[:per_doc]:
            if u not in seen:
                seen.add(u)
                out.append(u)
    return out
