"""Two-stage retrieval: exhaustive dense recall, then cross-scorer rerank."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from .encoder import EncoderModel, cross_score_batch, encode_batch
from .events import Claim, EvidenceDoc, ViewKind, view
from .sparse import RankedList

STAGES = ("recall", "rerank")


class MissingSummary(ValueError):
    def __init__(self, doc_id: str):
        super().__init__(f"evidence {doc_id!r} has no event summary")
        self.doc_id = doc_id


class InvalidP(ValueError):
    pass


class InvalidQ(ValueError):
    pass


class InvalidStagePlan(ValueError):
    pass


@dataclass(frozen=True)
class DenseIndex:
    matrix: np.ndarray  # (n, d), rows in ``ids`` order
    ids: tuple[str, ...]  # sorted ascending, so row order doubles as the tiebreak
    fingerprint: str
    texts: tuple[str, ...]  # Full-view text per row, reused by the reranker

    def __len__(self) -> int:
        return len(self.ids)

    def check(self, model: EncoderModel | None = None) -> None:
        if self.matrix.shape[0] != len(self.ids):
            raise ValueError("row count does not match id list")
        if not np.allclose(np.linalg.norm(self.matrix, axis=1), 1.0, atol=1e-12):
            raise ValueError("index rows must be unit vectors")
        if model is not None and model.fingerprint() != self.fingerprint:
            raise ValueError("index was built with a different model")

    def save(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("wb") as f:
            np.savez(f, matrix=self.matrix, ids=np.array(self.ids), texts=np.array(self.texts),
                     fingerprint=np.array(self.fingerprint))

    @classmethod
    def load(cls, path: str | Path) -> "DenseIndex":
        with np.load(Path(path), allow_pickle=False) as z:
            return cls(z["matrix"].copy(), tuple(z["ids"].tolist()), str(z["fingerprint"]),
                       tuple(z["texts"].tolist()))


def _full(summary, owner: str) -> str:
    if summary is None:
        raise MissingSummary(owner)
    return view(summary, ViewKind.FULL)


def build_dense_index(model: EncoderModel, corpus: Sequence[EvidenceDoc]) -> DenseIndex:
    docs = sorted(corpus, key=lambda d: d.id)
    texts = [_full(d.summary, d.id) for d in docs]
    emb = encode_batch(model, texts).emb if docs else np.zeros((0, model.embed_dim))
    emb.flags.writeable = False
    return DenseIndex(emb, tuple(d.id for d in docs), model.fingerprint(), tuple(texts))


def _claim_text(claim: Claim) -> str:
    if claim.summary is None:
        raise MissingSummary(claim.id)
    return view(claim.summary, ViewKind.FULL)


def _top(query_id: str, ids: Sequence[str], scores: np.ndarray, n: int, order_key: np.ndarray) -> RankedList:
    # descending score, then ascending id (order_key holds each row's id rank)
    order = np.lexsort((order_key, -scores))[:n]
    return RankedList(query_id, tuple((ids[i], float(scores[i])) for i in order))


def recall(index: DenseIndex, model: EncoderModel, claim: Claim, p: int) -> RankedList:
    if not 1 <= p <= len(index):
        raise InvalidP(f"p={p} outside [1, {len(index)}]")
    q = encode_batch(model, [_claim_text(claim)]).emb[0]
    scores = index.matrix @ q
    return _top(claim.id, index.ids, scores, p, np.arange(len(index)))


def rerank(
    model: EncoderModel, claim: Claim, candidates: RankedList, q: int, texts: dict[str, str] | DenseIndex
) -> RankedList:
    """Top-q of ``candidates`` by cross score on the Full views of claim and evidence.

    ``texts`` maps evidence id to its Full-view text (a DenseIndex works too).
    """
    if not 1 <= q <= len(candidates):
        raise InvalidQ(f"q={q} outside [1, {len(candidates)}]")
    if isinstance(texts, DenseIndex):
        texts = dict(zip(texts.ids, texts.texts))
    ids = candidates.ids
    scores = cross_score_batch(model, _claim_text(claim), [texts[i] for i in ids])
    key = np.argsort(np.argsort(np.array(ids)))
    return _top(claim.id, ids, scores, q, key)


def retrieve(model: EncoderModel, index: DenseIndex, claim: Claim, p: int, q: int) -> RankedList:
    return retrieve_stages(model, index, claim, p, q)[1]


def retrieve_stages(
    model: EncoderModel, index: DenseIndex, claim: Claim, p: int, q: int
) -> tuple[RankedList, RankedList]:
    """(recall list, rerank list) for one claim."""
    if not 1 <= q < p <= len(index):
        raise InvalidStagePlan(f"need 1 <= q < p <= n, got q={q}, p={p}, n={len(index)}")
    first = recall(index, model, claim, p)
    return first, rerank(model, claim, first, q, index)


# ----------------------------------------------------------------------------
# run files


def write_run_lines(out: TextIO, ranking: RankedList, stage: str) -> None:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    for rank, (doc, score) in enumerate(ranking.items, 1):
        out.write(f"{ranking.query_id} {doc} {rank} {score!r} {stage}\n")


def run_retrieval(
    model: EncoderModel, index: DenseIndex, claims: Iterable[Claim], p: int, q: int, path: str | Path
) -> None:
    """Write both stages for every claim, in claim order, to a run file."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as f:
        for c in claims:
            first, second = retrieve_stages(model, index, c, p, q)
            write_run_lines(f, first, "recall")
            write_run_lines(f, second, "rerank")


def run_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
