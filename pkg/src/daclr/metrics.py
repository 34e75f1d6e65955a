"""Ranking metrics and run-file evaluation against gold relevance judgments."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .sparse import RankedList

METRICS = ("recall", "mrr", "ndcg")
STAGE_CHOICES = ("final", "recall", "rerank")


class ParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class NoOverlap(ValueError):
    pass


def _ids(ranking: RankedList | Sequence[str]) -> list[str]:
    return ranking.ids if isinstance(ranking, RankedList) else list(ranking)


def _check(relevant, k: int) -> None:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        raise ValueError("relevant set must be non-empty")


def recall_at_k(ranking: RankedList | Sequence[str], relevant: set[str], k: int) -> float:
    _check(relevant, k)
    return len(set(_ids(ranking)[:k]) & set(relevant)) / len(relevant)


def mrr_at_k(ranking: RankedList | Sequence[str], relevant: set[str], k: int) -> float:
    _check(relevant, k)
    for i, d in enumerate(_ids(ranking)[:k], 1):
        if d in relevant:
            return 1.0 / i
    return 0.0


def ndcg_at_k(ranking: RankedList | Sequence[str], relevant: set[str], k: int) -> float:
    _check(relevant, k)
    dcg = sum(1.0 / math.log2(i + 1) for i, d in enumerate(_ids(ranking)[:k], 1) if d in relevant)
    ideal = sum(1.0 / math.log2(i + 1) for i in range(1, min(k, len(relevant)) + 1))
    return dcg / ideal


METRIC_FNS = {"recall": recall_at_k, "mrr": mrr_at_k, "ndcg": ndcg_at_k}


# ----------------------------------------------------------------------------
# qrels and run files


def read_qrels(path: str | Path) -> dict[str, set[str]]:
    out: dict[str, set[str]] = {}
    with Path(path).open(encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2 or not all(parts):
                raise ParseError(n, "expected claim_id<TAB>evidence_id")
            out.setdefault(parts[0], set()).add(parts[1])
    return out


@dataclass(frozen=True)
class RunLine:
    claim_id: str
    evidence_id: str
    rank: int
    score: float
    stage: str


def parse_run(lines: Iterable[str]) -> list[RunLine]:
    out = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ParseError(n, f"expected 5 fields, got {len(parts)}")
        cid, eid, rank, score, stage = parts
        try:
            r, s = int(rank), float(score)
        except ValueError:
            raise ParseError(n, "rank must be an integer and score a number") from None
        if r < 1 or not math.isfinite(s):
            raise ParseError(n, "rank must be >= 1 and score finite")
        out.append(RunLine(cid, eid, r, s, stage))
    return out


def read_run(path: str | Path) -> list[RunLine]:
    with Path(path).open(encoding="utf-8") as f:
        return parse_run(f)


def rankings_from_run(lines: Sequence[RunLine], stage: str = "final") -> dict[str, list[str]]:
    """Per-claim ordered evidence ids for one stage of a run.

    ``final`` puts the reranked prefix first and then the rest of the recall
    list in its own order; a single-stage run is used as is.
    """
    if stage not in STAGE_CHOICES:
        raise ValueError(f"unknown stage {stage!r}")
    by: dict[tuple[str, str], list[RunLine]] = {}
    for ln in lines:
        by.setdefault((ln.claim_id, ln.stage), []).append(ln)
    ordered = {key: [x.evidence_id for x in sorted(v, key=lambda x: x.rank)] for key, v in by.items()}
    claims = list(dict.fromkeys(ln.claim_id for ln in lines))
    out = {}
    for c in claims:
        stages = {s: ids for (cid, s), ids in ordered.items() if cid == c}
        if stage != "final":
            if stage in stages:
                out[c] = stages[stage]
            continue
        if set(stages) <= {"recall", "rerank"} and len(stages) == 2:
            head = stages["rerank"]
            seen = set(head)
            out[c] = head + [e for e in stages["recall"] if e not in seen]
        else:
            # one stage (or an unrecognised label): use whatever is there
            out[c] = next(iter(stages.values()))
    return out


@dataclass
class Report:
    values: dict[tuple[str, int], float]
    n_claims: int
    per_claim: dict[str, dict[tuple[str, int], float]]

    def get(self, metric: str, k: int) -> float:
        return self.values[(metric, k)]

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["metric", "k", "value"])
            for (m, k), v in self.values.items():
                w.writerow([m, k, repr(v)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "Report":
        with Path(path).open(newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        return cls({(r["metric"], int(r["k"])): float(r["value"]) for r in rows}, 0, {})

    def table(self) -> str:
        ks = sorted({k for _, k in self.values})
        lines = ["metric  " + "".join(f"{'@' + str(k):>10}" for k in ks)]
        for m in METRICS:
            if any((m, k) in self.values for k in ks):
                lines.append(f"{m:<8}" + "".join(f"{self.values.get((m, k), float('nan')):>10.4f}" for k in ks))
        return "\n".join(lines)


def evaluate_rankings(
    rankings: dict[str, Sequence[str]], qrels: dict[str, set[str]], ks: Sequence[int] = (10, 20, 100)
) -> Report:
    """Macro-averaged metrics over every claim in ``qrels``; absent claims score 0."""
    if not set(rankings) & set(qrels):
        raise NoOverlap("no claim appears in both the run and the qrels")
    per_claim = {}
    for cid, rel in qrels.items():
        ranking = rankings.get(cid, [])
        per_claim[cid] = {(m, k): METRIC_FNS[m](ranking, rel, k) for m in METRICS for k in ks}
    n = len(qrels)
    values = {(m, k): math.fsum(pc[(m, k)] for pc in per_claim.values()) / n for m in METRICS for k in ks}
    return Report(values, n, per_claim)


def evaluate(
    run: str | Path | Sequence[RunLine],
    qrels: dict[str, set[str]],
    ks: Sequence[int] = (10, 20, 100),
    stage: str = "final",
) -> Report:
    lines = read_run(run) if isinstance(run, (str, Path)) else list(run)
    return evaluate_rankings(rankings_from_run(lines, stage), qrels, ks)
