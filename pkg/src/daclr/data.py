"""Dataset files: ingestion, persistence and a synthetic cluster-structured corpus.

A dataset directory holds::

    claims.jsonl                {"id", "text"}
    evidence.jsonl              {"id", "modality", "text", "image_path"?, "page"?}
    qrels.tsv                   claim_id <TAB> evidence_id
    splits.json                 {"train": [...], "validation": [...], "test": [...]}
    claim_summaries.jsonl       {"id", "summary", "participants", "attributes", "structure"}
    evidence_summaries.jsonl    same shape, keyed by evidence id
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

from .events import Claim, EventSummary, EvidenceDoc, Modality, validate_summary
from .summarizer import fallback_extract

log = logging.getLogger(__name__)

CLAIMS = "claims.jsonl"
EVIDENCE = "evidence.jsonl"
QRELS = "qrels.tsv"
SPLITS = "splits.json"
CLAIM_SUMMARIES = "claim_summaries.jsonl"
EVIDENCE_SUMMARIES = "evidence_summaries.jsonl"
SPLIT_NAMES = ("train", "validation", "test")


class IngestError(ValueError):
    def __init__(self, file: str | Path, line: int | None, msg: str):
        where = f"{file}:{line}" if line is not None else str(file)
        super().__init__(f"{where}: {msg}")
        self.file = str(file)
        self.line = line


Qrels = dict[str, set[str]]


@dataclass
class Dataset:
    claims: list[Claim]
    corpus: list[EvidenceDoc]
    qrels: Qrels
    splits: dict[str, list[str]]
    missing_summaries: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._claims = {c.id: c for c in self.claims}
        self._docs = {d.id: d for d in self.corpus}

    def claim(self, cid: str) -> Claim:
        return self._claims[cid]

    def doc(self, did: str) -> EvidenceDoc:
        return self._docs[did]

    def split(self, name: str) -> list[Claim]:
        return [self._claims[c] for c in self.splits.get(name, [])]

    def check(self) -> None:
        """Raise ValueError if the Dataset invariants do not hold."""
        if len(self._claims) != len(self.claims):
            raise ValueError("duplicate claim ids")
        if len(self._docs) != len(self.corpus):
            raise ValueError("duplicate evidence ids")
        for cid, rel in self.qrels.items():
            if cid not in self._claims:
                raise ValueError(f"qrels claim {cid!r} unknown")
            if not rel:
                raise ValueError(f"claim {cid!r} has no relevant evidence")
            for e in rel:
                if e not in self._docs:
                    raise ValueError(f"qrels evidence {e!r} unknown")
        seen: set[str] = set()
        for name in SPLIT_NAMES:
            ids = set(self.splits.get(name, []))
            if ids & seen:
                raise ValueError("splits overlap")
            seen |= ids
        if set(self.qrels) - seen:
            raise ValueError("some qrels claims are in no split")


# ----------------------------------------------------------------------------
# reading


def _jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    with path.open(encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise IngestError(path, n, f"invalid JSON: {e.msg}") from None
            if not isinstance(rec, dict):
                raise IngestError(path, n, "expected a JSON object")
            yield n, rec


def _nonempty_id(rec: dict, path: Path, n: int) -> str:
    rid = rec.get("id")
    if not isinstance(rid, str) or not rid.strip():
        raise IngestError(path, n, "missing or empty 'id'")
    return rid


def _read_summaries(path: Path) -> dict[str, EventSummary]:
    out: dict[str, EventSummary] = {}
    if not path.exists():
        return out
    for n, rec in _jsonl(path):
        rid = _nonempty_id(rec, path, n)
        try:
            s = EventSummary.from_dict(rec)
        except (KeyError, TypeError) as e:
            raise IngestError(path, n, f"bad summary record: {e}") from None
        check = validate_summary(s)
        if not check.ok:
            raise IngestError(path, n, "; ".join(check.violations))
        out[rid] = s
    return out


def default_splits(claim_ids: list[str], fractions=(0.6, 0.2, 0.2)) -> dict[str, list[str]]:
    """Deterministic split by hashed id, independent of file order."""
    order = sorted(claim_ids, key=lambda c: hashlib.sha256(c.encode()).hexdigest())
    n = len(order)
    a = round(n * fractions[0])
    b = a + round(n * fractions[1])
    return {"train": order[:a], "validation": order[a:b], "test": order[b:]}


def load_corpus(path: str | Path) -> Dataset:
    root = Path(path)
    cpath, epath, qpath = root / CLAIMS, root / EVIDENCE, root / QRELS
    for p in (cpath, epath, qpath):
        if not p.exists():
            raise IngestError(p, None, "file not found")

    claim_sums = _read_summaries(root / CLAIM_SUMMARIES)
    ev_sums = _read_summaries(root / EVIDENCE_SUMMARIES)
    missing: list[str] = []

    claims: list[Claim] = []
    claim_ids: set[str] = set()
    for n, rec in _jsonl(cpath):
        cid = _nonempty_id(rec, cpath, n)
        if cid in claim_ids:
            raise IngestError(cpath, n, f"duplicate claim id {cid!r}")
        text = rec.get("text")
        if not isinstance(text, str):
            raise IngestError(cpath, n, "missing 'text'")
        claim_ids.add(cid)
        s = claim_sums.get(cid)
        if s is None:
            missing.append(cid)
        claims.append(Claim(cid, text, s))

    corpus: list[EvidenceDoc] = []
    doc_ids: set[str] = set()
    for n, rec in _jsonl(epath):
        did = _nonempty_id(rec, epath, n)
        if did in doc_ids:
            raise IngestError(epath, n, f"duplicate evidence id {did!r}")
        try:
            modality = Modality(rec.get("modality", "text"))
        except ValueError:
            raise IngestError(epath, n, f"unknown modality {rec.get('modality')!r}") from None
        text = rec.get("text", "") or ""
        media = rec.get("image_path")
        if modality is Modality.IMAGE and not media:
            raise IngestError(epath, n, "image evidence needs 'image_path'")
        if modality is not Modality.IMAGE and not text.strip():
            raise IngestError(epath, n, f"{modality.value} evidence needs non-empty 'text'")
        page = rec.get("page")
        doc_ids.add(did)
        s = ev_sums.get(did)
        if s is None:
            missing.append(did)
        corpus.append(EvidenceDoc(did, modality, text, media, s, page))

    qrels: Qrels = {}
    with qpath.open(encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 2:
                raise IngestError(qpath, n, "expected claim_id<TAB>evidence_id")
            cid, did = parts[0].strip(), parts[1].strip()
            if cid not in claim_ids:
                raise IngestError(qpath, n, f"unknown claim id {cid!r}")
            if did not in doc_ids:
                raise IngestError(qpath, n, f"unknown evidence id {did!r}")
            qrels.setdefault(cid, set()).add(did)

    spath = root / SPLITS
    if spath.exists():
        try:
            raw = json.loads(spath.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise IngestError(spath, e.lineno, f"invalid JSON: {e.msg}") from None
        splits = {k: list(raw.get(k, [])) for k in SPLIT_NAMES}
        for k, ids in splits.items():
            bad = [c for c in ids if c not in claim_ids]
            if bad:
                raise IngestError(spath, None, f"split {k!r} has unknown claim {bad[0]!r}")
    else:
        log.info("no %s; using hashed default split", SPLITS)
        splits = default_splits(sorted(qrels))

    ds = Dataset(claims, corpus, qrels, splits, missing)
    try:
        ds.check()
    except ValueError as e:
        raise IngestError(root, None, str(e)) from None
    if missing:
        log.warning("%d records have no event summary", len(missing))
    return ds


def attach_summaries(ds: Dataset) -> Dataset:
    """Fill missing summaries with the rule-based extractor.

    Items with no text (images without a caption) cannot be summarised
    offline; they stay in ``missing_summaries`` for the MLLM client.
    """
    still_missing: list[str] = []

    def fill(x):
        if x.summary:
            return x
        if not x.raw_text.strip():
            still_missing.append(x.id)
            return x
        return replace(x, summary=fallback_extract(x.raw_text))

    claims = [fill(c) for c in ds.claims]
    corpus = [fill(d) for d in ds.corpus]
    if still_missing:
        log.warning("%d items have no text to summarise offline: %s", len(still_missing), still_missing[:5])
    return Dataset(claims, corpus, ds.qrels, ds.splits, still_missing)


# ----------------------------------------------------------------------------
# writing


def _write_jsonl(path: Path, records) -> None:
    with path.open("w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")


def save_dataset(ds: Dataset, path: str | Path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    _write_jsonl(root / CLAIMS, ({"id": c.id, "text": c.raw_text} for c in ds.claims))

    def ev(d: EvidenceDoc) -> dict:
        r = {"id": d.id, "modality": Modality(d.modality).value, "text": d.raw_text}
        if d.media_path:
            r["image_path"] = d.media_path
        if d.page is not None:
            r["page"] = d.page
        return r

    _write_jsonl(root / EVIDENCE, (ev(d) for d in ds.corpus))
    with (root / QRELS).open("w", encoding="utf-8") as f:
        for cid in sorted(ds.qrels):
            for did in sorted(ds.qrels[cid]):
                f.write(f"{cid}\t{did}\n")
    (root / SPLITS).write_text(
        json.dumps({k: ds.splits.get(k, []) for k in SPLIT_NAMES}, indent=1) + "\n", encoding="utf-8"
    )
    _write_jsonl(
        root / CLAIM_SUMMARIES, ({"id": c.id, **c.summary.to_dict()} for c in ds.claims if c.summary)
    )
    _write_jsonl(
        root / EVIDENCE_SUMMARIES, ({"id": d.id, **d.summary.to_dict()} for d in ds.corpus if d.summary)
    )


# ----------------------------------------------------------------------------
# synthetic data

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "gr", "kr", "tr", "st"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ei", "ou"]
_CODAS = ["", "n", "r", "l", "s", "k", "th", "x"]

# claim-side and evidence-side wording for each event type; the two sides never
# share the event words, so matching them has to be learned
EVENT_TYPES: list[tuple[str, str]] = [
    ("signed a pact with", "inked an accord alongside"),
    ("sued", "filed litigation against"),
    ("defeated", "won a match against"),
    ("hired", "recruited"),
    ("praised", "commended"),
    ("insulted", "verbally attacked"),
    ("funded", "bankrolled"),
    ("married", "wed"),
    ("debated", "argued publicly with"),
    ("rescued", "pulled clear"),
    ("photographed", "took pictures showing"),
    ("interviewed", "questioned live"),
]

_CLAIM_TEMPLATE = "{a} {verb} {b} in {place} during {year}"
_EVIDENCE_TEMPLATES = [
    "reports say {a} {verb} {b} at {place} around {year}",
    "records show {a} {verb} {b} at {place} around {year}",
]


def _pseudo_words(rng: random.Random, n: int, taken: set[str], syllables: tuple[int, int]) -> list[str]:
    out: list[str] = []
    while len(out) < n:
        w = "".join(
            rng.choice(_ONSETS) + rng.choice(_VOWELS) + rng.choice(_CODAS)
            for _ in range(rng.randint(*syllables))
        )
        if w not in taken and len(w) >= 4:
            taken.add(w)
            out.append(w)
    return out


def synth_dataset(
    seed: int = 1,
    n_claims: int = 200,
    n_evidence: int = 1000,
    n_clusters: int = 8,
    names_per_cluster: int = 12,
    places_per_cluster: int = 4,
) -> Dataset:
    """Cluster-structured claims and evidence with lexical near-miss distractors.

    Each claim states an event (two people, a place, a year, an event type).
    Its gold evidence restates the event with the evidence-side wording.
    Distractors are near-misses (same people, place and year, different
    event type), same-event-type reports about other people of the cluster,
    and reports from other clusters.
    """
    if n_clusters < 2:
        raise ValueError("n_clusters must be >= 2")
    if n_evidence < n_claims:
        raise ValueError("need at least one evidence item per claim")
    rng = random.Random(seed)
    taken = {w for pair in EVENT_TYPES for phrase in pair for w in phrase.split()}
    taken |= {"reports", "say", "records", "show", "at", "around", "in", "during"}

    clusters = []
    for c in range(n_clusters):
        firsts = _pseudo_words(rng, names_per_cluster, taken, (2, 2))
        lasts = _pseudo_words(rng, names_per_cluster, taken, (2, 3))
        people = [f"{f.capitalize()} {l.capitalize()}" for f, l in zip(firsts, lasts)]
        places = _pseudo_words(rng, places_per_cluster, taken, (2, 3))
        years = list(range(1700 + 40 * c, 1700 + 40 * c + 30))
        clusters.append((people, places, years))

    def claim_text(ev) -> str:
        a, b, place, year, t = ev
        return _CLAIM_TEMPLATE.format(a=a, b=b, verb=EVENT_TYPES[t][0], place=place, year=year)

    def evidence_text(ev) -> str:
        a, b, place, year, t = ev
        tmpl = rng.choice(_EVIDENCE_TEMPLATES)
        return tmpl.format(a=a, b=b, verb=EVENT_TYPES[t][1], place=place, year=year)

    events: set[tuple] = set()
    # (people pair, place, year) identifies a scene; at most one claim per scene
    scenes: set[tuple] = set()

    def new_event(cl: int, t: int | None = None):
        people, places, years = clusters[cl]
        while True:
            a, b = rng.sample(people, 2)
            scene = (a, b, rng.choice(places), rng.choice(years))
            ev = (*scene, rng.randrange(len(EVENT_TYPES)) if t is None else t)
            if ev not in events and scene not in scenes:
                events.add(ev)
                return ev

    claims: list[Claim] = []
    corpus_events: list[tuple] = []
    qrels: Qrels = {}
    claim_events = []
    for i in range(n_claims):
        cl = i % n_clusters
        ev = new_event(cl)
        scenes.add(ev[:4])
        claim_events.append((cl, ev))
    n_distract = n_evidence - n_claims
    distract = []
    for j in range(n_distract):
        cl, ev = claim_events[j % n_claims]
        kind = (j // n_claims) % 4
        if kind in (0, 1):
            # near miss: same scene, another event type
            others = [t for t in range(len(EVENT_TYPES)) if (*ev[:4], t) not in events]
            t = rng.choice(others)
            d = (*ev[:4], t)
            events.add(d)
        elif kind == 2:
            d = new_event(cl, ev[4])
        else:
            d = new_event(rng.choice([k for k in range(n_clusters) if k != cl]))
        distract.append(d)

    docs: list[tuple[str, tuple]] = []
    for i, (cl, ev) in enumerate(claim_events):
        cid = f"c{i:05d}"
        claims.append(Claim(cid, claim_text(ev)))
        corpus_events.append(ev)
    all_events = list(corpus_events) + distract
    order = list(range(len(all_events)))
    rng.shuffle(order)
    doc_id_of: dict[int, str] = {}
    corpus: list[EvidenceDoc] = []
    for pos, k in enumerate(order):
        did = f"e{pos:05d}"
        doc_id_of[k] = did
        docs.append((did, all_events[k]))
    for pos, (did, ev) in enumerate(docs):
        text = evidence_text(ev)
        corpus.append(EvidenceDoc(did, Modality.TEXT, text, None, fallback_extract(text)))
    for i in range(n_claims):
        qrels[f"c{i:05d}"] = {doc_id_of[i]}
    claims = [replace(c, summary=fallback_extract(c.raw_text)) for c in claims]
    splits = default_splits([c.id for c in claims])
    ds = Dataset(claims, corpus, qrels, splits)
    ds.check()
    return ds
