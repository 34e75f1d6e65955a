"""Reference implementations used only by the tests.

Each one is written from the formula, without importing the code under test,
so agreement between the two is evidence rather than tautology.
"""

from __future__ import annotations

import math
import re
from collections import Counter

import mpmath
import numpy as np

from daclr.encoder import EncoderModel
from daclr.events import EventSummary, mask_structure
from daclr.objective import Example, LossSpec, objective


# ---------------------------------------------------------------- contrastive loss


def nce_direct(sim_pos: float, sims_neg, tau: float) -> float:
    """-log softmax of the positive, evaluated at 400 significant digits.

    The precision covers logit gaps up to several hundred, where the softmax
    probability differs from 1 only in its 100th digit or so.
    """
    with mpmath.workdps(400):
        logits = [mpmath.mpf(sim_pos) / tau] + [mpmath.mpf(s) / tau for s in sims_neg]
        num = mpmath.e ** logits[0]
        den = mpmath.fsum(mpmath.e**x for x in logits)
        return float(-mpmath.log(num / den))


# ---------------------------------------------------------------- gradient check

VOCAB = ["al", "bo", "cy", "di", "ed", "fa", "go", "hu", "met", "saw", "in", "at"]


def random_summary(rng: np.random.Generator, empty_sent: bool = False) -> EventSummary:
    words = [VOCAB[i] for i in rng.integers(0, len(VOCAB), size=rng.integers(2, 6))]
    text = " ".join(words)
    if empty_sent:
        return EventSummary(text, (), (), text)
    parts = tuple(dict.fromkeys(words[: rng.integers(1, 3)]))
    return EventSummary(text, parts, (), mask_structure(text, parts, ()))


def random_problem(seed: int) -> tuple[EncoderModel, list[Example], float, float]:
    rng = np.random.default_rng(seed)
    H = int(rng.integers(8, 33))
    d = int(rng.integers(2, 9))
    model = EncoderModel(rng.normal(0, 1.5, size=(H, d)), rng.normal(0, 1, size=d), float(rng.normal()))
    batch = []
    for _ in range(int(rng.integers(1, 4))):
        negs = [random_summary(rng, empty_sent=rng.random() < 0.2) for _ in range(int(rng.integers(1, 4)))]
        batch.append(Example(random_summary(rng), random_summary(rng), negs))
    tau = float(rng.uniform(0.2, 1.0))
    beta = float(rng.uniform(0.0, 1.0))
    return model, batch, tau, beta


PARTS = ("full", "sent", "struct", "unit", "total", "rerank")


def _parts(model: EncoderModel, batch, tau: float, beta: float) -> np.ndarray:
    res = objective(model, batch, LossSpec("total", tau=tau, beta=beta), rerank_weight=1.0)
    return np.array([res.parts[k] for k in PARTS])


def finite_difference(model: EncoderModel, batch, tau: float, beta: float, eps: float = 1e-5):
    """Central differences of every loss part w.r.t. every projection entry and the score head.

    Returns arrays with a leading axis indexed like PARTS.
    """
    H, d = model.hash_dim, model.embed_dim
    n = len(PARTS)
    g_proj = np.zeros((n, H, d))
    g_w = np.zeros((n, d))

    def diff(bump) -> np.ndarray:
        hi, lo = model.copy(), model.copy()
        bump(hi, eps)
        bump(lo, -eps)
        return (_parts(hi, batch, tau, beta) - _parts(lo, batch, tau, beta)) / (2 * eps)

    for r in range(H):
        for j in range(d):
            def bump(m, e, r=r, j=j):
                m.projection[r, j] += e
            g_proj[:, r, j] = diff(bump)
    for j in range(d):
        def bump(m, e, j=j):
            m.head_w[j] += e
        g_w[:, j] = diff(bump)

    def bump_b(m, e):
        m.head_b += e
    g_b = diff(bump_b)
    return g_proj, g_w, g_b


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale < 1e-12 else float(np.linalg.norm(a - b) / scale)


def gradient_check(seed: int) -> dict[str, float]:
    """Relative error between analytic and numeric gradients of each loss on one random problem."""
    model, batch, tau, beta = random_problem(seed)
    g_proj, g_w, g_b = finite_difference(model, batch, tau, beta)
    errors = {}
    for i, name in enumerate(PARTS):
        res = objective(model, batch, LossSpec(name, tau=tau, beta=beta))
        analytic = np.concatenate([res.grad.dense_projection(model.hash_dim).ravel(), res.grad.head_w, [res.grad.head_b]])
        numeric = np.concatenate([g_proj[i].ravel(), g_w[i], [g_b[i]]])
        errors[name] = relative_error(analytic, numeric)
    return errors


# ---------------------------------------------------------------- ranking metrics


def brute_metrics(ranking, relevant, k):
    top = list(ranking)[:k]
    hits = [1 if d in relevant else 0 for d in top]
    recall = sum(hits) / len(relevant)
    mrr = 0.0
    for pos in range(len(hits)):
        if hits[pos]:
            mrr = 1.0 / (pos + 1)
            break
    dcg = 0.0
    for pos in range(len(hits)):
        if hits[pos]:
            dcg += 1.0 / math.log2(pos + 2)
    idcg = 0.0
    for pos in range(min(k, len(relevant))):
        idcg += 1.0 / math.log2(pos + 2)
    return recall, mrr, dcg / idcg


# ---------------------------------------------------------------- sparse scoring


def words(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


def bm25_reference(texts: dict[str, str], query: list[str], doc: str, k1=1.2, b=0.75) -> float:
    toks = {d: words(t) for d, t in texts.items()}
    N = len(toks)
    avgdl = sum(len(t) for t in toks.values()) / N
    tf_doc = Counter(toks[doc])
    norm = k1 * (1.0 - b + b * len(toks[doc]) / avgdl)
    total = 0.0
    for q in query:
        tf = tf_doc[q]
        if tf == 0:
            continue
        n = sum(1 for t in toks.values() if q in t)
        idf = math.log((N - n + 0.5) / (n + 0.5) + 1.0)
        total += idf * tf * (k1 + 1.0) / (tf + norm)
    return total


def tfidf_reference(texts: dict[str, str], query: list[str], doc: str) -> float:
    toks = {d: words(t) for d, t in texts.items()}
    N = len(toks)

    def idf(term):
        n = sum(1 for t in toks.values() if term in t)
        return math.log(N / n) if n else 0.0

    def ltc(tokens):
        return {t: (1.0 + math.log(c)) * idf(t) for t, c in Counter(tokens).items()}

    qv = ltc(query)
    dv = ltc(toks[doc])
    qn = math.sqrt(sum(w * w for w in qv.values()))
    dn = math.sqrt(sum(w * w for w in dv.values()))
    if qn == 0.0 or dn == 0.0:
        return 0.0
    return sum(w * dv.get(t, 0.0) for t, w in qv.items()) / (qn * dn)


def borda_reference(lists: list[list[str]], cutoff: int) -> list[tuple[str, int]]:
    tally: dict[str, int] = {}
    for lst in lists:
        for pos, d in enumerate(lst[:cutoff]):
            tally[d] = tally.get(d, 0) + cutoff - pos
    return sorted(tally.items(), key=lambda kv: (-kv[1], kv[0]))[:cutoff]
