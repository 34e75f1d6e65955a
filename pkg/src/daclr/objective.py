"""Contrastive objectives over event-summary views and their exact gradients."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoder import EncoderModel, NumericalError, backward, encode_batch, joint_text
from .events import EmptyView, EventSummary, ViewKind, view

log = logging.getLogger(__name__)

LOSS_NAMES = ("full", "sent", "struct", "unit", "total", "rerank")


def info_nce(sim_pos: float, sims_neg: Sequence[float], tau: float) -> float:
    """-log softmax of the positive among positive + negatives at temperature tau."""
    return info_nce_grad(sim_pos, sims_neg, tau)[0]


def info_nce_grad(
    sim_pos: float, sims_neg: Sequence[float], tau: float
) -> tuple[float, float, np.ndarray]:
    """Loss and its derivatives w.r.t. the positive and each negative similarity."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    neg = np.asarray(sims_neg, dtype=np.float64)
    if neg.size == 0:
        log.debug("info_nce called with no negatives; returning 0")
        return 0.0, 0.0, neg.copy()
    l0 = sim_pos / tau
    ln = neg / tau
    m = ln.max()
    if l0 >= m:
        # every exponent <= 0; log1p keeps precision when the loss is tiny, while
        # log(1 + s) is exact for the equal-logit case (s = number of negatives)
        w = np.exp(ln - l0)
        s = float(w.sum())
        loss = math.log1p(s) if s < 0.5 else math.log(1.0 + s)
        p_neg = w / (1.0 + s)
        p_pos = 1.0 / (1.0 + s)
    else:
        w = np.exp(ln - m)
        w0 = math.exp(l0 - m)
        s = w0 + w.sum()
        loss = (m - l0) + math.log(s)
        p_neg = w / s
        p_pos = w0 / s
    return loss, (p_pos - 1.0) / tau, p_neg / tau


def loss_unit(l_sent: float, l_struct: float, beta: float) -> float:
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    return beta * l_sent + (1.0 - beta) * l_struct


def total_loss(l_full: float, l_unit: float) -> float:
    return l_full + l_unit


def update_ema(prev: float, delta: float) -> float:
    out = 0.9 * prev + 0.1 * delta
    # rounding can push the blend one ulp past an endpoint (e.g. prev == delta)
    return min(max(out, min(prev, delta)), max(prev, delta))


@dataclass
class Example:
    """One claim with its positive and sampled negative evidence summaries."""

    claim: EventSummary
    positive: EventSummary
    negatives: list[EventSummary]


@dataclass
class Gradients:
    rows: np.ndarray
    projection: np.ndarray  # (len(rows), d)
    head_w: np.ndarray
    head_b: float

    def dense_projection(self, hash_dim: int) -> np.ndarray:
        out = np.zeros((hash_dim, self.projection.shape[1]))
        if len(self.rows):
            out[self.rows] = self.projection
        return out

    def scaled(self, k: float) -> "Gradients":
        return Gradients(self.rows, self.projection * k, self.head_w * k, self.head_b * k)


@dataclass
class ObjectiveResult:
    value: float
    parts: dict[str, float]
    grad: Gradients
    sent_skipped: int = 0


@dataclass(frozen=True)
class LossSpec:
    """Which scalar to differentiate: one of LOSS_NAMES, with its knobs."""

    name: str = "total"
    tau: float = 0.05
    beta: float = 0.5
    rerank_tau: float = 1.0
    scale: float = 1.0
    rerank_body_grad: bool = True

    def __post_init__(self) -> None:
        if self.name not in LOSS_NAMES:
            raise ValueError(f"unknown loss {self.name!r}")

    def view_weights(self) -> dict[ViewKind, float]:
        b = self.beta
        return {
            "full": {ViewKind.FULL: 1.0},
            "sent": {ViewKind.SENT: 1.0},
            "struct": {ViewKind.STRUCT: 1.0},
            "unit": {ViewKind.SENT: b, ViewKind.STRUCT: 1.0 - b},
            "total": {ViewKind.FULL: 1.0, ViewKind.SENT: b, ViewKind.STRUCT: 1.0 - b},
            "rerank": {},
        }[self.name]


def _view_or_none(s: EventSummary, kind: ViewKind) -> str | None:
    try:
        return view(s, kind)
    except EmptyView:
        return None


@dataclass
class _TextTable:
    texts: list[str] = field(default_factory=list)
    where: dict[str, int] = field(default_factory=dict)

    def add(self, t: str) -> int:
        i = self.where.get(t)
        if i is None:
            i = self.where[t] = len(self.texts)
            self.texts.append(t)
        return i


def view_losses(
    model: EncoderModel,
    batch: Sequence[Example],
    tau: float,
    weights: dict[ViewKind, float] | None = None,
) -> tuple[dict[ViewKind, float], Gradients | None, int]:
    """Batch-mean InfoNCE per view; gradient of sum(weights[v] * loss[v]) if weights given.

    A claim whose Sent view is empty contributes 0 to the Sent loss, and
    negatives with an empty Sent view are dropped from that claim's Sent term.
    """
    kinds = (ViewKind.FULL, ViewKind.SENT, ViewKind.STRUCT)
    table = _TextTable()
    plan: list[tuple[ViewKind, int, int, list[int]]] = []
    skipped = 0
    for kind in kinds:
        for ex in batch:
            c, p = _view_or_none(ex.claim, kind), _view_or_none(ex.positive, kind)
            if c is None or p is None:
                skipped += 1
                continue
            negs = [t for t in (_view_or_none(n, kind) for n in ex.negatives) if t is not None]
            plan.append((kind, table.add(c), table.add(p), [table.add(t) for t in negs]))
    enc = encode_batch(model, table.texts)
    emb = enc.emb
    n = max(len(batch), 1)
    losses = {k: 0.0 for k in kinds}
    d_emb = np.zeros_like(emb) if weights else None
    for kind, ci, pi, nis in plan:
        ec = emb[ci]
        sp = float(ec @ emb[pi])
        sn = emb[nis] @ ec if nis else np.zeros(0)
        loss, gp, gn = info_nce_grad(sp, sn, tau)
        losses[kind] += loss / n
        w = weights.get(kind, 0.0) if weights else 0.0
        if w:
            k = w / n
            d_emb[ci] += k * (gp * emb[pi] + (gn @ emb[nis] if nis else 0.0))
            d_emb[pi] += k * gp * ec
            if nis:
                np.add.at(d_emb, nis, k * gn[:, None] * ec[None, :])
    if not weights:
        return losses, None, skipped
    rows, g = backward(enc, d_emb)
    d = model.embed_dim
    return losses, Gradients(rows, g, np.zeros(d), 0.0), skipped


def rerank_loss(
    model: EncoderModel, batch: Sequence[Example], tau: float = 1.0, want_grad: bool = True, body_grad: bool = True
) -> tuple[float, Gradients | None]:
    """InfoNCE over cross-scorer outputs (positive vs the sampled negatives)."""
    table = _TextTable()
    plan = []
    for ex in batch:
        c = ex.claim.summary
        pi = table.add(joint_text(c, ex.positive.summary))
        nis = [table.add(joint_text(c, ng.summary)) for ng in ex.negatives]
        plan.append((pi, nis))
    enc = encode_batch(model, table.texts)
    scores = enc.emb @ model.head_w + model.head_b
    n = max(len(batch), 1)
    total = 0.0
    d_s = np.zeros(len(table.texts))
    for pi, nis in plan:
        loss, gp, gn = info_nce_grad(scores[pi], scores[nis], tau)
        total += loss / n
        d_s[pi] += gp / n
        if nis:
            np.add.at(d_s, nis, gn / n)
    if not want_grad:
        return total, None
    g_w = d_s @ enc.emb
    g_b = float(d_s.sum())
    if body_grad:
        rows, g = backward(enc, np.outer(d_s, model.head_w))
    else:
        rows, g = np.zeros(0, dtype=np.int64), np.zeros((0, model.embed_dim))
    return total, Gradients(rows, g, g_w, g_b)


def _merge(a: Gradients, b: Gradients) -> Gradients:
    rows = np.union1d(a.rows, b.rows)
    g = np.zeros((len(rows), a.projection.shape[1]))
    if len(a.rows):
        g[np.searchsorted(rows, a.rows)] += a.projection
    if len(b.rows):
        g[np.searchsorted(rows, b.rows)] += b.projection
    return Gradients(rows, g, a.head_w + b.head_w, a.head_b + b.head_b)


def _check(grad: Gradients, value: float) -> None:
    if not math.isfinite(value):
        raise NumericalError("loss")
    if not np.all(np.isfinite(grad.projection)):
        raise NumericalError("projection")
    if not (np.all(np.isfinite(grad.head_w)) and math.isfinite(grad.head_b)):
        raise NumericalError("score_head")


def objective(
    model: EncoderModel,
    batch: Sequence[Example],
    spec: LossSpec,
    rerank_weight: float = 0.0,
) -> ObjectiveResult:
    """Evaluate every loss component and differentiate the one named by ``spec``.

    With ``rerank_weight`` > 0 the cross-scorer loss is added to the
    differentiated scalar (outside ``parts['total']``).
    """
    weights = {k: w * spec.scale for k, w in spec.view_weights().items()}
    losses, g, skipped = view_losses(model, batch, spec.tau, weights or None)
    parts = {
        "full": losses[ViewKind.FULL],
        "sent": losses[ViewKind.SENT],
        "struct": losses[ViewKind.STRUCT],
    }
    parts["unit"] = loss_unit(parts["sent"], parts["struct"], spec.beta)
    parts["total"] = total_loss(parts["full"], parts["unit"])
    d = model.embed_dim
    if g is None:
        g = Gradients(np.zeros(0, dtype=np.int64), np.zeros((0, d)), np.zeros(d), 0.0)
    rr_w = spec.scale if spec.name == "rerank" else rerank_weight
    if rr_w or spec.name == "rerank":
        rr, rg = rerank_loss(model, batch, spec.rerank_tau, True, spec.rerank_body_grad)
        parts["rerank"] = rr
        if rr_w:
            g = _merge(g, rg.scaled(rr_w))
    value = spec.scale * parts[spec.name]
    if spec.name != "rerank" and rerank_weight:
        value += rerank_weight * parts["rerank"]
    _check(g, value)
    return ObjectiveResult(value, parts, g, skipped)


def grad_params(model: EncoderModel, loss: LossSpec | str, batch: Sequence[Example]) -> tuple[float, Gradients]:
    """Value and exact gradient of one named loss w.r.t. projection and score head."""
    spec = LossSpec(loss) if isinstance(loss, str) else loss
    res = objective(model, batch, spec)
    return res.value, res.grad


def loss_view(
    model: EncoderModel,
    kind: ViewKind,
    claim: EventSummary,
    positive: EventSummary,
    negatives: Sequence[EventSummary],
    tau: float,
) -> float:
    losses, _, _ = view_losses(model, [Example(claim, positive, list(negatives))], tau)
    return losses[ViewKind(kind)]


def loss_full(model, claim, positive, negatives, tau):
    return loss_view(model, ViewKind.FULL, claim, positive, negatives, tau)


def loss_sent(model, claim, positive, negatives, tau):
    return loss_view(model, ViewKind.SENT, claim, positive, negatives, tau)


def loss_struct(model, claim, positive, negatives, tau):
    return loss_view(model, ViewKind.STRUCT, claim, positive, negatives, tau)


def batch_margin(model: EncoderModel, batch: Sequence[Example]) -> float:
    """Mean over claims of cos(claim, positive) - mean cos(claim, negatives), Full view."""
    if not batch:
        raise ValueError("empty batch")
    table = _TextTable()
    plan = []
    for ex in batch:
        if not ex.negatives:
            raise ValueError("every claim needs at least one sampled negative")
        plan.append(
            (
                table.add(ex.claim.summary),
                table.add(ex.positive.summary),
                [table.add(n.summary) for n in ex.negatives],
            )
        )
    emb = encode_batch(model, table.texts).emb
    gaps = [float(emb[c] @ emb[p]) - float(np.mean(emb[ns] @ emb[c])) for c, p, ns in plan]
    return float(np.mean(gaps))
