"""Dynamic adaptive contrastive training.

Each step measures how well the current model separates positives from the
sampled negatives, smooths that margin, and maps it through a sigmoid
centred on a validation-accuracy-dependent threshold.  The result sets both
the share of model-mined hard negatives and the weight between the
participant/attribute loss and the masked-structure loss.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from .config import TrainConfig
from .encoder import EncoderModel, NumericalError, encode_batch
from .events import Claim, EvidenceDoc, ViewKind, view
from .objective import Example, LossSpec, batch_margin, objective, update_ema
from .sparse import PageIndex, preselect

log = logging.getLogger(__name__)

SIGMOID_CLIP = 30.0


class InsufficientNegatives(ValueError):
    pass


# ----------------------------------------------------------------------------
# schedule


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def compute_mid(acc_val: float, delta_min: float, delta_max: float) -> float:
    if not delta_min < delta_max:
        raise ValueError("delta_min must be < delta_max")
    if not 0.0 <= acc_val <= 1.0:
        log.warning("acc_val %r outside [0, 1]; clamping", acc_val)
        acc_val = min(1.0, max(0.0, acc_val))
    return delta_min + (delta_max - delta_min) * acc_val


def schedule(ema_margin: float, delta_mid: float, tau_s: float) -> tuple[float, float]:
    """(p_dyn, beta).  The logit is clipped to +-30 so p_dyn stays inside (0, 1)."""
    if tau_s <= 0:
        raise ValueError("tau_s must be positive")
    x = (ema_margin - delta_mid) / tau_s
    p = sigmoid(min(SIGMOID_CLIP, max(-SIGMOID_CLIP, x)))
    return p, 1.0 - p


@dataclass
class SchedulerState:
    tau_s: float
    delta_min: float
    delta_max: float
    ema_margin: float = 0.0
    acc_val: float = 0.0
    delta_mid: float = 0.0
    p_dyn: float = 0.5
    beta: float = 0.5
    step: int = 0

    def __post_init__(self) -> None:
        self.delta_mid = compute_mid(self.acc_val, self.delta_min, self.delta_max)
        self.p_dyn, self.beta = schedule(self.ema_margin, self.delta_mid, self.tau_s)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "SchedulerState":
        return cls(cfg.tau_s, cfg.delta_min, cfg.delta_max)

    def observe(self, margin: float, acc_val: float | None = None) -> None:
        """Fold in one batch margin (and a fresh accuracy, if measured) and reschedule."""
        self.step += 1
        self.ema_margin = update_ema(self.ema_margin, margin)
        if acc_val is not None:
            self.acc_val = acc_val
        self.delta_mid = compute_mid(self.acc_val, self.delta_min, self.delta_max)
        self.p_dyn, self.beta = schedule(self.ema_margin, self.delta_mid, self.tau_s)

    def set_accuracy(self, acc_val: float) -> None:
        """Replace acc_val and reschedule without touching the margin average."""
        self.acc_val = acc_val
        self.delta_mid = compute_mid(acc_val, self.delta_min, self.delta_max)
        self.p_dyn, self.beta = schedule(self.ema_margin, self.delta_mid, self.tau_s)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SchedulerState":
        s = cls(d["tau_s"], d["delta_min"], d["delta_max"], d["ema_margin"], d["acc_val"])
        s.step = d["step"]
        return s


# ----------------------------------------------------------------------------
# negatives


@dataclass
class NegativePools:
    d_rand: tuple[str, ...]
    d_tb: dict[str, list[str]]
    d_model: dict[str, list[str]]
    gold: dict[str, frozenset[str]]
    K: int

    def check(self) -> None:
        for pool in (self.d_tb, self.d_model):
            for cid, ids in pool.items():
                if set(ids) & self.gold.get(cid, frozenset()):
                    raise ValueError(f"gold evidence in the pool of claim {cid!r}")


def build_pools(
    claims: Iterable[Claim],
    corpus: Sequence[EvidenceDoc],
    qrels: dict[str, set[str]],
    page_index: PageIndex,
    K: int,
    pages: int = 150,
    per_doc: int = 30,
) -> NegativePools:
    gold = {cid: frozenset(ids) for cid, ids in qrels.items()}
    d_tb = {}
    for c in claims:
        g = gold.get(c.id, frozenset())
        d_tb[c.id] = [e for e in preselect(page_index, c, pages, per_doc) if e not in g]
    return NegativePools(tuple(sorted(d.id for d in corpus)), d_tb, {}, gold, K)


@dataclass
class Allocation:
    ids: list[str]
    n_rand: int
    n_tb: int
    n_model: int


def _draw_random(
    pool: Sequence[str], k: int, exclude: set[str], rng: np.random.Generator
) -> list[str]:
    if k <= 0:
        return []
    n = len(pool)
    take = min(n, k + len(exclude))
    picks = rng.choice(n, size=take, replace=False)
    out = [pool[i] for i in picks if pool[i] not in exclude]
    if len(out) < k:
        # exclusions were dense in the sample: fall back to a full shuffle
        out = [pool[i] for i in rng.permutation(n) if pool[i] not in exclude]
    return out[:k]


def allocate_negatives(
    pools: NegativePools, claim_id: str, p_dyn: float, rng: np.random.Generator, mode: str = "adaptive"
) -> Allocation:
    """K negatives: floor(K*p_dyn) mined, the rest split between random and sparse pools.

    The random and sparse halves get ``rest // 2`` and ``rest - rest // 2``.
    Any pool that runs short is topped up from the random pool.
    """
    K = pools.K
    gold = pools.gold.get(claim_id, frozenset())
    available = (set(pools.d_rand) | set(pools.d_tb.get(claim_id, ())) | set(pools.d_model.get(claim_id, ()))) - gold
    if len(available) < K:
        raise InsufficientNegatives(f"claim {claim_id!r}: {len(available)} negatives available, need {K}")
    if mode == "random":
        ids = _draw_random(pools.d_rand, K, set(gold), rng)
        return Allocation(ids, K, 0, 0)

    chosen: list[str] = []
    taken: set[str] = set(gold)

    def head(lst: Sequence[str], k: int) -> list[str]:
        out = []
        for e in lst:
            if len(out) == k:
                break
            if e not in taken:
                out.append(e)
                taken.add(e)
        return out

    want_model = math.floor(K * p_dyn)
    rest = K - want_model
    want_rand = rest // 2
    want_tb = rest - want_rand
    from_model = head(pools.d_model.get(claim_id, ()), want_model)
    from_tb = head(pools.d_tb.get(claim_id, ()), want_tb)
    n_rand = K - len(from_model) - len(from_tb)
    from_rand = _draw_random(pools.d_rand, n_rand, taken, rng)
    chosen = from_model + from_tb + from_rand
    if len(chosen) < K:
        # the random pool alone cannot cover the shortfall
        extra = head([e for e in (*pools.d_tb.get(claim_id, ()), *pools.d_model.get(claim_id, ()))], K - len(chosen))
        chosen += extra
        return Allocation(chosen, len(from_rand), len(from_tb) + len(extra), len(from_model))
    return Allocation(chosen, len(from_rand), len(from_tb), len(from_model))


# ----------------------------------------------------------------------------
# model-side retrieval helpers


def _full_texts(items) -> list[str]:
    return [view(x.summary, ViewKind.FULL) for x in items]


def corpus_embeddings(model: EncoderModel, corpus: Sequence[EvidenceDoc]) -> tuple[list[str], np.ndarray]:
    docs = sorted(corpus, key=lambda d: d.id)
    return [d.id for d in docs], encode_batch(model, _full_texts(docs)).emb


def retrieval_accuracy(
    model: EncoderModel, claims: Sequence[Claim], corpus: Sequence[EvidenceDoc], qrels: dict[str, set[str]]
) -> float:
    """Fraction of claims whose highest-cosine evidence is gold (ties -> smallest id)."""
    if not claims:
        return 0.0
    ids, E = corpus_embeddings(model, corpus)
    Q = encode_batch(model, _full_texts(claims)).emb
    best = np.argmax(Q @ E.T, axis=1)
    return float(np.mean([ids[b] in qrels.get(c.id, ()) for c, b in zip(claims, best)]))


def mine_hard_negatives(
    model: EncoderModel,
    claims: Sequence[Claim],
    corpus: Sequence[EvidenceDoc],
    qrels: dict[str, set[str]],
    m: int,
) -> dict[str, list[str]]:
    """Top-m non-gold evidence per claim by current Full-view cosine."""
    ids, E = corpus_embeddings(model, corpus)
    Q = encode_batch(model, _full_texts(claims)).emb
    S = Q @ E.T
    out = {}
    for row, c in zip(S, claims):
        order = np.lexsort((np.arange(len(ids)), -row))
        gold = qrels.get(c.id, ())
        picked = []
        for j in order:
            if ids[j] not in gold:
                picked.append(ids[j])
                if len(picked) == m:
                    break
        out[c.id] = picked
    return out


# ----------------------------------------------------------------------------
# curves


@dataclass
class CurvePoint:
    step: int
    delta_t: float
    ema_margin: float
    acc_val: float
    delta_mid: float
    p_dyn: float
    beta: float
    n_rand: float
    n_tb: float
    n_model: float
    l_full: float
    l_sent: float
    l_struct: float
    l_unit: float
    l_total: float


CURVE_FIELDS = [f.name for f in dataclasses.fields(CurvePoint)]


def write_curves(points: Sequence[CurvePoint], dest: str | Path | TextIO) -> None:
    if not isinstance(dest, (str, Path)):
        w = csv.writer(dest, lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        w.writerows([repr(getattr(p, k)) for k in CURVE_FIELDS] for p in points)
        return
    with Path(dest).open("w", newline="", encoding="utf-8") as f:
        write_curves(points, f)


def read_curves(path: str | Path) -> list[CurvePoint]:
    with Path(path).open(newline="", encoding="utf-8") as f:
        r = csv.reader(f)
        header = next(r)
        if header != CURVE_FIELDS:
            raise ValueError(f"unexpected curve header {header}")
        return [CurvePoint(int(row[0]), *map(float, row[1:])) for row in r]


# ----------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: EncoderModel
    curve: list[CurvePoint]
    scheduler: SchedulerState
    pools: NegativePools
    steps: int


def _batches(n: int, batch_size: int, epochs: int, seed: int) -> list[np.ndarray]:
    out = []
    for e in range(epochs):
        perm = np.random.default_rng([seed, e, 2]).permutation(n)
        out.extend(perm[i : i + batch_size] for i in range(0, n, batch_size))
    return out


def _state_path(out_dir: Path) -> Path:
    return out_dir / "train_state.json"


def save_state(out_dir: Path, model: EncoderModel, sched: SchedulerState, pools: NegativePools,
               p_prev: float, curve: list[CurvePoint]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    model.save(out_dir / "checkpoint.ckpt")
    state = {
        "scheduler": sched.to_dict(),
        "p_prev": p_prev,
        "d_model": pools.d_model,
        "curve": [dataclasses.asdict(p) for p in curve],
    }
    tmp = _state_path(out_dir).with_suffix(".tmp")
    tmp.write_text(json.dumps(state, sort_keys=True), encoding="utf-8")
    tmp.replace(_state_path(out_dir))


def train(
    cfg: TrainConfig,
    train_claims: Sequence[Claim],
    val_claims: Sequence[Claim],
    corpus: Sequence[EvidenceDoc],
    qrels: dict[str, set[str]],
    pools: NegativePools,
    model: EncoderModel,
    out_dir: str | Path | None = None,
    resume: bool = False,
) -> TrainResult:
    """Run the training loop; ``model`` is updated in place and returned."""
    cfg.validate()
    docs = {d.id: d for d in corpus}
    sched = SchedulerState.from_config(cfg)
    p_prev = sched.p_dyn
    curve: list[CurvePoint] = []
    out = Path(out_dir) if out_dir is not None else None
    start = 0
    if resume and out is not None and _state_path(out).exists():
        state = json.loads(_state_path(out).read_text(encoding="utf-8"))
        loaded = EncoderModel.load(out / "checkpoint.ckpt")
        model.projection[...] = loaded.projection
        model.head_w[...] = loaded.head_w
        model.head_b = loaded.head_b
        sched = SchedulerState.from_dict(state["scheduler"])
        p_prev = state["p_prev"]
        pools.d_model = {k: list(v) for k, v in state["d_model"].items()}
        curve = [CurvePoint(**p) for p in state["curve"]]
        start = sched.step
        log.info("resuming at step %d", start)

    if start == 0:
        # accuracy of the initial model, so the first steps see a real threshold
        sched.set_accuracy(retrieval_accuracy(model, val_claims, corpus, qrels))
        p_prev = sched.p_dyn
    batches = _batches(len(train_claims), cfg.batch_size, cfg.epochs, cfg.rng_seed)
    for t in range(start + 1, len(batches) + 1):
        claims = [train_claims[i] for i in batches[t - 1]]
        rng_margin = np.random.default_rng([cfg.rng_seed, t, 0])
        rng_loss = np.random.default_rng([cfg.rng_seed, t, 1])
        positives = [docs[sorted(pools.gold[c.id])[0]] for c in claims]

        def examples(p: float, rng) -> tuple[list[Example], list[Allocation]]:
            allocs = [allocate_negatives(pools, c.id, p, rng, cfg.negative_mode) for c in claims]
            exs = [
                Example(c.summary, pos.summary, [docs[e].summary for e in a.ids])
                for c, pos, a in zip(claims, positives, allocs)
            ]
            return exs, allocs

        margin_batch, _ = examples(p_prev, rng_margin)
        delta_t = batch_margin(model, margin_batch)
        acc = retrieval_accuracy(model, val_claims, corpus, qrels) if t % cfg.U_eval == 0 else None
        sched.observe(delta_t, acc)
        beta = sched.beta if cfg.beta_override is None else cfg.beta_override
        batch, allocs = examples(sched.p_dyn, rng_loss)
        spec = LossSpec("total", tau=cfg.temperature, beta=beta, rerank_tau=cfg.rerank_temperature,
                        rerank_body_grad=cfg.rerank_body_grad)
        try:
            res = objective(model, batch, spec, rerank_weight=cfg.rerank_weight)
            g = res.grad
            if len(g.rows):
                model.projection[g.rows] -= cfg.learning_rate * g.projection
            model.head_w -= cfg.learning_rate * g.head_w
            model.head_b -= cfg.learning_rate * g.head_b
            model.check_finite()
        except NumericalError:
            log.error("numerical failure at step %d; last checkpoint kept", t)
            raise
        p_prev = sched.p_dyn
        if t % cfg.U_hard == 0 and cfg.negative_mode == "adaptive":
            pools.d_model.update(mine_hard_negatives(model, train_claims, corpus, qrels, cfg.mine_m))
        n = len(allocs)
        values = [
            delta_t, sched.ema_margin, sched.acc_val, sched.delta_mid, sched.p_dyn, beta,
            sum(a.n_rand for a in allocs) / n, sum(a.n_tb for a in allocs) / n, sum(a.n_model for a in allocs) / n,
            res.parts["full"], res.parts["sent"], res.parts["struct"], res.parts["unit"], res.parts["total"],
        ]
        curve.append(CurvePoint(t, *map(float, values)))
        if out is not None and t % cfg.U_eval == 0:
            save_state(out, model, sched, pools, p_prev, curve)
    return TrainResult(model, curve, sched, pools, len(batches))
