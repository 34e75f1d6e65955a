"""End-to-end steps shared by the command line and the acceptance checks.

An output directory collects every artifact of one run::

    data/               dataset files (see ``daclr.data``)
    sparse_index.json   page/unit BM25 + TF-IDF index
    model.ckpt          trained encoder
    dense_index.npz     corpus embeddings for ``model.ckpt``
    curves.csv          one row per training step
    train/              resumable checkpoint + scheduler state
    run.txt             retrieval run (both stages)
    report.csv          metric,k,value
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .config import RunConfig
from .data import Dataset, attach_summaries, load_corpus, save_dataset, synth_dataset
from .encoder import EncoderModel
from .events import Claim
from .metrics import Report, evaluate
from .pipeline import DenseIndex, build_dense_index, run_retrieval
from .sparse import PageIndex, build_page_index
from .trainer import TrainResult, build_pools, train, write_curves

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Layout:
    root: Path

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def sparse_index(self) -> Path:
        return self.root / "sparse_index.json"

    @property
    def model(self) -> Path:
        return self.root / "model.ckpt"

    @property
    def dense_index(self) -> Path:
        return self.root / "dense_index.npz"

    @property
    def curves(self) -> Path:
        return self.root / "curves.csv"

    @property
    def train_dir(self) -> Path:
        return self.root / "train"

    @property
    def run(self) -> Path:
        return self.root / "run.txt"

    @property
    def report(self) -> Path:
        return self.root / "report.csv"


def make_synth(cfg: RunConfig) -> Dataset:
    return synth_dataset(cfg.synth.seed, cfg.synth.n_claims, cfg.synth.n_evidence, cfg.synth.n_clusters)


def load_ready(path: str | Path) -> Dataset:
    """Load a dataset and fill any missing summaries with the offline extractor."""
    ds = load_corpus(path)
    return attach_summaries(ds) if ds.missing_summaries else ds


def page_index_for(cfg: RunConfig, ds: Dataset) -> PageIndex:
    return build_page_index(ds.corpus, k1=cfg.bm25.k1, b=cfg.bm25.b)


def init_model(cfg: RunConfig) -> EncoderModel:
    e = cfg.encoder
    return EncoderModel.init(e.hash_dim, e.embed_dim, seed=cfg.seed, scale=e.init_scale)


def train_on(
    cfg: RunConfig,
    ds: Dataset,
    page_index: PageIndex | None = None,
    model: EncoderModel | None = None,
    out_dir: Path | None = None,
    resume: bool = False,
) -> TrainResult:
    cfg.validate()
    pi = page_index or page_index_for(cfg, ds)
    tr = ds.split("train")
    pools = build_pools(tr, ds.corpus, ds.qrels, pi, cfg.train.K, cfg.preselect.pages, cfg.preselect.per_doc)
    model = model or init_model(cfg)
    return train(cfg.train, tr, ds.split("validation"), ds.corpus, ds.qrels, pools, model, out_dir, resume)


def split_qrels(ds: Dataset, claims: Sequence[Claim]) -> dict[str, set[str]]:
    return {c.id: ds.qrels[c.id] for c in claims if c.id in ds.qrels}


def retrieve_split(
    cfg: RunConfig, ds: Dataset, model: EncoderModel, run_path: Path, split: str = "test",
    index: DenseIndex | None = None,
) -> None:
    index = index or build_dense_index(model, ds.corpus)
    run_retrieval(model, index, ds.split(split), cfg.retrieval.p, cfg.retrieval.q, run_path)


def evaluate_split(
    cfg: RunConfig, ds: Dataset, run_path: Path, split: str = "test", stage: str = "final"
) -> Report:
    return evaluate(run_path, split_qrels(ds, ds.split(split)), cfg.retrieval.ks, stage)


def end_to_end(cfg: RunConfig, out_dir: str | Path, split: str = "test") -> tuple[TrainResult, Report]:
    """synth -> train -> retrieve -> evaluate, writing every artifact under ``out_dir``."""
    lay = Layout(Path(out_dir))
    lay.root.mkdir(parents=True, exist_ok=True)
    ds = make_synth(cfg)
    save_dataset(ds, lay.data)
    result = train_on(cfg, ds)
    result.model.save(lay.model)
    write_curves(result.curve, lay.curves)
    retrieve_split(cfg, ds, result.model, lay.run, split)
    report = evaluate_split(cfg, ds, lay.run, split)
    report.to_csv(lay.report)
    return result, report
