"""Command line: ``daclr <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import workflow as wf
from .config import ConfigError, RunConfig, load_config
from .data import CLAIM_SUMMARIES, EVIDENCE_SUMMARIES, IngestError, load_corpus, save_dataset
from .encoder import CheckpointError, EncoderModel, NumericalError
from .metrics import STAGE_CHOICES, NoOverlap, ParseError
from .pipeline import (
    DenseIndex,
    InvalidP,
    InvalidQ,
    InvalidStagePlan,
    MissingSummary,
    build_dense_index,
    retrieve_stages,
    write_run_lines,
)
from .sparse import EmptyCorpus, PageIndex
from .summarizer import MllmClient, MllmClientConfig, PromptTemplate, TransportError, summarize_batch
from .trainer import CURVE_FIELDS, InsufficientNegatives, read_curves, write_curves

log = logging.getLogger("daclr")

MODULE_ERRORS = (
    ConfigError, IngestError, CheckpointError, NumericalError, ParseError, NoOverlap, InvalidP, InvalidQ,
    InvalidStagePlan, MissingSummary, EmptyCorpus, TransportError, InsufficientNegatives, FileNotFoundError,
    KeyError, ValueError,
)


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.rng_seed = args.seed
    for name, target in (("p", cfg.retrieval), ("q", cfg.retrieval), ("K", cfg.train), ("epochs", cfg.train)):
        value = getattr(args, name, None)
        if value is not None:
            setattr(target, name, value)
    return cfg.validate()


def _layout(args) -> wf.Layout:
    return wf.Layout(Path(args.out_dir))


def _data_dir(args) -> Path:
    return Path(args.data) if getattr(args, "data", None) else _layout(args).data


def _load_model(lay: wf.Layout) -> EncoderModel:
    if not lay.model.exists():
        raise FileNotFoundError(f"{lay.model} not found; run 'daclr train' first")
    return EncoderModel.load(lay.model)


def _dense_index(lay: wf.Layout, model: EncoderModel, ds) -> DenseIndex:
    if lay.dense_index.exists():
        idx = DenseIndex.load(lay.dense_index)
        if idx.fingerprint == model.fingerprint():
            return idx
        log.info("dense index is stale; rebuilding")
    return build_dense_index(model, ds.corpus)


# ----------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg: RunConfig) -> int:
    ds = wf.make_synth(cfg)
    out = _layout(args).data
    save_dataset(ds, out)
    print(f"wrote {len(ds.claims)} claims, {len(ds.corpus)} evidence to {out}")
    return 0


def cmd_ingest(args, cfg: RunConfig) -> int:
    ds = load_corpus(args.source)
    if ds.missing_summaries:
        print(f"{len(ds.missing_summaries)} records lack summaries; run 'daclr summarize' to add them")
    out = _layout(args).data
    save_dataset(ds, out)
    sizes = {k: len(v) for k, v in ds.splits.items()}
    print(f"ingested {len(ds.claims)} claims, {len(ds.corpus)} evidence, splits {sizes} -> {out}")
    return 0


def cmd_summarize(args, cfg: RunConfig) -> int:
    root = _data_dir(args)
    ds = load_corpus(root)
    client = None
    if not args.offline:
        m = cfg.mllm
        client = MllmClient(
            MllmClientConfig(m.base_url, m.model_name, m.api_key_source, m.timeout, m.max_retries,
                             m.retry_backoff, m.max_concurrency),
            PromptTemplate.default(),
        )
    workers = 1 if client is None else cfg.mllm.max_concurrency
    try:
        n = summarize_batch(ds.claims, root / CLAIM_SUMMARIES, client, workers)
        n += summarize_batch(ds.corpus, root / EVIDENCE_SUMMARIES, client, workers)
    finally:
        if client is not None:
            client.close()
    print(f"wrote {n} new summaries under {root}")
    return 0


def cmd_index(args, cfg: RunConfig) -> int:
    lay = _layout(args)
    ds = wf.load_ready(_data_dir(args))
    wf.page_index_for(cfg, ds).save(lay.sparse_index)
    print(f"sparse index -> {lay.sparse_index}")
    if lay.model.exists():
        build_dense_index(EncoderModel.load(lay.model), ds.corpus).save(lay.dense_index)
        print(f"dense index -> {lay.dense_index}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    lay = _layout(args)
    ds = wf.load_ready(_data_dir(args))
    pi = PageIndex.load(lay.sparse_index) if lay.sparse_index.exists() else None
    result = wf.train_on(cfg, ds, pi, out_dir=lay.train_dir, resume=args.resume)
    result.model.save(lay.model)
    write_curves(result.curve, lay.curves)
    build_dense_index(result.model, ds.corpus).save(lay.dense_index)
    last = result.curve[-1] if result.curve else None
    print(f"trained {result.steps} steps; model -> {lay.model}; curves -> {lay.curves}")
    if last is not None:
        print(f"final p_dyn={last.p_dyn:.4f} acc_val={last.acc_val:.4f} loss={last.l_total:.4f}")
    return 0


def cmd_retrieve(args, cfg: RunConfig) -> int:
    lay = _layout(args)
    ds = wf.load_ready(_data_dir(args))
    model = _load_model(lay)
    index = _dense_index(lay, model, ds)
    p, q = cfg.retrieval.p, cfg.retrieval.q
    if args.claim_id:
        _, second = retrieve_stages(model, index, ds.claim(args.claim_id), p, q)
        write_run_lines(sys.stdout, second, "rerank")
        return 0
    run_path = Path(args.run) if args.run else lay.run
    wf.retrieve_split(cfg, ds, model, run_path, args.split, index)
    print(f"run ({args.split}, p={p}, q={q}) -> {run_path}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    lay = _layout(args)
    ds = wf.load_ready(_data_dir(args))
    run_path = Path(args.run) if args.run else lay.run
    report = wf.evaluate_split(cfg, ds, run_path, args.split, args.stage)
    out = Path(args.report) if args.report else lay.report
    report.to_csv(out)
    print(report.table())
    print(f"report ({report.n_claims} claims, stage={args.stage}) -> {out}")
    return 0


def cmd_curves(args, cfg: RunConfig) -> int:
    lay = _layout(args)
    points = read_curves(lay.curves)
    if args.output:
        write_curves(points, args.output)
    elif args.dump:
        write_curves(points, sys.stdout)
    if not points:
        print("no curve points")
        return 0
    n = max(1, len(points) // 10)
    first = np.mean([pt.p_dyn for pt in points[:n]])
    last = np.mean([pt.p_dyn for pt in points[-n:]])
    share0 = np.mean([pt.n_model for pt in points[:n]])
    share1 = np.mean([pt.n_model for pt in points[-n:]])
    print(f"{len(points)} steps; columns: {','.join(CURVE_FIELDS)}", file=sys.stderr)
    print(f"mean p_dyn first/last 10%: {first:.4f} -> {last:.4f}; "
          f"mined negatives {share0:.2f} -> {share1:.2f}", file=sys.stderr)
    return 0


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="overrides seed and train.rng_seed")
    common.add_argument("--out-dir", default="daclr-out", help="artifact directory (default: %(default)s)")
    common.add_argument("-v", "--verbose", action="store_true")

    with_data = argparse.ArgumentParser(add_help=False)
    with_data.add_argument("--data", help="dataset directory (default: OUT_DIR/data)")

    stages = argparse.ArgumentParser(add_help=False)
    stages.add_argument("--p", type=int, help="recall depth")
    stages.add_argument("--q", type=int, help="rerank depth")

    parser = argparse.ArgumentParser(prog="daclr", description="Event-summary contrastive evidence retrieval.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("synth", parents=[common], help="write the synthetic dataset")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("ingest", parents=[common], help="validate a dataset directory and copy it in")
    p.add_argument("source", help="directory with claims.jsonl, evidence.jsonl, qrels.tsv")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("summarize", parents=[common, with_data], help="add event summaries")
    p.add_argument("--offline", action="store_true", help="use the rule-based extractor, no API calls")
    p.set_defaults(fn=cmd_summarize)

    p = sub.add_parser("index", parents=[common, with_data], help="build sparse (and dense) indexes")
    p.set_defaults(fn=cmd_index)

    p = sub.add_parser("train", parents=[common, with_data], help="train the encoder")
    p.add_argument("--K", type=int, help="negatives per claim")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", action="store_true", help="continue from OUT_DIR/train")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("retrieve", parents=[common, with_data, stages], help="write a run file")
    p.add_argument("--claim-id", help="print the final top-q lines for one claim")
    p.add_argument("--split", default="test", choices=["train", "validation", "test"])
    p.add_argument("--run", help="run file path (default: OUT_DIR/run.txt)")
    p.set_defaults(fn=cmd_retrieve)

    p = sub.add_parser("eval", parents=[common, with_data], help="score a run file")
    p.add_argument("--run", help="run file path (default: OUT_DIR/run.txt)")
    p.add_argument("--split", default="test", choices=["train", "validation", "test"])
    p.add_argument("--stage", default="final", choices=STAGE_CHOICES)
    p.add_argument("--report", help="report CSV path (default: OUT_DIR/report.csv)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("curves", parents=[common], help="export and summarise training curves")
    p.add_argument("--output", help="write the curve CSV here")
    p.add_argument("--dump", action="store_true", help="write the curve CSV to stdout")
    p.set_defaults(fn=cmd_curves)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return args.fn(args, cfg)
    except MODULE_ERRORS as e:
        print(f"daclr {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
