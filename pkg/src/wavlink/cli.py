"""Command-line entry point: ``wavlink <verb> ...``.

Exit codes: 0 success, 1 validation error, 2 numeric failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import SyntheticDatasetSpec, load_dataset_spec, load_run_config, seed_override, split_flat, to_flat
from .data import generate_dataset, load_dataset, save_dataset
from .embedstore import EmbeddingRecord, EmbeddingStore, infer_ladder, read_manifest, write_manifest
from .errors import FormatError, InputError, WavLinkError
from .report import emit_report
from .sweep import MICRO_MODEL, MICRO_TRAIN, evaluate_model, load_grid, run_sweep
from .trainer import embed_pairs, load_checkpoint, model_from_checkpoint, save_checkpoint, train

log = logging.getLogger("wavlink")


def cmd_gen_data(args) -> int:
    spec = load_dataset_spec(args.spec) if args.spec else SyntheticDatasetSpec(seed=seed_override(7))
    ds = generate_dataset(spec)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.items)} items and {len(ds.mcq)} MCQ items to {args.out}")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = load_run_config(args.config) if args.config else split_flat({})
    ds = load_dataset(args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        model_cfg = resume.model_config
    result = train(model_cfg, train_cfg, ds.paired("train"), resume=resume,
                   on_epoch=lambda e: print(json.dumps(e, sort_keys=True)))
    save_checkpoint(result.checkpoint, args.out)
    if args.log:
        Path(args.log).write_text(json.dumps({"config": to_flat(model_cfg, train_cfg), "epochs": result.epoch_log,
                                              "steps": result.step_log}, indent=1) + "\n")
    print(f"saved checkpoint to {args.out}")
    return 0


def cmd_sweep(args) -> int:
    ds = load_dataset(args.data)
    model_cfg, base = MICRO_MODEL, MICRO_TRAIN
    if args.config:
        model_cfg, base = load_run_config(args.config)
    else:
        base = dataclasses.replace(base, seed=seed_override(base.seed))
    grid = load_grid(args.grid)
    cache = args.cache or str(Path(args.out).with_suffix("")) + "_cache"
    report = run_sweep(grid, ds, model_cfg=model_cfg, base=base, cache_dir=cache, workers=args.workers)
    emit_report(report, args.out)
    timing = Path(args.out).with_suffix(".timing.json")
    timing.write_text(json.dumps({"wall_time": report.wall_time, "computed": report.computed}, indent=1) + "\n")
    print(f"{len(report.rows)} rows, {len(report.failures)} failures, computed {len(report.computed)}; "
          f"report at {args.out}")
    return 0 if not report.failures else 2


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    model.eval()
    ds = load_dataset(args.data)
    rows = evaluate_model(model, ds)
    emit_report(rows, args.out)
    if args.markdown:
        emit_report(rows, args.markdown, "markdown", figure=False)
    if args.embeddings:
        items = ds.pool(args.pool)
        audio, _ = embed_pairs(model, ds.paired(args.pool))
        write_manifest((EmbeddingRecord(it.id, v, {"class_id": str(it.class_id), "pool": it.pool})
                        for it, v in zip(items, audio)), args.embeddings)
    print(f"wrote {len(rows)} metric rows to {args.out}")
    return 0


def cmd_store_ingest(args) -> int:
    records = read_manifest(args.input)
    if Path(args.out).exists() and not args.replace:
        store = EmbeddingStore.load(args.out)
    else:
        if not records:
            raise InputError("empty manifest and no existing store")
        dim = len(records[0].vector)
        ladder = [int(x) for x in args.ladder.split(",")] if args.ladder else infer_ladder(dim)
        store = EmbeddingStore(dim, ladder)
    count = store.ingest(records)
    store.save(args.out)
    print(f"stored {count} records in {args.out}")
    return 0


def cmd_store_search(args) -> int:
    store = EmbeddingStore.load(args.store)
    if args.query_id:
        if args.query_id not in store:
            raise InputError(f"unknown id {args.query_id!r}")
        query = store.get(args.query_id).vector
    else:
        try:
            query = np.asarray(json.loads(Path(args.query_file).read_text()), dtype=np.float64)
        except OSError as exc:
            raise FormatError(f"cannot read query {args.query_file}: {exc}") from exc
    hits, stats = store.search(query, args.dim, args.topk)
    for rank, (rid, score) in enumerate(hits, 1):
        print(f"{rank}\t{rid}\t{score:.12f}")
    print(f"# dims_used={stats.dims_used}\tcandidates={stats.candidates}\t"
          f"multiply_accumulate_count={stats.multiply_accumulate_count}\tbytes_scanned={stats.bytes_scanned}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wavlink", description="Desk-scale audio-text dual encoder toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    g.add_argument("--spec", help="dataset spec JSON (defaults built in)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", help="flat JSON of model + training keys")
    t.add_argument("--data", required=True)
    t.add_argument("--resume", help="checkpoint to continue from with a fresh schedule")
    t.add_argument("--out", default="model.wlck")
    t.add_argument("--log", help="write the per-step/per-epoch run log here")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run the design grid")
    s.add_argument("--grid", default="full", help="'full' or a JSON grid file")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="report path (.csv or .md)")
    s.add_argument("--config", help="flat JSON overriding the micro model/training defaults")
    s.add_argument("--cache", help="result cache directory")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="CSV metrics path")
    e.add_argument("--markdown", help="also write a markdown table here")
    e.add_argument("--embeddings", help="write audio embeddings of --pool as an ingest manifest")
    e.add_argument("--pool", default="short")
    e.set_defaults(func=cmd_eval)

    st = sub.add_parser("store", help="nested-embedding store")
    stsub = st.add_subparsers(dest="store_verb", required=True)
    si = stsub.add_parser("ingest")
    si.add_argument("--in", dest="input", required=True)
    si.add_argument("--out", required=True)
    si.add_argument("--ladder", help="comma-separated dims, e.g. 64,32,16,8")
    si.add_argument("--replace", action="store_true", help="start a new store even if --out exists")
    si.set_defaults(func=cmd_store_ingest)
    ss = stsub.add_parser("search")
    ss.add_argument("--store", required=True)
    ss.add_argument("--dim", type=int, required=True)
    ss.add_argument("--topk", type=int, default=10)
    q = ss.add_mutually_exclusive_group(required=True)
    q.add_argument("--query-id")
    q.add_argument("--query-file")
    ss.set_defaults(func=cmd_store_search)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except WavLinkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
