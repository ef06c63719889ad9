"""Command-line entry point.

Every subcommand accepts ``--config FILE`` (JSON). Keys in the file fill in
options that were not given on the command line; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path


from . import __version__
from .curation import DEFAULT_K, curate, experts_from_files, retention_curve
from .datagen import GenSpec
from .errors import UnitrieveError
from .evaluation import run_protocol
from .formats import FORMAT_VERSION, read_dataset, write_json, write_jsonl
from .nnn import DEFAULT_ALPHA, DEFAULT_KAPPA, NnnConfig
from .pipeline import (
    OUT_DIR_ENV,
    STAGES,
    PipelineConfig,
    load_masked_dataset,
    run_pipeline,
    stage_gen,
    stage_project,
    write_experts,
)
from .trainer import CHECKPOINT_VERSION, TrainConfig, load_checkpoint, save_checkpoint, train, write_history_csv

log = logging.getLogger("unitrieve")


def _file_config(path: str | None) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def _get(args, cfg: dict, name: str, default=None):
    value = getattr(args, name, None)
    if value is not None:
        return value
    return cfg.get(name, default)


def _default_out() -> str:
    return os.environ.get(OUT_DIR_ENV, "unitrieve_out")


def cmd_gen(args) -> int:
    cfg = _file_config(args.config)
    spec_dict = {**_file_config(_get(args, cfg, "spec")), **cfg.get("gen", {})}
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = GenSpec.from_dict(spec_dict)
    out = Path(_get(args, cfg, "out_dir", _default_out()))
    out.mkdir(parents=True, exist_ok=True)
    summary = stage_gen(spec, out)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_experts(args) -> int:
    cfg = _file_config(args.config)
    spec_dict = _file_config(_get(args, cfg, "spec"))
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = GenSpec.from_dict(spec_dict)
    experts = [{"kind": "oracle"}] if _get(args, cfg, "oracle", False) else []
    experts += [{"kind": "imperfect", "sigma": s} for s in (_get(args, cfg, "sigma") or [])]
    if not experts:
        raise SystemExit("experts: give --oracle and/or at least one --sigma")
    paths = write_experts(spec, experts, Path(_get(args, cfg, "out_dir", _default_out())))
    for p in paths:
        print(p)
    return 0


def cmd_curate(args) -> int:
    cfg = _file_config(args.config)
    dataset = read_dataset(_get(args, cfg, "dataset"))
    experts = experts_from_files(_get(args, cfg, "expert") or [])
    k = int(_get(args, cfg, "k", DEFAULT_K))
    threads = int(_get(args, cfg, "threads", os.cpu_count() or 1))
    mask, _, report = curate(dataset, experts, k, threads=threads)
    write_jsonl(_get(args, cfg, "out_mask"), mask.rows())
    out = report.to_dict()
    curve = _get(args, cfg, "curve")
    if curve:
        ks = [int(x) for x in str(curve).split(",")] if not isinstance(curve, list) else curve
        out["curve"] = [{"k": kk, "percent": pct} for kk, pct in retention_curve(dataset, experts, ks, threads)]
    write_json(_get(args, cfg, "report"), out)
    print(f"retained {report.retained}/{report.total} pairs ({report.overall_percent:.2f}%) at K={k}")
    return 0


_TRAIN_FLAGS = {f.name for f in fields(TrainConfig)}


def cmd_train(args) -> int:
    cfg = _file_config(args.config)
    train_cfg = {k: v for k, v in cfg.items() if k in _TRAIN_FLAGS}
    for name in _TRAIN_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            train_cfg[name] = v
    tcfg = TrainConfig.from_dict(train_cfg)
    dataset = load_masked_dataset(_get(args, cfg, "dataset"), _get(args, cfg, "mask"))
    result = train(dataset, tcfg)
    out = Path(_get(args, cfg, "out"))
    save_checkpoint(out, result, tcfg)
    history = _get(args, cfg, "history") or str(out.with_suffix(".history.csv"))
    write_history_csv(history, result.history)
    last = result.history[-1]
    print(
        f"trained on {len(dataset)} pairs: id loss {last.loss_ma_id:.4f}, "
        f"separation {last.separation.separation:.4f}"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _file_config(args.config)
    encoder, _, _ = load_checkpoint(_get(args, cfg, "checkpoint"))
    test = read_dataset(_get(args, cfg, "test"))
    nnn_cfg = None
    if _get(args, cfg, "nnn", False):
        nnn_cfg = NnnConfig(float(_get(args, cfg, "alpha", DEFAULT_ALPHA)), int(_get(args, cfg, "kappa", DEFAULT_KAPPA)))
    ref_arg = _get(args, cfg, "reference", "self")
    reference = None if ref_arg == "self" else read_dataset(ref_arg)
    result = run_protocol(encoder, test, nnn_cfg, reference)
    out = result.to_dict(per_query=True)
    if _get(args, cfg, "by_source", False):
        out["per_source"] = {
            str(sid): run_protocol(encoder, test.by_source(sid), nnn_cfg, reference).to_dict()
            for sid in sorted({p.image.source_id for p in test.pairs})
        }
    write_json(_get(args, cfg, "out"), out)
    dump = _get(args, cfg, "dump_scores")
    if dump:
        dump = Path(dump)
        dump.parent.mkdir(parents=True, exist_ok=True)
        dump.write_bytes(result.raw_scores.astype("<f4").tobytes())
        if result.normalized_scores is not None:
            dump.with_name(dump.stem + ".normalized" + dump.suffix).write_bytes(
                result.normalized_scores.astype("<f4").tobytes()
            )
    line = f"R1 {result.rank_k[1]:.2f}  R5 {result.rank_k[5]:.2f}  R10 {result.rank_k[10]:.2f}  mAP {result.map_percent:.2f}"
    if result.normalized is not None:
        n = result.normalized
        line += f"  |  normalized R1 {n.rank_k[1]:.2f}  mAP {n.map_percent:.2f}"
    print(line)
    return 0


def cmd_project(args) -> int:
    cfg = _file_config(args.config)
    out = Path(_get(args, cfg, "out"))
    stage_project(Path(_get(args, cfg, "checkpoint")), Path(_get(args, cfg, "test")), out)
    print(out)
    return 0


def cmd_pipeline(args) -> int:
    raw = _file_config(args.config)
    overrides = {
        "out_dir": args.out_dir,
        "seed": args.seed,
        "threads": args.threads,
        "deterministic": args.deterministic,
        "stages": args.stages.split(",") if args.stages else None,
    }
    raw.update({k: v for k, v in overrides.items() if v is not None})
    if args.k is not None:
        raw.setdefault("curate", {})["k"] = args.k
    if args.epochs is not None:
        raw.setdefault("train", {})["epochs"] = args.epochs
    if args.no_nnn:
        raw.setdefault("eval", {})["nnn"] = False
    for name in ("alpha", "kappa", "reference"):
        if getattr(args, name) is not None:
            raw.setdefault("eval", {})[name] = getattr(args, name)
    cfg = PipelineConfig.from_dict(raw)
    status, report = run_pipeline(cfg)
    if status == 0:
        print((Path(cfg.out_dir) / "pipeline_report.txt").read_text())
    else:
        print(f"pipeline failed in stage {report['failed_stage']}: {report['error']}", file=sys.stderr)
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unitrieve", description=__doc__)
    p.add_argument(
        "--version",
        action="version",
        version=f"unitrieve {__version__} (embedding format {FORMAT_VERSION}, checkpoint format {CHECKPOINT_VERSION})",
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="JSON file supplying defaults for any option")
        sp.set_defaults(func=func)
        return sp

    g = add("gen", cmd_gen, "generate a synthetic multi-source dataset")
    g.add_argument("--spec", help="JSON file of generator settings")
    g.add_argument("--out-dir")
    g.add_argument("--seed", type=int)

    e = add("experts", cmd_experts, "write expert embedding tables for a generated dataset")
    e.add_argument("--spec")
    e.add_argument("--out-dir")
    e.add_argument("--seed", type=int)
    e.add_argument("--oracle", action="store_true", default=None)
    e.add_argument("--sigma", type=float, action="append")

    c = add("curate", cmd_curate, "filter pairs by expert top-K consensus")
    c.add_argument("--dataset")
    c.add_argument("--expert", action="append")
    c.add_argument("--k", type=int)
    c.add_argument("--out-mask")
    c.add_argument("--report")
    c.add_argument("--curve", help="comma-separated K values for a retention curve")
    c.add_argument("--threads", type=int)

    t = add("train", cmd_train, "train encoders on (curated) pairs")
    t.add_argument("--dataset")
    t.add_argument("--mask")
    t.add_argument("--out")
    t.add_argument("--history")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--margin", type=float)
    t.add_argument("--scale", type=float)
    t.add_argument("--temperature", type=float)
    t.add_argument("--align-weight", type=float)
    t.add_argument("--id-weight", type=float)
    t.add_argument("--optimizer", choices=["sgd", "adam"])
    t.add_argument("--hidden-dim", type=int)
    t.add_argument("--embed-dim", type=int)

    v = add("eval", cmd_eval, "text-to-image retrieval metrics")
    v.add_argument("--checkpoint")
    v.add_argument("--test")
    v.add_argument("--nnn", action="store_true", default=None)
    v.add_argument("--alpha", type=float)
    v.add_argument("--kappa", type=int)
    v.add_argument("--reference", help="'self' or a dataset manifest of reference queries")
    v.add_argument("--out")
    v.add_argument("--dump-scores")
    v.add_argument("--by-source", action="store_true", default=None)

    j = add("project", cmd_project, "export a 2-d PCA projection of test embeddings")
    j.add_argument("--checkpoint")
    j.add_argument("--test")
    j.add_argument("--out")

    pl = add("pipeline", cmd_pipeline, "run gen -> curate -> train -> eval -> project")
    pl.add_argument("--out-dir")
    pl.add_argument("--seed", type=int)
    pl.add_argument("--stages", help=f"comma-separated subset of {','.join(STAGES)}")
    pl.add_argument("--k", type=int)
    pl.add_argument("--epochs", type=int)
    pl.add_argument("--threads", type=int, default=None)
    pl.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    pl.add_argument("--no-nnn", action="store_true")
    pl.add_argument("--alpha", type=float)
    pl.add_argument("--kappa", type=int)
    pl.add_argument("--reference")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UnitrieveError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
