"""Staged gen -> curate -> train -> eval -> project runner.

Each stage writes into ``<out_dir>/<stage>-<key>`` where ``key`` hashes the
stage's own settings together with the keys of the stages it reads from. A
stage whose directory already carries a completion marker is skipped, so
re-running an unchanged pipeline does no work. Failed stages leave their
partial output behind in ``<dir>.partial``.

The report bundle (``pipeline_report.json`` and ``pipeline_report.txt``)
holds no timings or absolute paths, so identical configs produce identical
bytes. Wall-clock figures go to ``timings.json`` instead.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .curation import DEFAULT_K, curate, experts_from_files
from .datagen import GenSpec, expert_records, generate, make_imperfect_expert, make_oracle_expert
from .errors import StageFailure
from .evaluation import run_protocol
from .formats import FORMAT_VERSION, read_dataset, read_jsonl, write_dataset, write_json, write_jsonl, write_records
from .nnn import NnnConfig
from .trainer import (
    TrainConfig,
    history_rows,
    load_checkpoint,
    project_2d,
    save_checkpoint,
    train,
    write_history_csv,
    write_projection_csv,
)

log = logging.getLogger(__name__)

STAGES = ("gen", "curate", "train", "eval", "project")
OUT_DIR_ENV = "UNITRIEVE_OUT_DIR"
DONE_MARKER = "_stage.json"

DEFAULT_EXPERTS = (
    {"kind": "imperfect", "sigma": 0.3},
    {"kind": "imperfect", "sigma": 0.5},
    {"kind": "imperfect", "sigma": 0.8},
)


@dataclass
class PipelineConfig:
    out_dir: str = ""
    seed: int = 7
    deterministic: bool = True
    threads: int = field(default_factory=lambda: os.cpu_count() or 1)
    stages: tuple[str, ...] = STAGES
    gen: dict = field(default_factory=dict)
    curate: dict = field(default_factory=lambda: {"k": DEFAULT_K, "experts": [dict(e) for e in DEFAULT_EXPERTS]})
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=lambda: {"nnn": True, "alpha": 0.75, "kappa": 16, "reference": "self"})

    def __post_init__(self):
        if not self.out_dir:
            self.out_dir = os.environ.get(OUT_DIR_ENV, "unitrieve_out")
        self.stages = tuple(self.stages)
        unknown = [s for s in self.stages if s not in STAGES]
        if unknown:
            raise ValueError(f"unknown stages {unknown}")
        for need, stage in (("gen", "curate"), ("train", "eval"), ("train", "project")):
            if stage in self.stages and need not in self.stages:
                raise ValueError(f"stage {stage!r} needs stage {need!r}")
        if "train" in self.stages and "gen" not in self.stages:
            raise ValueError("stage 'train' needs stage 'gen'")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        base = cls.__dataclass_fields__
        unknown = set(d) - set(base)
        if unknown:
            raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
        defaults = cls()
        for key in ("curate", "eval"):
            if key in d:
                d[key] = {**getattr(defaults, key), **d[key]}
        return cls(**d)

    def gen_spec(self) -> GenSpec:
        return GenSpec.from_dict({"seed": self.seed, **self.gen})

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({"seed": self.seed, "deterministic": self.deterministic, **self.train})

    def nnn_config(self) -> NnnConfig | None:
        if not self.eval.get("nnn", True):
            return None
        return NnnConfig(float(self.eval.get("alpha", 0.75)), int(self.eval.get("kappa", 16)))


def config_hash(obj: Any) -> str:
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class StageRun:
    name: str
    key: str
    path: Path
    skipped: bool
    seconds: float
    summary: dict


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = Path(cfg.out_dir)
        self.runs: dict[str, StageRun] = {}

    def _stage(self, name: str, settings: dict, deps: tuple[str, ...], body: Callable[[Path], dict]) -> StageRun:
        key = config_hash(
            {
                "stage": name,
                "settings": settings,
                "deps": {d: self.runs[d].key for d in deps if d in self.runs},
                "format": FORMAT_VERSION,
            }
        )[:16]
        path = self.root / f"{name}-{key}"
        marker = path / DONE_MARKER
        if marker.exists():
            log.info("stage %s unchanged (%s), skipping", name, path.name)
            run = StageRun(name, key, path, True, 0.0, json.loads(marker.read_text())["summary"])
            self.runs[name] = run
            return run
        partial = path.with_name(path.name + ".partial")
        if partial.exists():
            shutil.rmtree(partial)
        partial.mkdir(parents=True)
        t0 = time.perf_counter()
        try:
            summary = body(partial)
        except Exception as exc:
            raise StageFailure(name, exc) from exc
        write_json(partial / DONE_MARKER, {"stage": name, "key": key, "summary": summary})
        if path.exists():
            shutil.rmtree(path)
        partial.rename(path)
        run = StageRun(name, key, path, False, time.perf_counter() - t0, summary)
        self.runs[name] = run
        return run

    def run(self) -> dict:
        cfg = self.cfg
        self.root.mkdir(parents=True, exist_ok=True)
        spec = None
        if "gen" in cfg.stages:
            try:
                spec = cfg.gen_spec()
            except Exception as exc:
                raise StageFailure("gen", exc) from exc
            self._stage("gen", spec.to_dict(), (), lambda d: stage_gen(spec, d))
        if "curate" in cfg.stages:
            settings = {"k": int(cfg.curate.get("k", DEFAULT_K)), "experts": cfg.curate.get("experts", DEFAULT_EXPERTS)}
            gen_dir = self.runs["gen"].path
            self._stage(
                "curate",
                settings,
                ("gen",),
                lambda d: stage_curate(spec, gen_dir, settings["experts"], settings["k"], d, cfg.threads),
            )
        if "train" in cfg.stages:
            try:
                tcfg = cfg.train_config()
            except Exception as exc:
                raise StageFailure("train", exc) from exc
            gen_dir = self.runs["gen"].path
            mask = self.runs["curate"].path / "mask.jsonl" if "curate" in self.runs else None
            self._stage(
                "train",
                {**tcfg.to_dict(), "dump_path": None, "curated": mask is not None},
                ("gen", "curate"),
                lambda d: stage_train(gen_dir / "train.jsonl", mask, tcfg, d),
            )
        if "eval" in cfg.stages:
            nnn_cfg = cfg.nnn_config()
            settings = {"nnn": None if nnn_cfg is None else [nnn_cfg.alpha, nnn_cfg.kappa],
                        "reference": cfg.eval.get("reference", "self")}
            ckpt = self.runs["train"].path / "checkpoint.bin"
            test = self.runs["gen"].path / "test.jsonl"
            reference = settings["reference"]
            self._stage(
                "eval",
                settings,
                ("gen", "train"),
                lambda d: stage_eval(ckpt, test, nnn_cfg, reference, d),
            )
        if "project" in cfg.stages:
            ckpt = self.runs["train"].path / "checkpoint.bin"
            test = self.runs["gen"].path / "test.jsonl"
            self._stage("project", {}, ("gen", "train"), lambda d: stage_project(ckpt, test, d / "projection.csv"))
        return self._write_report()

    def _write_report(self) -> dict:
        report = {
            "toolkit_version": __version__,
            "format_version": FORMAT_VERSION,
            "config_hash": config_hash(_config_dict(self.cfg, portable=True)),
            "stages": {name: {"key": r.key, "dir": r.path.name, **r.summary} for name, r in self.runs.items()},
        }
        write_json(self.root / "pipeline_report.json", report)
        (self.root / "pipeline_report.txt").write_text(format_report(report))
        write_json(
            self.root / "timings.json",
            {name: {"seconds": r.seconds, "skipped": r.skipped} for name, r in self.runs.items()},
        )
        return report


def _config_dict(cfg: PipelineConfig, portable: bool = False) -> dict:
    d = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    d["stages"] = list(cfg.stages)
    if portable:
        d.pop("out_dir")
        d.pop("threads")
    return d


def run_pipeline(cfg: PipelineConfig) -> tuple[int, dict]:
    """Run all configured stages; returns ``(exit_status, report)``."""
    try:
        return 0, Pipeline(cfg).run()
    except StageFailure as exc:
        log.error("%s", exc)
        return 2, {"failed_stage": exc.stage, "error": f"{type(exc.cause).__name__}: {exc.cause}"}


# -- stage bodies -------------------------------------------------------------


def stage_gen(spec: GenSpec, out: Path) -> dict:
    train_set, gt = generate(spec, "train")
    test_set, _ = generate(spec, "test")
    write_dataset(out / "train.jsonl", train_set)
    write_dataset(out / "test.jsonl", test_set)
    write_jsonl(out / "ground_truth.jsonl", gt.rows())
    write_json(out / "spec.json", spec.to_dict())
    return {
        "train_pairs": len(train_set),
        "test_pairs": len(test_set),
        "identities": train_set.num_identities,
        "planted_noisy_pairs": int((~gt.clean).sum()),
    }


def build_experts(spec: GenSpec, experts: list[dict], seed: int):
    dataset, gt = generate(spec, "train")
    built = []
    for i, e in enumerate(experts, 1):
        kind = e.get("kind", "imperfect")
        if kind == "oracle":
            built.append(make_oracle_expert(dataset, gt, expert_id=i))
        elif kind == "imperfect":
            built.append(make_imperfect_expert(dataset, gt, float(e["sigma"]), seed=int(e.get("seed", seed + i)), expert_id=i))
        else:
            raise ValueError(f"unknown expert kind {kind!r}")
    return dataset, built


def write_experts(spec: GenSpec, experts: list[dict], out: Path) -> list[Path]:
    dataset, built = build_experts(spec, experts, spec.seed)
    return [write_records(out / f"expert_{e.expert_id}.jsonl", expert_records(e, dataset)) for e in built]


def stage_curate(spec: GenSpec, gen_dir: Path, experts: list[dict], k: int, out: Path, threads: int = 1) -> dict:
    paths = write_experts(spec, experts, out / "experts")
    dataset = read_dataset(gen_dir / "train.jsonl")
    mask, _, report = curate(dataset, experts_from_files([str(p) for p in paths]), k, threads=threads)
    write_jsonl(out / "mask.jsonl", mask.rows())
    write_json(out / "report.json", report.to_dict())
    clean = np.array([r["clean"] for r in read_jsonl(gen_dir / "ground_truth.jsonl")])
    kept = mask.delta.astype(bool)
    return {
        "k": k,
        "retention": report.to_dict(include_timing=False),
        "retained_noise_rate": float((~clean[kept]).mean()) if kept.any() else 0.0,
        "planted_noise_rate": float((~clean).mean()),
    }


def load_masked_dataset(dataset_path, mask_path=None):
    dataset = read_dataset(dataset_path)
    if mask_path is None:
        return dataset
    delta = np.array([r["delta"] for r in read_jsonl(mask_path)], dtype=bool)
    if delta.shape[0] != len(dataset):
        raise ValueError(f"mask has {delta.shape[0]} rows, dataset has {len(dataset)} pairs")
    return dataset.subset(delta)


def stage_train(dataset_path: Path, mask_path: Path | None, cfg: TrainConfig, out: Path) -> dict:
    dataset = load_masked_dataset(dataset_path, mask_path)
    result = train(dataset, cfg)
    save_checkpoint(out / "checkpoint.bin", result, cfg)
    write_history_csv(out / "history.csv", result.history)
    last = history_rows(result.history)[-1]
    return {"pairs": len(dataset), "identities": dataset.num_identities, "final": last}


def evaluate_checkpoint(ckpt: Path, test_path: Path, nnn_cfg: NnnConfig | None, reference="self") -> dict:
    encoder, _, _ = load_checkpoint(ckpt)
    test = read_dataset(test_path)
    ref = None if reference in (None, "self") else read_dataset(reference)
    out = {"overall": run_protocol(encoder, test, nnn_cfg, ref).to_dict(), "per_source": {}}
    for sid in sorted({p.image.source_id for p in test.pairs}):
        part = test.by_source(sid)
        out["per_source"][str(sid)] = run_protocol(encoder, part, nnn_cfg, ref).to_dict()
    r1 = [v["raw"]["rank_k"]["1"] for v in out["per_source"].values()]
    out["mean_source_rank1"] = float(np.mean(r1))
    return out


def stage_eval(ckpt: Path, test_path: Path, nnn_cfg, reference, out: Path) -> dict:
    metrics = evaluate_checkpoint(ckpt, test_path, nnn_cfg, reference)
    write_json(out / "eval.json", metrics)
    return metrics


def stage_project(ckpt: Path, test_path: Path, out_csv: Path) -> dict:
    encoder, _, _ = load_checkpoint(ckpt)
    test = read_dataset(test_path)
    gal = encoder.embed_images(test.gallery_matrix())
    txt = encoder.embed_texts(test.text_matrix())
    emb = np.vstack([gal, txt])
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    pts = project_2d(emb)
    pids = [r.person_id for r in test.gallery] + [p.person_id for p in test.pairs]
    sids = [r.source_id for r in test.gallery] + [p.text.source_id for p in test.pairs]
    write_projection_csv(out_csv, pts, pids, sids)
    return {"points": int(pts.shape[0])}


# -- human-readable report ----------------------------------------------------


def _metric_row(label: str, res: dict) -> str:
    raw = res["raw"]
    cells = [raw["rank_k"]["1"], raw["rank_k"]["5"], raw["rank_k"]["10"], raw["map"]]
    norm = res.get("normalized")
    cells += [norm["rank_k"]["1"], norm["rank_k"]["5"], norm["rank_k"]["10"], norm["map"]] if norm else [None] * 4
    return f"{label:<10}" + "".join(f"{'-' if c is None else f'{c:.2f}':>9}" for c in cells)


def format_report(report: dict) -> str:
    lines = [f"unitrieve {report['toolkit_version']}  config {report['config_hash'][:12]}", ""]
    st = report["stages"]
    if "curate" in st:
        cur = st["curate"]
        lines.append(f"Curation (K={cur['k']})")
        lines.append(f"{'source':<10}{'kept':>8}{'total':>8}{'kept %':>9}")
        for sid, r in cur["retention"]["per_source"].items():
            lines.append(f"{sid:<10}{r['retained']:>8}{r['total']:>8}{r['percent']:>9.2f}")
        ret = cur["retention"]
        lines.append(f"{'all':<10}{ret['retained']:>8}{ret['total']:>8}{ret['overall_percent']:>9.2f}")
        lines.append(
            f"noise rate: planted {100 * cur['planted_noise_rate']:.2f}%  retained {100 * cur['retained_noise_rate']:.2f}%"
        )
        lines.append("")
    if "train" in st:
        f = st["train"]["final"]
        lines.append(f"Training ({st['train']['pairs']} pairs, {st['train']['identities']} identities)")
        lines.append(
            f"epoch {f['epoch']}: id loss {f['loss_ma_id']:.4f}  align loss {f['loss_align']:.4f}  "
            f"intra {f['intra']:.4f}  inter {f['inter']:.4f}  separation {f['separation']:.4f}"
        )
        lines.append("")
    if "eval" in st:
        ev = st["eval"]
        lines.append("Text-to-image retrieval (* = nearest-neighbor normalized)")
        head = ["R1", "R5", "R10", "mAP", "R1*", "R5*", "R10*", "mAP*"]
        lines.append(f"{'source':<10}" + "".join(f"{h:>9}" for h in head))
        for sid, res in ev["per_source"].items():
            lines.append(_metric_row(sid, res))
        lines.append(_metric_row("all", ev["overall"]))
        lines.append("")
    return "\n".join(lines)
