"""Multi-system experiments: train each system, score it, fuse a subset, write a report.

A plan is a flat ``key = value`` file::

    task = "mask"
    manifest = "corpus/manifest.csv"        # relative to the plan file
    config = "base.cfg"                     # optional
    systems = ["speed", "specaug*", "erase*"]
    system.specaug.train.augment = ["speed", "specaug"]
    system.erase.train.augment = ["speed", "specaug", "erase"]

Systems marked ``*`` form the fusion set (``fuse = [...]`` may list it
explicitly instead; with neither, every system is fused). Each system's
artifacts go to ``<out>/<name>/`` and a completed system whose config and
manifest fingerprints are unchanged is reused rather than retrained.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DataError, ParaforgeError
from ..metrics import breath_report, uar
from ..nnet import save_checkpoint
from ..svm import decide, fuse_probabilities, save_svm, smo_train
from .breath import (by_speaker, predict_breath, read_breath_predictions, train_breath,
                     write_breath_predictions)
from .config import load_config, parse_flat
from .manifest import read_manifest
from .mask import (extract_embeddings, read_predictions, softmax_probabilities, train_mask,
                   write_embeddings, write_predictions)
from .synth import read_belt

PLAN_KEYS = ("task", "manifest", "config", "systems", "fuse")
DONE = "complete"


@dataclass
class Plan:
    task: str
    manifest: Path
    config: Path | None
    systems: list
    fuse: list
    overrides: dict = field(default_factory=dict)


def parse_plan(path) -> Plan:
    path = Path(path)
    flat = parse_flat(path.read_text(encoding="utf-8"), str(path))
    overrides: dict = {}
    top = {}
    for key, value in flat.items():
        if key.startswith("system."):
            parts = key.split(".", 2)
            if len(parts) != 3:
                raise ConfigError(f"plan key {key!r} must look like system.<name>.<section>.<key>")
            overrides.setdefault(parts[1], {})[parts[2]] = value
        elif key in PLAN_KEYS:
            top[key] = value
        else:
            raise ConfigError(f"unknown plan key {key!r}")
    for required in ("task", "manifest", "systems"):
        if required not in top:
            raise ConfigError(f"plan lacks '{required}'")
    task = top["task"]
    if task not in ("mask", "breath"):
        raise ConfigError(f"plan task must be 'mask' or 'breath', got {task!r}")
    raw = top["systems"]
    if isinstance(raw, str) or not raw:
        raise ConfigError("plan 'systems' must be a non-empty list")
    names = [s.rstrip("*") for s in raw]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate system names in plan: {names}")
    starred = [s.rstrip("*") for s in raw if s.endswith("*")]
    fuse = list(top.get("fuse", starred or names))
    unknown = [s for s in fuse if s not in names] + [s for s in overrides if s not in names]
    if unknown:
        raise ConfigError(f"plan refers to systems not listed in 'systems': {sorted(set(unknown))}")
    base = path.parent
    config = base / top["config"] if top.get("config") else None
    return Plan(task, base / top["manifest"], config, names, fuse, overrides)


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ParaforgeError as exc:
        raise type(exc)(f"stage '{name}' failed: {exc}") from exc
    except OSError as exc:
        raise DataError(f"stage '{name}' failed: {exc}") from exc


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


@dataclass
class SystemResult:
    name: str
    describe: dict
    devel: tuple          # (ids, values) -- probabilities or sequences
    test: tuple
    devel_score: float
    test_score: float
    aggregation: str = "mean"


def _mask_system(name, cfg, manifest, out: Path, jobs, log) -> None:
    result = _stage(f"{name}/train", train_mask, manifest, cfg, jobs,
                    on_epoch=lambda r: log(f"[{name}] epoch {r['epoch']} loss {r['loss']:.4f} "
                                           f"devel_uar {r['devel_uar']:.4f}"))
    save_checkpoint(out / "model.pckp", checkpoint=result.checkpoint)
    (out / "train_log.csv").write_text(result.log_csv(), encoding="utf-8")
    embs = {}
    for split in ("train", "devel", "test"):
        embs[split] = _stage(f"{name}/extract-{split}", extract_embeddings, result.checkpoint, manifest,
                             split, cfg, name, jobs)
        write_embeddings(out / f"{split}.pemb", embs[split])
    if cfg.train.fusion_source == "softmax":
        for split in ("devel", "test"):
            ids, probs = _stage(f"{name}/softmax-{split}", softmax_probabilities, result.checkpoint,
                                manifest, split, jobs)
            write_predictions(out / f"{split}_pred.csv", ids, probs)
        return
    sv = cfg.svm
    model = _stage(f"{name}/svm", smo_train, embs["train"], sv.C, sv.gamma or None, sv.tol, sv.max_passes,
                   cfg.train.seed)
    save_svm(out / "svm.psvm", model)
    for split in ("devel", "test"):
        write_predictions(out / f"{split}_pred.csv", embs[split].ids, model.predict_proba(embs[split].matrix))


def _breath_system(name, cfg, manifest, out: Path, jobs, log) -> None:
    result = _stage(f"{name}/train", train_breath, manifest, cfg, jobs,
                    on_epoch=lambda r: log(f"[{name}] epoch {r['epoch']} loss {r['loss']:.4f} "
                                           f"devel_pcc {r['devel_pcc']:.4f}"))
    save_checkpoint(out / "model.pckp", checkpoint=result.checkpoint)
    (out / "train_log.csv").write_text(result.log_csv(), encoding="utf-8")
    for split in ("devel", "test"):
        data, preds = _stage(f"{name}/predict-{split}", predict_breath, result.checkpoint, manifest, split,
                             cfg, jobs)
        write_breath_predictions(out / f"{split}_pred", data, preds)


def _load_outputs(task, manifest, out: Path, split, aggregation):
    if task == "mask":
        ids, probs = read_predictions(out / f"{split}_pred.csv")
        truth = {r.path: r.label_index for r in manifest.split(split)}
        if set(ids) != set(truth):
            raise DataError(f"{out / f'{split}_pred.csv'} does not cover the {split} split")
        return (ids, probs), uar([truth[i] for i in ids], decide(probs))
    preds = read_breath_predictions(out / f"{split}_pred" / "predictions.csv")
    ids = [r.path for r in manifest.split(split)]
    if set(ids) - set(preds):
        raise DataError(f"{out / f'{split}_pred'} lacks predictions for the {split} split")
    seqs = np.stack([preds[i][1] for i in ids]).astype(np.float64)
    return (ids, seqs), _breath_score(manifest, split, ids, seqs, aggregation)


def _breath_score(manifest, split, ids, seqs, aggregation) -> float:
    recs = {r.path: r for r in manifest.split(split)}
    speakers = [recs[i].speaker for i in ids]
    truths = by_speaker(speakers, [read_belt(manifest.resolve(recs[i].belt_path)) for i in ids])
    return breath_report(truths, by_speaker(speakers, seqs), aggregation).value


def run_experiment(plan_path, out_dir, seed: int | None = None, jobs: int = 1, log=print) -> dict:
    """Run every system of the plan, fuse, and write ``report.md`` / ``report.csv``.

    Returns ``{"rows": [...], "fused": {...}}``.
    """
    plan = _stage("plan", parse_plan, plan_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _stage("manifest", read_manifest, plan.manifest, plan.task)
    manifest_digest = _file_digest(plan.manifest)
    metric = "uar" if plan.task == "mask" else "pcc"
    results = []
    for name in plan.systems:
        overrides = dict(plan.overrides.get(name, {}))
        if seed is not None:
            overrides.setdefault("train.seed", seed)
        cfg = _stage(f"{name}/config", load_config, plan.config, plan.task, overrides)
        sysdir = out_dir / name
        sysdir.mkdir(exist_ok=True)
        stamp = f"config {cfg.fingerprint()}\nmanifest {manifest_digest}\n"
        marker = sysdir / DONE
        if marker.exists() and marker.read_text(encoding="utf-8") == stamp:
            log(f"[{name}] reusing completed artifacts")
        else:
            if marker.exists():
                marker.unlink()
            (sysdir / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
            runner = _mask_system if plan.task == "mask" else _breath_system
            runner(name, cfg, manifest, sysdir, jobs, log)
            marker.write_text(stamp, encoding="utf-8")
        devel, dscore = _stage(f"{name}/score-devel", _load_outputs, plan.task, manifest, sysdir, "devel",
                               cfg.train.aggregation)
        test, tscore = _stage(f"{name}/score-test", _load_outputs, plan.task, manifest, sysdir, "test",
                              cfg.train.aggregation)
        describe = {"augment": "+".join(cfg.train.augment) if plan.task == "mask" else cfg.train.features,
                    "aux_fusion": cfg.model.aux_fusion if plan.task == "mask" else "none"}
        results.append(SystemResult(name, describe, devel, test, dscore, tscore, cfg.train.aggregation))

    fused = _stage("fuse", _fuse, plan, manifest, results, out_dir)
    rows = [{"system": r.name, **r.describe, "fused": "*" if r.name in plan.fuse else "",
             f"devel_{metric}": r.devel_score, f"test_{metric}": r.test_score} for r in results]
    fused_row = {"system": "fusion(" + "+".join(plan.fuse) + ")", "augment": "", "aux_fusion": "", "fused": "",
                 f"devel_{metric}": fused["devel"], f"test_{metric}": fused["test"]}
    _write_report(out_dir, rows + [fused_row], metric)
    return {"rows": rows, "fused": fused_row}


def _fuse(plan, manifest, results, out_dir: Path) -> dict:
    members = [r for r in results if r.name in plan.fuse]
    scores = {}
    for split in ("devel", "test"):
        ids = getattr(members[0], split)[0]
        for r in members[1:]:
            if getattr(r, split)[0] != ids:
                raise DataError(f"systems {members[0].name} and {r.name} scored different {split} clips")
        if plan.task == "mask":
            probs = fuse_probabilities([getattr(r, split)[1] for r in members])
            write_predictions(out_dir / f"fused_{split}_pred.csv", ids, probs)
            truth = {rec.path: rec.label_index for rec in manifest.split(split)}
            scores[split] = uar([truth[i] for i in ids], decide(probs))
        else:
            seqs = np.mean([getattr(r, split)[1] for r in members], axis=0)
            scores[split] = _breath_score(manifest, split, ids, seqs, members[0].aggregation)
    return scores


def _write_report(out_dir: Path, rows, metric: str) -> None:
    keys = list(rows[0])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for row in rows:
        w.writerow([f"{row[k]:.4f}" if isinstance(row[k], float) else row[k] for k in keys])
    (out_dir / "report.csv").write_text(buf.getvalue(), encoding="utf-8")
    lines = ["| " + " | ".join(keys) + " |", "|" + "---|" * len(keys)]
    for row in rows:
        cells = [f"{100 * row[k]:.1f}" if isinstance(row[k], float) and metric == "uar" else
                 f"{row[k]:.3f}" if isinstance(row[k], float) else str(row[k]) for k in keys]
        lines.append("| " + " | ".join(cells) + " |")
    title = "UAR (%)" if metric == "uar" else "PCC"
    text = f"# Experiment report\n\nScores: {title} on the devel and test splits.\n\n" + "\n".join(lines) + "\n"
    (out_dir / "report.md").write_text(text, encoding="utf-8")
