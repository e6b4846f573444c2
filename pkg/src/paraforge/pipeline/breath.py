"""Breathing-signal flow: per-frame features, BiLSTM regression, PCC scoring."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..dsp import fit_frames, log_fbank, mean_var_normalize, stack_frames
from ..errors import DataError, FormatError, IntegrityError
from ..metrics import EvalReport, breath_report
from ..nnet import (BiLstmRegressor, ModelCheckpoint, PlateauScheduler, build_model, cosine_distance_loss,
                    make_checkpoint, make_optimizer)
from ..rng import Rng
from .config import PipelineConfig
from .features import load_clip, parallel_map
from .manifest import Manifest
from .mask import TrainResult
from .synth import read_belt, write_belt


@dataclass
class BreathData:
    ids: list
    speakers: list
    feats: np.ndarray           # (n_utts, n_frames, dim) float32
    belts: np.ndarray           # (n_utts, n_frames) float32


def utterance_features(clip, cfg: PipelineConfig) -> np.ndarray:
    feat = log_fbank(clip, cfg.dsp)
    if cfg.train.features == "stacked":
        feat = stack_frames(feat, cfg.train.stack_k, cfg.train.stack_hop)
    return fit_frames(mean_var_normalize(feat), cfg.train.n_frames).data.astype(np.float32)


def load_breath(manifest: Manifest, split: str, cfg: PipelineConfig, jobs: int = 1,
                with_belt: bool = True) -> BreathData:
    records = manifest.split(split)
    if not records:
        raise DataError(f"split {split!r} is empty")
    sr = cfg.train.sample_rate_hz
    feats = np.stack(parallel_map(lambda r: utterance_features(load_clip(manifest, r, sr), cfg), records, jobs))
    belts = np.zeros(feats.shape[:2], np.float32)
    if with_belt:
        for i, r in enumerate(records):
            belt = read_belt(manifest.resolve(r.belt_path))
            if belt.size != cfg.train.n_frames:
                raise DataError(f"{r.path}: belt has {belt.size} values but features were fitted "
                                f"to {cfg.train.n_frames} frames")
            belts[i] = belt
    return BreathData([r.path for r in records], [r.speaker for r in records], feats, belts)


def _predict(model, feats, batch_size: int) -> np.ndarray:
    model.eval()
    out = [model(feats[s:s + batch_size])[..., 0] for s in range(0, feats.shape[0], batch_size)]
    return np.concatenate(out).astype(np.float64)


def by_speaker(speakers, seqs) -> dict:
    out: dict = {}
    for spk, seq in zip(speakers, seqs):
        out.setdefault(spk, []).append(np.asarray(seq, dtype=np.float64))
    return {k: np.concatenate(v) for k, v in out.items()}


def score(data: BreathData, preds, aggregation: str) -> EvalReport:
    return breath_report(by_speaker(data.speakers, data.belts), by_speaker(data.speakers, preds), aggregation)


def _segments(n_utts: int, n_frames: int, seg: int, rng: Rng):
    """``(utt, start)`` pairs covering each utterance with back-to-back windows from a random offset."""
    if seg <= 0 or seg >= n_frames:
        return [(u, 0) for u in range(n_utts)], n_frames
    out = []
    for u in range(n_utts):
        offset = rng.integers(0, seg)
        out.extend((u, s) for s in range(offset, n_frames - seg + 1, seg))
    return out, seg


def train_breath(manifest: Manifest, cfg: PipelineConfig, jobs: int = 1, on_epoch=None) -> TrainResult:
    """Cosine-distance training on ``train``; the log's epoch 0 row is the untrained model."""
    cfg.validate("breath")
    manifest.validate("breath")
    train = load_breath(manifest, "train", cfg, jobs)
    devel = load_breath(manifest, "devel", cfg, jobs)
    model = BiLstmRegressor(cfg.lstm, train.feats.shape[2], seed=cfg.train.seed)
    opt = make_optimizer(model.named_parameters(), cfg.optim)
    sched = PlateauScheduler(cfg.optim.lr, cfg.optim.plateau_patience, cfg.optim.plateau_factor)
    rng = Rng(cfg.train.seed).split(30)
    bs, ebs = cfg.optim.batch_size, cfg.train.eval_batch_size
    agg = cfg.train.aggregation

    init_loss, _ = cosine_distance_loss(_predict(model, train.feats, ebs), train.belts)
    log = [{"epoch": 0, "loss": init_loss, "lr": float(opt.lr),
            "devel_pcc": score(devel, _predict(model, devel.feats, ebs), agg).value}]
    if on_epoch is not None:
        on_epoch(log[0])
    for epoch in range(1, cfg.optim.epochs + 1):
        model.train()
        erng = rng.split(epoch)
        segs, length = _segments(len(train.ids), train.feats.shape[1], cfg.train.segment_frames, erng.split(0))
        order = erng.split(1).permutation(len(segs))
        total = 0.0
        for s in range(0, len(segs), bs):
            chosen = [segs[i] for i in order[s:s + bs]]
            x = np.stack([train.feats[u, t:t + length] for u, t in chosen])
            y = np.stack([train.belts[u, t:t + length] for u, t in chosen])
            pred = model(x)
            loss, grad = cosine_distance_loss(pred, y)
            model.zero_grad()
            model.backward(grad)
            opt.step()
            total += loss * len(chosen)
        row = {"epoch": epoch, "loss": total / len(segs), "lr": float(opt.lr)}
        opt.lr = sched.step(row["loss"])
        row["devel_pcc"] = score(devel, _predict(model, devel.feats, ebs), agg).value
        log.append(row)
        if on_epoch is not None:
            on_epoch(row)
    model.eval()
    extra = {"features": cfg.train.features, "stack_k": cfg.train.stack_k, "stack_hop": cfg.train.stack_hop,
             "n_frames": cfg.train.n_frames, "config_fingerprint": cfg.fingerprint()}
    ckpt = make_checkpoint(model, opt, epoch=cfg.optim.epochs, seed=cfg.train.seed, extra=extra)
    return TrainResult(ckpt, log)


def predict_breath(ckpt: ModelCheckpoint, manifest: Manifest, split: str, cfg: PipelineConfig,
                   jobs: int = 1) -> tuple[BreathData, np.ndarray]:
    """Predicted belt sequences for every clip of ``split``; belts are loaded when listed."""
    if ckpt.descriptor.get("kind") != "bilstm":
        raise IntegrityError(f"expected a bilstm checkpoint, got {ckpt.descriptor.get('kind')!r}")
    extra = ckpt.descriptor.get("extra", {})
    if extra.get("features", cfg.train.features) != cfg.train.features:
        raise IntegrityError("checkpoint was trained on different feature type than train.features")
    model = build_model(ckpt)
    records = manifest.split(split)
    with_belt = all(r.belt_path for r in records)
    data = load_breath(manifest, split, cfg, jobs, with_belt)
    if data.feats.shape[2] != model.input_dim:
        raise IntegrityError(f"features have {data.feats.shape[2]} dims, model expects {model.input_dim}")
    return data, _predict(model, data.feats, cfg.train.eval_batch_size)


BREATH_PRED_HEADER = ["id", "speaker", "pred_path"]


def write_breath_predictions(out_dir, data: BreathData, preds) -> Path:
    """One ``.pblt`` per clip plus an index CSV; returns the index path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = out_dir / "predictions.csv"
    with open(index, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BREATH_PRED_HEADER)
        for i, (ident, spk) in enumerate(zip(data.ids, data.speakers)):
            name = f"pred_{i:04d}.pblt"
            write_belt(out_dir / name, preds[i])
            w.writerow([ident, spk, name])
    return index


def read_breath_predictions(index) -> dict:
    """Map clip id -> ``(speaker, predicted sequence)``."""
    index = Path(index)
    with open(index, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != BREATH_PRED_HEADER:
            raise FormatError(f"{index}: header must be {','.join(BREATH_PRED_HEADER)}")
        return {r["id"]: (r["speaker"], read_belt(index.parent / r["pred_path"])) for r in reader}
