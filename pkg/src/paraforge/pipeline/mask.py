"""Mask-detection flow: augment, train the embedding CNN, extract embeddings, score."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..augment import crop_or_pad, random_erase, spec_augment
from ..dsp import FbankConfig, FeatureMatrix, resample
from ..errors import ConfigError, DataError, FormatError, IntegrityError
from ..metrics import uar
from ..nnet import (ModelCheckpoint, PlateauScheduler, ResNetEmbed, ResNetEmbedConfig, build_model,
                    cross_entropy_loss, extra_tensors, make_checkpoint, make_optimizer, softmax)
from ..rng import Rng
from ..svm import EmbeddingSet
from .config import PipelineConfig
from .features import AuditLog, GlobalNorm, fbank_array, load_clip, parallel_map
from .manifest import Manifest

EMB_MAGIC = b"PEMB"
EMB_VERSION = 1


@dataclass
class TrainItem:
    ident: str
    feat: np.ndarray            # normalized, un-cropped
    label: int


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    log: list
    audit: AuditLog = field(default_factory=AuditLog)

    def log_csv(self) -> str:
        return format_log(self.log)


def format_log(rows) -> str:
    if not rows:
        return ""
    keys = list(rows[0])
    lines = [",".join(keys)]
    for row in rows:
        lines.append(",".join(f"{row[k]:.6g}" if isinstance(row[k], float) else str(row[k]) for k in keys))
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------- features

def _speed_pool(manifest: Manifest, records, cfg: PipelineConfig, jobs: int):
    """Offline pool: one feature matrix per (clip, speed factor)."""
    factors = cfg.speed.factors if "speed" in cfg.train.augment else (1.0,)
    if "speed" in cfg.train.augment and 1.0 not in factors:
        raise ConfigError("speed.factors must include 1.0 when pooling the training set")
    sr = cfg.train.sample_rate_hz

    def work(rec):
        clip = load_clip(manifest, rec, sr)
        return [(f"{rec.path}@{f:g}", fbank_array(clip if f == 1.0 else resample(clip, f), cfg.dsp))
                for f in factors]

    return [item for group in parallel_map(work, records, jobs) for item in group]


def eval_features(manifest: Manifest, records, cfg: PipelineConfig, norm: GlobalNorm, target: int,
                  audit: AuditLog | None = None, jobs: int = 1) -> np.ndarray:
    """Normalized, centre-cropped features; never augmented."""
    sr = cfg.train.sample_rate_hz

    def work(rec):
        feat = FeatureMatrix(norm.apply(fbank_array(load_clip(manifest, rec, sr), cfg.dsp)), cfg.dsp.shift_ms)
        return crop_or_pad(feat, target, mode="eval").data

    out = parallel_map(work, records, jobs)
    if audit is not None:
        for rec in records:
            audit.record("eval", rec.path, ())
        audit.check_eval_clean()
    return np.stack(out).astype(np.float32)


def _augment(item: TrainItem, cfg: PipelineConfig, target: int, rng: Rng, audit: AuditLog) -> np.ndarray:
    feat = crop_or_pad(FeatureMatrix(item.feat, cfg.dsp.shift_ms), target, rng.split(0), mode="train")
    ops = ["crop"]
    if "specaug" in cfg.train.augment:
        feat = spec_augment(feat, cfg.specaug, rng.split(1))
        ops.append("specaug")
    if "erase" in cfg.train.augment:
        feat = random_erase(feat, cfg.erase, rng.split(2))
        ops.append("erase")
    audit.record("train", item.ident, ops)
    return feat.data


# ----------------------------------------------------------------- training

def _aux_labels(records, source: str):
    if source == "gender":
        values = [r.gender for r in records]
    else:
        values = [r.speaker for r in records]
    classes = sorted(set(values))
    if len(classes) < 2:
        raise DataError(f"auxiliary {source} classifier needs at least two classes in the training split")
    index = {c: i for i, c in enumerate(classes)}
    return [index[v] for v in values], classes


def _batched_forward(model, x, aux, batch_size):
    logits, embs = [], []
    for s in range(0, x.shape[0], batch_size):
        lg, em = model(x[s:s + batch_size], None if aux is None else aux[s:s + batch_size])
        logits.append(lg)
        embs.append(em)
    return np.concatenate(logits), np.concatenate(embs)


def fit_classifier(model: ResNetEmbed, items, aux, cfg: PipelineConfig, epochs: int, seed_key: int,
                   audit: AuditLog, augment: bool = True, devel=None, on_epoch=None) -> list:
    """Minibatch cross-entropy training with plateau scheduling; returns the epoch log.

    ``devel`` is ``(features, labels, aux)`` scored after every epoch.
    """
    target = cfg.speed.target_frames
    labels = np.array([it.label for it in items])
    opt = make_optimizer(model.named_parameters(), cfg.optim)
    sched = PlateauScheduler(cfg.optim.lr, cfg.optim.plateau_patience, cfg.optim.plateau_factor)
    rng = Rng(cfg.train.seed).split(seed_key)
    bs = cfg.optim.batch_size
    log = []
    for epoch in range(1, epochs + 1):
        model.train()
        erng = rng.split(epoch)
        order = erng.split(0).permutation(len(items))
        total = 0.0
        for s in range(0, len(items), bs):
            idx = order[s:s + bs]
            if augment:
                x = np.stack([_augment(items[i], cfg, target, erng.split(1, int(i)), audit) for i in idx])
            else:
                x = np.stack([crop_or_pad(FeatureMatrix(items[i].feat, cfg.dsp.shift_ms), target,
                                          erng.split(1, int(i)), mode="train").data for i in idx])
            logits, _ = model(x, None if aux is None else aux[idx])
            loss, grad = cross_entropy_loss(logits, labels[idx])
            model.zero_grad()
            model.backward(grad)
            opt.step()
            total += loss * len(idx)
        row = {"epoch": epoch, "loss": total / len(items), "lr": float(opt.lr)}
        opt.lr = sched.step(row["loss"])
        if devel is not None:
            model.eval()
            dx, dy, daux = devel
            logits, _ = _batched_forward(model, dx, daux, cfg.train.eval_batch_size)
            row["devel_uar"] = uar(dy, logits.argmax(axis=1))
        log.append(row)
        if on_epoch is not None:
            on_epoch(row)
    model.eval()
    return log


def _aux_model_config(cfg: PipelineConfig, n_classes: int) -> ResNetEmbedConfig:
    return replace(cfg.model, aux_fusion="none", embed_dim=cfg.model.aux_dim, n_classes=n_classes)


def train_mask(manifest: Manifest, cfg: PipelineConfig, jobs: int = 1, on_epoch=None) -> TrainResult:
    """Train the embedding classifier on the ``train`` split; score ``devel`` each epoch."""
    cfg.validate("mask")
    manifest.validate("mask")
    audit = AuditLog()
    train_recs = manifest.split("train")
    pool = _speed_pool(manifest, train_recs, cfg, jobs)
    norm = GlobalNorm.fit([f for _, f in pool])
    n_factors = len(pool) // len(train_recs)
    rec_of = [train_recs[i // n_factors] for i in range(len(pool))]
    items = [TrainItem(ident, norm.apply(f).astype(np.float32), rec.label_index)
             for (ident, f), rec in zip(pool, rec_of)]
    target = cfg.speed.target_frames
    devel_recs = manifest.split("devel")
    dx = eval_features(manifest, devel_recs, cfg, norm, target, audit, jobs)
    dy = np.array([r.label_index for r in devel_recs])

    extra, extra_t = {}, {}
    aux_train = aux_devel = None
    if cfg.train.aux_source != "none":
        aux_labels, classes = _aux_labels(rec_of, cfg.train.aux_source)
        aux_items = [replace(it, label=a) for it, a in zip(items, aux_labels)]
        aux_model = ResNetEmbed(_aux_model_config(cfg, len(classes)), cfg.dsp.n_mels, seed=cfg.train.seed + 1)
        aux_log = fit_classifier(aux_model, aux_items, None, cfg, cfg.train.aux_epochs, 20, audit, augment=False)
        tx = np.stack([crop_or_pad(FeatureMatrix(it.feat, cfg.dsp.shift_ms), target, mode="eval").data
                       for it in items])
        _, aux_train = _batched_forward(aux_model, tx, None, cfg.train.eval_batch_size)
        _, aux_devel = _batched_forward(aux_model, dx, None, cfg.train.eval_batch_size)
        extra["aux"] = {"source": cfg.train.aux_source, "classes": classes, "model": aux_model.descriptor(),
                        "final_loss": aux_log[-1]["loss"]}
        extra_t.update({f"aux/{k}": v for k, v in aux_model.state_dict().items()})

    model = ResNetEmbed(cfg.model, cfg.dsp.n_mels, seed=cfg.train.seed)
    log = fit_classifier(model, items, aux_train, cfg, cfg.optim.epochs, 10, audit,
                         devel=(dx, dy, aux_devel), on_epoch=on_epoch)
    audit.check_eval_clean()
    extra.update(target_frames=target, dsp=asdict(cfg.dsp), sample_rate_hz=cfg.train.sample_rate_hz,
                 config_fingerprint=cfg.fingerprint())
    extra_t.update(norm.tensors())
    ckpt = make_checkpoint(model, None, epoch=cfg.optim.epochs, seed=cfg.train.seed,
                           extra=extra, extra_tensors=extra_t)
    return TrainResult(ckpt, log, audit)


# ----------------------------------------------------------- scoring paths

@dataclass
class MaskScorer:
    """A trained checkpoint plus everything needed to featurize clips for it."""

    model: ResNetEmbed
    norm: GlobalNorm
    cfg: PipelineConfig
    aux_model: ResNetEmbed | None = None

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint, cfg: PipelineConfig | None = None) -> "MaskScorer":
        if ckpt.descriptor.get("kind") != "resnet_embed":
            raise IntegrityError(f"expected a resnet_embed checkpoint, got {ckpt.descriptor.get('kind')!r}")
        extra = ckpt.descriptor.get("extra", {})
        if cfg is not None and ResNetEmbedConfig(**ckpt.descriptor["config"]) != cfg.model:
            raise IntegrityError("checkpoint architecture does not match model.* in the config")
        base = cfg or PipelineConfig()
        try:
            run_cfg = replace(base, dsp=FbankConfig(**extra["dsp"]),
                              speed=replace(base.speed, target_frames=int(extra["target_frames"])),
                              train=replace(base.train, sample_rate_hz=int(extra["sample_rate_hz"])))
        except KeyError as exc:
            raise IntegrityError(f"checkpoint descriptor lacks {exc}") from None
        tensors = extra_tensors(ckpt)
        aux_model = None
        if "aux" in extra:
            aux_ckpt = ModelCheckpoint(extra["aux"]["model"],
                                       {k[4:]: v for k, v in tensors.items() if k.startswith("aux/")})
            aux_model = build_model(aux_ckpt)
        return cls(build_model(ckpt), GlobalNorm.from_tensors(tensors), run_cfg, aux_model)

    def features(self, manifest, records, audit=None, jobs=1) -> np.ndarray:
        return eval_features(manifest, records, self.cfg, self.norm, self.cfg.speed.target_frames, audit, jobs)

    def forward(self, x):
        bs = self.cfg.train.eval_batch_size
        aux = None
        if self.aux_model is not None:
            _, aux = _batched_forward(self.aux_model, x, None, bs)
        return _batched_forward(self.model, x, aux, bs)


def extract_embeddings(ckpt: ModelCheckpoint, manifest: Manifest, split: str, cfg: PipelineConfig | None = None,
                       system: str = "", jobs: int = 1, audit: AuditLog | None = None) -> EmbeddingSet:
    """Eval-mode embeddings, one row per clip of ``split`` in manifest order."""
    scorer = MaskScorer.from_checkpoint(ckpt, cfg)
    records = manifest.split(split)
    if not records:
        raise DataError(f"split {split!r} is empty")
    _, emb = scorer.forward(scorer.features(manifest, records, audit or AuditLog(), jobs))
    return EmbeddingSet(emb.astype(np.float32), [r.label_index for r in records], system,
                        [r.path for r in records])


def softmax_probabilities(ckpt: ModelCheckpoint, manifest: Manifest, split: str, jobs: int = 1):
    """``(ids, P(mask))`` from the network's own output layer."""
    scorer = MaskScorer.from_checkpoint(ckpt)
    records = manifest.split(split)
    logits, _ = scorer.forward(scorer.features(manifest, records, AuditLog(), jobs))
    return [r.path for r in records], softmax(logits.astype(np.float64))[:, 1]


# --------------------------------------------------------------- file I/O

def write_embeddings(path, data: EmbeddingSet) -> None:
    """``PEMB`` | version u16 | n u32 | dim u32 | f32 matrix | i32 labels | u32 + JSON meta."""
    mat = np.ascontiguousarray(data.matrix, dtype="<f4")
    meta = json.dumps({"system": data.system, "ids": list(data.ids)}).encode("utf-8")
    blob = b"".join([EMB_MAGIC, struct.pack("<HII", EMB_VERSION, *mat.shape), mat.tobytes(),
                     np.ascontiguousarray(data.labels, dtype="<i4").tobytes(),
                     struct.pack("<I", len(meta)), meta])
    Path(path).write_bytes(blob)


def read_embeddings(path) -> EmbeddingSet:
    blob = Path(path).read_bytes()
    if blob[:4] != EMB_MAGIC:
        raise FormatError(f"{path}: not an embedding file (bad magic)")
    if len(blob) < 14:
        raise IntegrityError(f"{path}: truncated embedding header")
    version, n, dim = struct.unpack_from("<HII", blob, 4)
    if version != EMB_VERSION:
        raise FormatError(f"{path}: unsupported embedding version {version}")
    pos = 14
    need = pos + 4 * n * dim + 4 * n + 4
    if len(blob) < need:
        raise IntegrityError(f"{path}: embedding payload truncated")
    mat = np.frombuffer(blob, "<f4", n * dim, pos).reshape(n, dim).astype(np.float32)
    pos += 4 * n * dim
    labels = np.frombuffer(blob, "<i4", n, pos).astype(np.int64)
    pos += 4 * n
    (mlen,) = struct.unpack_from("<I", blob, pos)
    if len(blob) != pos + 4 + mlen:
        raise IntegrityError(f"{path}: embedding metadata length mismatch")
    meta = json.loads(blob[pos + 4:].decode("utf-8"))
    return EmbeddingSet(mat, labels, meta.get("system", ""), meta.get("ids", []))


PRED_HEADER = ["id", "prob", "pred"]


def write_predictions(path, ids, probs) -> None:
    probs = np.asarray(probs, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRED_HEADER)
        for i, p in zip(ids, probs):
            w.writerow([i, f"{p:.8f}", int(p >= 0.5)])


def read_predictions(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != PRED_HEADER:
            raise FormatError(f"{path}: prediction header must be {','.join(PRED_HEADER)}")
        rows = list(reader)
    try:
        return [r["id"] for r in rows], np.array([float(r["prob"]) for r in rows])
    except ValueError as exc:
        raise DataError(f"{path}: bad probability value ({exc})") from None
