"""``paraforge`` command-line interface.

Exit codes: 0 success, 2 validation error, 3 data error, 4 numeric fault.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .augment import random_erase, spec_augment, speed_perturb_set
from .dsp import log_fbank, read_features, read_wav, write_features, write_wav
from .errors import ConfigError, DataError, ParaforgeError
from .metrics import breath_report, mask_report
from .nnet import load_checkpoint, save_checkpoint
from .pipeline.breath import (by_speaker, predict_breath, read_breath_predictions, train_breath,
                              write_breath_predictions)
from .pipeline.config import load_config
from .pipeline.experiment import run_experiment
from .pipeline.features import parallel_map
from .pipeline.manifest import read_manifest
from .pipeline.mask import (extract_embeddings, read_embeddings, read_predictions, softmax_probabilities,
                            train_mask, write_embeddings, write_predictions)
from .pipeline.synth import SynthSpec, read_belt, synth_breath_corpus, synth_mask_corpus
from .rng import Rng
from .svm import decide, fuse_probabilities, load_svm, save_svm, smo_train


def _config(args, task):
    overrides = {"train.seed": args.seed} if args.seed is not None else None
    return load_config(args.config, task, overrides)


def _inputs(path: Path, suffix: str) -> list[tuple[Path, Path]]:
    """``(file, path relative to the input root)`` pairs, sorted for stable order."""
    if path.is_file():
        return [(path, Path(path.name))]
    if not path.is_dir():
        raise DataError(f"input {path} does not exist")
    files = sorted(p for p in path.rglob(f"*{suffix}") if p.is_file())
    if not files:
        raise DataError(f"no {suffix} files under {path}")
    return [(p, p.relative_to(path)) for p in files]


def _progress(quiet):
    return (lambda msg: None) if quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))


# ------------------------------------------------------------------ commands

def cmd_synth_data(args):
    seed = args.seed if args.seed is not None else 0
    fields = {"seed": seed}
    for name in ("n_speakers", "clips_per_speaker", "clip_seconds", "mask_attenuation_db", "mask_cutoff_hz"):
        if getattr(args, name) is not None:
            fields[name] = getattr(args, name)
    if args.split_sizes:
        fields["split_sizes"] = tuple(args.split_sizes)
    if args.task == "mask":
        manifest = synth_mask_corpus(SynthSpec(**fields), args.out)
    else:
        manifest = synth_breath_corpus(SynthSpec.breath(**fields), args.out)
    print(f"wrote {len(manifest)} clips; manifest {Path(args.out) / 'manifest.csv'}")


def cmd_fbank(args):
    cfg = _config(args, args.task)
    out = Path(args.out)
    pairs = _inputs(Path(args.inp), ".wav")

    def work(pair):
        src, rel = pair
        clip = read_wav(src)
        cfg.dsp.check_rate(clip.sample_rate_hz)
        dest = (out / rel).with_suffix(".pfea")
        dest.parent.mkdir(parents=True, exist_ok=True)
        write_features(dest, log_fbank(clip, cfg.dsp))

    parallel_map(work, pairs, args.jobs)
    print(f"wrote {len(pairs)} feature files to {out}")


def cmd_augment(args):
    cfg = _config(args, "mask")
    seed = args.seed if args.seed is not None else cfg.train.seed
    root = Rng(seed)
    out = Path(args.out)
    suffix = ".wav" if args.scheme == "speed" else ".pfea"
    pairs = _inputs(Path(args.inp), suffix)

    def work(indexed):
        i, (src, rel) = indexed
        if args.scheme == "speed":
            clip = read_wav(src)
            for factor, perturbed in zip(cfg.speed.factors, speed_perturb_set(clip, cfg.speed)):
                dest = out / rel.parent / f"{rel.stem}_sp{factor:g}.wav"
                dest.parent.mkdir(parents=True, exist_ok=True)
                write_wav(dest, perturbed)
            return
        feat = read_features(src)
        if args.scheme == "specaug":
            feat = spec_augment(feat, cfg.specaug, root.split(i))
        else:
            feat = random_erase(feat, cfg.erase, root.split(i))
        dest = out / rel
        dest.parent.mkdir(parents=True, exist_ok=True)
        write_features(dest, feat)

    parallel_map(work, list(enumerate(pairs)), args.jobs)
    print(f"augmented {len(pairs)} files ({args.scheme}) into {out}")


def _write_log(path, result):
    if path:
        Path(path).write_text(result.log_csv(), encoding="utf-8")


def cmd_train_mask(args):
    cfg = _config(args, "mask")
    manifest = read_manifest(args.manifest, "mask")
    log = _progress(args.quiet)
    result = train_mask(manifest, cfg, args.jobs,
                        on_epoch=lambda r: log(f"epoch {r['epoch']} loss {r['loss']:.4f} lr {r['lr']:g} "
                                               f"devel_uar {r['devel_uar']:.4f}"))
    save_checkpoint(args.out, checkpoint=result.checkpoint)
    _write_log(args.log, result)
    print(f"saved {args.out}; final devel UAR {result.log[-1]['devel_uar']:.4f}")


def cmd_train_breath(args):
    cfg = _config(args, "breath")
    manifest = read_manifest(args.manifest, "breath")
    log = _progress(args.quiet)
    result = train_breath(manifest, cfg, args.jobs,
                          on_epoch=lambda r: log(f"epoch {r['epoch']} loss {r['loss']:.4f} lr {r['lr']:g} "
                                                 f"devel_pcc {r['devel_pcc']:.4f}"))
    save_checkpoint(args.out, checkpoint=result.checkpoint)
    _write_log(args.log, result)
    print(f"saved {args.out}; devel PCC {result.log[0]['devel_pcc']:.4f} -> {result.log[-1]['devel_pcc']:.4f}")


def cmd_extract_embed(args):
    cfg = _config(args, "mask") if args.config else None
    manifest = read_manifest(args.manifest, "mask")
    emb = extract_embeddings(load_checkpoint(args.model), manifest, args.split, cfg, args.system, args.jobs)
    write_embeddings(args.out, emb)
    print(f"wrote {len(emb)} x {emb.matrix.shape[1]} embeddings to {args.out}")


def cmd_svm_train(args):
    cfg = _config(args, "mask")
    data = read_embeddings(args.embeddings)
    sv = cfg.svm
    model = smo_train(data, sv.C, sv.gamma or None, sv.tol, sv.max_passes, cfg.train.seed)
    save_svm(args.out, model)
    print(f"saved {args.out}; {model.support_vectors.shape[0]} support vectors")


def _magic(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read(4)


def cmd_predict(args):
    magic = _magic(args.model)
    if magic == b"PSVM":
        if not args.embeddings:
            raise ConfigError("predict with an SVM model needs --embeddings")
        data = read_embeddings(args.embeddings)
        write_predictions(args.out, data.ids, load_svm(args.model).predict_proba(data.matrix))
        print(f"wrote {len(data)} predictions to {args.out}")
        return
    if magic != b"PCKP":
        raise DataError(f"{args.model}: neither an SVM model nor a network checkpoint")
    if not args.manifest:
        raise ConfigError("predict with a network checkpoint needs --manifest")
    ckpt = load_checkpoint(args.model)
    if ckpt.descriptor.get("kind") == "bilstm":
        cfg = _config(args, "breath")
        manifest = read_manifest(args.manifest)
        data, preds = predict_breath(ckpt, manifest, args.split, cfg, args.jobs)
        index = write_breath_predictions(args.out, data, preds)
        print(f"wrote {len(data.ids)} belt predictions; index {index}")
    else:
        manifest = read_manifest(args.manifest, "mask")
        ids, probs = softmax_probabilities(ckpt, manifest, args.split, args.jobs)
        write_predictions(args.out, ids, probs)
        print(f"wrote {len(ids)} softmax predictions to {args.out}")


def cmd_fuse(args):
    loaded = [read_predictions(p) for p in args.inputs]
    ids = loaded[0][0]
    for path, (other, _) in zip(args.inputs[1:], loaded[1:]):
        if other != ids:
            raise DataError(f"{path} lists different clips (or order) than {args.inputs[0]}")
    write_predictions(args.out, ids, fuse_probabilities([p for _, p in loaded]))
    print(f"fused {len(loaded)} systems into {args.out}")


def cmd_eval(args):
    manifest = read_manifest(args.truth)
    recs = {r.path: r for r in manifest}
    if args.task == "mask":
        ids, probs = read_predictions(args.pred)
        missing = [i for i in ids if i not in recs]
        if missing:
            raise DataError(f"predicted clips not in the manifest: {missing[:3]}")
        report = mask_report([recs[i].label_index for i in ids], decide(probs))
    else:
        preds = read_breath_predictions(Path(args.pred) / "predictions.csv" if Path(args.pred).is_dir()
                                        else args.pred)
        missing = [i for i in preds if i not in recs or not recs[i].belt_path]
        if missing:
            raise DataError(f"predicted clips without a belt signal in the manifest: {missing[:3]}")
        ids = sorted(preds)
        speakers = [preds[i][0] for i in ids]
        truths = by_speaker(speakers, [read_belt(manifest.resolve(recs[i].belt_path)) for i in ids])
        report = breath_report(truths, by_speaker(speakers, [preds[i][1] for i in ids]), args.aggregation)
    if args.out:
        Path(args.out).write_text(report.to_csv(), encoding="utf-8")
    print(report.to_text(), end="")


def cmd_run_experiment(args):
    result = run_experiment(args.plan, args.out, args.seed, args.jobs, log=_progress(args.quiet))
    for row in result["rows"] + [result["fused"]]:
        scores = " ".join(f"{k}={v:.4f}" for k, v in row.items() if isinstance(v, float))
        print(f"{row['system']}: {scores}")


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (overrides train.seed)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="flat key = value config file")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker threads for file-level work")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="no progress on stderr")

    parser = argparse.ArgumentParser(prog="paraforge", parents=[common],
                                     description="Mask detection and breathing-signal regression toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=fn)
        return p

    p = add("synth-data", cmd_synth_data, "generate a seeded synthetic corpus and its manifest")
    p.add_argument("--task", choices=("mask", "breath"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", dest="n_speakers", type=int)
    p.add_argument("--clips", dest="clips_per_speaker", type=int)
    p.add_argument("--seconds", dest="clip_seconds", type=float)
    p.add_argument("--split-sizes", type=int, nargs=3, metavar=("TRAIN", "DEVEL", "TEST"))
    p.add_argument("--attenuation-db", dest="mask_attenuation_db", type=float)
    p.add_argument("--cutoff-hz", dest="mask_cutoff_hz", type=float)

    p = add("fbank", cmd_fbank, "extract log-Fbank features (.pfea) from WAV files")
    p.add_argument("--in", dest="inp", required=True, help="WAV file or directory (searched recursively)")
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=("mask", "breath"), default="mask", help="which default dsp settings")

    p = add("augment", cmd_augment, "apply one augmentation scheme to every file of a directory")
    p.add_argument("--scheme", choices=("specaug", "erase", "speed"), required=True)
    p.add_argument("--in", dest="inp", required=True, help=".pfea (specaug/erase) or .wav (speed) inputs")
    p.add_argument("--out", required=True)

    p = add("train-mask", cmd_train_mask, "train the embedding classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-epoch CSV log")

    p = add("train-breath", cmd_train_breath, "train the BiLSTM breathing regressor")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-epoch CSV log")

    p = add("extract-embed", cmd_extract_embed, "eval-mode embeddings for one split")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "devel", "test"), required=True)
    p.add_argument("--system", default="")
    p.add_argument("--out", required=True)

    p = add("svm-train", cmd_svm_train, "train the RBF SVM back-end on embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)

    p = add("predict", cmd_predict, "score embeddings with an SVM, or a split with a network checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--manifest")
    p.add_argument("--split", choices=("train", "devel", "test"), default="devel")
    p.add_argument("--out", required=True, help="CSV (mask) or directory (breath)")

    p = add("fuse", cmd_fuse, "average the probabilities of several prediction files")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "UAR or PCC report against a manifest")
    p.add_argument("--task", choices=("mask", "breath"), required=True)
    p.add_argument("--truth", required=True, help="manifest CSV")
    p.add_argument("--pred", required=True, help="prediction CSV (mask) or prediction index/dir (breath)")
    p.add_argument("--aggregation", choices=("mean", "pooled"), default="mean")
    p.add_argument("--out", help="also write the report as CSV")

    p = add("run-experiment", cmd_run_experiment, "train, score and fuse the systems of a plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("seed", None), ("config", None), ("jobs", 1), ("quiet", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    if args.jobs < 1:
        print("paraforge: error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except ParaforgeError as exc:
        print(f"paraforge: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"paraforge: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
