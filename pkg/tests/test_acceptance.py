"""Acceptance criteria 1-10, each printed as one pass/fail line in the run summary.

The two end-to-end criteria train desk-scale systems on the full synthetic corpora
and take a few minutes each.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest
from sklearn.datasets import make_moons

import paraforge.nnet.checkpoint as checkpoint_mod
from conftest import TINY_BREATH, TINY_MASK, config_text, peak_hz, record_acceptance, tone
from gradcases import layer_cases, model_cases
from paraforge.augment import RandomErasingConfig, SpecAugmentConfig, random_erase, spec_augment
from paraforge.dsp import FeatureMatrix, resample
from paraforge.errors import DataError, FormatError, IntegrityError
from paraforge.metrics import breath_report, pcc, uar
from paraforge.nnet import (BiLstmConfig, BiLstmRegressor, ResNetEmbed, ResNetEmbedConfig, build_model, gap, gsp,
                            load_checkpoint, save_checkpoint)
from paraforge.pipeline.breath import by_speaker, predict_breath, train_breath
from paraforge.pipeline.config import load_config
from paraforge.pipeline.experiment import run_experiment
from paraforge.pipeline.manifest import read_manifest
from paraforge.pipeline.mask import MaskScorer, softmax_probabilities, train_mask
from paraforge.pipeline.synth import read_belt
from paraforge.rng import Rng
from paraforge.svm import EmbeddingSet, decide, fuse_probabilities, kkt_violations, smo_train

TRIALS = 10_000


class Criterion:
    """Collects named checks and records one summary line when the block ends."""

    def __init__(self, number: int):
        self.number = number
        self.checks: dict[str, bool] = {}
        self.notes: list[str] = []

    def check(self, name: str, ok) -> None:
        self.checks[name] = bool(ok)

    def note(self, text: str) -> None:
        self.notes.append(text)


@contextlib.contextmanager
def criterion(number: int):
    c = Criterion(number)
    try:
        yield c
    except Exception as exc:
        record_acceptance(f"criterion {number}: FAIL raised {type(exc).__name__}: {exc}")
        raise
    failed = [k for k, ok in c.checks.items() if not ok]
    status = "FAIL" if failed or not c.checks else "PASS"
    tail = "; ".join(c.notes + ([f"failed: {', '.join(failed)}"] if failed else []))
    record_acceptance(f"criterion {number}: {status} {tail}".rstrip())
    assert c.checks and not failed, f"criterion {number} failed checks: {failed}"


def tree_digest(root) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


# ----------------------------------------------------------------- 1. gradients

def test_criterion_1_gradient_checks():
    with criterion(1) as c:
        start = time.perf_counter()
        layer_err = {name: fn() for name, fn in layer_cases().items()}
        model_err = {name: fn() for name, fn in model_cases().items()}
        elapsed = time.perf_counter() - start
        for name, err in layer_err.items():
            c.check(f"layer {name}", err < 1e-5)
        for name, err in model_err.items():
            c.check(f"model {name}", err < 1e-4)
        c.check("under 2 min", elapsed < 120.0)
        c.note(f"{len(layer_err)} layers max {max(layer_err.values()):.1e}, {len(model_err)} models max "
               f"{max(model_err.values()):.1e}, {elapsed:.1f} s")


# ------------------------------------------------------------------- 2. pooling

def naive_pool(x):
    c_, h_, w_ = x.shape
    mean, std = np.zeros(c_), np.zeros(c_)
    for c in range(c_):
        total = 0.0
        for i in range(h_):
            for j in range(w_):
                total += x[c, i, j]
        mean[c] = total / (h_ * w_)
        sq = 0.0
        for i in range(h_):
            for j in range(w_):
                sq += (x[c, i, j] - mean[c]) ** 2
        std[c] = math.sqrt(sq / (h_ * w_))
    return mean, std


def test_criterion_2_pooling_oracle():
    with criterion(2) as c:
        r = np.random.default_rng(2)
        worst = 0.0
        for _ in range(50):
            x = r.normal(size=tuple(r.integers(1, 9, size=3))) * r.uniform(0.1, 10) + r.normal()
            mean, std = naive_pool(x)
            worst = max(worst, np.abs(gap(x) - mean).max(), np.abs(gsp(x) - std).max())
        c.check("gap/gsp vs triple loop", worst <= 1e-12)
        const = np.full((4, 7, 5), 0.1) + np.arange(4)[:, None, None] * 1.7
        c.check("gsp of constant maps is 0", np.all(gsp(const) == 0.0))
        c.note(f"50 tensors, worst abs diff {worst:.1e}")


# -------------------------------------------------------------- 3. augmentation

def test_criterion_3_augmentation_properties():
    with criterion(3) as c:
        u, v = 98, 64
        feat = FeatureMatrix(1.0 + np.arange(u * v, dtype=np.float64).reshape(u, v))
        cfg = SpecAugmentConfig()
        root = Rng(3)
        bounded = identity = True
        for i in range(TRIALS):
            diff = spec_augment(feat, cfg, root.split(0, i)).data != feat.data
            rows, cols = np.all(diff, axis=1), np.all(diff, axis=0)
            if cols.sum() > cfg.F or rows.sum() > cfg.T or not np.array_equal(diff, rows[:, None] | cols[None, :]):
                bounded = False
            if not np.array_equal(spec_augment(feat, SpecAugmentConfig(F=0, T=0), root.split(1, i)).data, feat.data):
                identity = False
        c.check("specaug bounded, rest bit-identical", bounded)
        c.check("F=T=0 identity", identity)

        ecfg = RandomErasingConfig()
        slack = (u + v) / (u * v)
        applied, ratios = 0, []
        untouched_ok = True
        for i in range(TRIALS):
            out, rect = random_erase(feat, ecfg, root.split(2, i), return_rect=True)
            if rect is None:
                untouched_ok &= np.array_equal(out.data, feat.data)
                continue
            applied += 1
            top, left, h, w = rect
            zeroed = out.data == 0
            untouched_ok &= int(zeroed.sum()) == h * w and bool(zeroed[top:top + h, left:left + w].all())
            ratios.append(h * w / (u * v))
        rate = applied / TRIALS
        c.check("erase area within range +- slack",
                min(ratios) >= ecfg.area_ratio_min - slack and max(ratios) <= ecfg.area_ratio_max + slack)
        c.check("erase zeroes exactly one rectangle", untouched_ok)
        c.check("apply rate within 0.03", abs(rate - ecfg.apply_prob) <= 0.03)
        c.note(f"{TRIALS} trials each; erase ratio [{min(ratios):.4f}, {max(ratios):.4f}], apply rate {rate:.4f}")


# ----------------------------------------------------------- 4. speed perturbing

def test_criterion_4_speed_perturbation():
    with criterion(4) as c:
        r = np.random.default_rng(4)
        lengths_ok = True
        for n in list(r.integers(1000, 60000, size=40)) + [16000, 16001, 9]:
            clip = tone(300.0, n / 16000)
            for factor in (0.9, 1.1, 0.8, 1.25, 0.95):
                lengths_ok &= len(resample(clip, factor)) == math.floor(n / factor + 0.5)
        c.check("length == round(L / factor)", lengths_ok)
        clip = tone(440.0)
        c.check("factor 1.0 bit-identical", np.array_equal(resample(clip, 1.0).samples, clip.samples))
        worst = 0.0
        for freq in (220.0, 440.0, 1000.0, 3000.0):
            for factor in (0.9, 1.1):
                worst = max(worst, abs(peak_hz(resample(tone(freq), factor).samples, 16000) - freq * factor))
        c.check("tone peak scales within 1 Hz", worst <= 1.0)
        c.note(f"worst peak error {worst:.3f} Hz")


# ------------------------------------------------------------------- 5. metrics

def brute_uar(truth, pred):
    recalls = []
    for cls in sorted(set(truth)):
        idx = [i for i, t in enumerate(truth) if t == cls]
        recalls.append(sum(1 for i in idx if pred[i] == cls) / len(idx))
    return sum(recalls) / len(recalls)


def brute_pcc(x, y):
    n = len(x)
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def test_criterion_5_metric_oracles():
    with criterion(5) as c:
        r = np.random.default_rng(5)
        worst_uar = worst_pcc = 0.0
        for _ in range(1000):
            k, n = int(r.integers(2, 5)), int(r.integers(8, 200))
            truth = np.concatenate([np.arange(k), r.integers(0, k, n - k)])
            pred = r.integers(0, k, n)
            worst_uar = max(worst_uar, abs(uar(truth, pred) - brute_uar(truth.tolist(), pred.tolist())))
            x = r.normal(size=n) * r.uniform(0.01, 100)
            y = 0.5 * x + r.normal(size=n) * r.uniform(0.01, 10)
            worst_pcc = max(worst_pcc, abs(pcc(x, y) - brute_pcc(x.tolist(), y.tolist())))
        c.check("uar vs brute force", worst_uar <= 1e-12)
        c.check("pcc vs brute force", worst_pcc <= 1e-12)
        x = r.normal(size=500)
        c.check("pcc(x, x) = 1", pcc(x, x) == pytest.approx(1.0, abs=1e-12))
        c.check("pcc(x, -x) = -1", pcc(x, -x) == pytest.approx(-1.0, abs=1e-12))
        truth = np.repeat([0, 1], 50)
        c.check("constant predictor uar 0.5",
                uar(truth, np.zeros(100, int)) == 0.5 and uar(truth, np.ones(100, int)) == 0.5)
        c.note(f"1000 cases; worst uar diff {worst_uar:.1e}, worst pcc diff {worst_pcc:.1e}")


# ----------------------------------------------------------------------- 6. SVM

def test_criterion_6_svm():
    with criterion(6) as c:
        x, y = make_moons(200, noise=0.1, random_state=0)
        trace: list[float] = []
        model = smo_train(EmbeddingSet(x, y), C=10.0, gamma=1.0, tol=1e-3, trace=trace)
        kkt = kkt_violations(model, x, y).max()
        acc = np.mean(model.predict(x) == y)
        c.check("KKT within 1e-3", kkt < 1e-3)
        c.check("dual objective non-decreasing", np.all(np.diff(trace) >= 0.0))
        c.check("two-moons accuracy >= 0.95", acc >= 0.95)
        xor_x = np.array([[0, 0], [1, 1], [0, 1], [1, 0]], float)
        xor_y = np.array([0, 0, 1, 1])
        xor_model = smo_train(EmbeddingSet(xor_x, xor_y), C=10.0, gamma=1.0)
        c.check("XOR accuracy 1.0", np.array_equal(xor_model.predict(xor_x), xor_y))
        r = np.random.default_rng(6)
        same = True
        for _ in range(1000):
            probs = r.uniform(0, 1, int(r.integers(1, 50)))
            probs[r.integers(probs.size)] = 0.5
            same &= np.array_equal(decide(fuse_probabilities([probs] * int(r.integers(1, 5)))), decide(probs))
        c.check("fusion of identical systems keeps decisions", same)
        c.note(f"max KKT residual {kkt:.1e} over {len(trace)} updates, moons acc {acc:.3f}")


# ------------------------------------------------------------- 7. MSC end to end

DESK_MASK = {"model.stage_channels": [8, 16, 32, 64], "optim.epochs": 6}


@pytest.fixture(scope="module")
def mask_experiment(mask_corpus, tmp_path_factory):
    root = tmp_path_factory.mktemp("msc")
    (root / "desk.cfg").write_text(config_text(DESK_MASK))
    (root / "msc.plan").write_text(
        'task = "mask"\n'
        f'manifest = "{mask_corpus / "manifest.csv"}"\n'
        'config = "desk.cfg"\n'
        'systems = ["speed_specaug*", "speed_specaug_erase*"]\n'
        'system.speed_specaug_erase.train.augment = ["speed", "specaug", "erase"]\n')
    start = time.perf_counter()
    result = run_experiment(root / "msc.plan", root / "out", log=lambda m: None)
    return result, time.perf_counter() - start, root / "out"


@pytest.mark.slow
def test_criterion_7_mask_end_to_end(mask_experiment):
    result, elapsed, _ = mask_experiment
    with criterion(7) as c:
        rows = {r["system"]: r for r in result["rows"]}
        main = rows["speed_specaug"]["devel_uar"]
        best = max(r["devel_uar"] for r in rows.values())
        fused = result["fused"]["devel_uar"]
        c.check("speed+specaug devel UAR >= 0.90", main >= 0.90)
        c.check("within 10 min", elapsed <= 600.0)
        c.check("fused >= best single - 0.02", fused >= best - 0.02)
        c.note(f"devel UAR speed+specaug {main:.3f}, +erase {rows['speed_specaug_erase']['devel_uar']:.3f}, "
               f"fused {fused:.3f}; {elapsed:.0f} s")


@pytest.mark.slow
def test_mask_training_loss_falls(mask_experiment):
    _, _, out = mask_experiment
    for system in ("speed_specaug", "speed_specaug_erase"):
        lines = (out / system / "train_log.csv").read_text().splitlines()
        loss_col = lines[0].split(",").index("loss")
        losses = [float(line.split(",")[loss_col]) for line in lines[1:]]
        assert losses[-1] <= losses[0]


@pytest.mark.slow
def test_embeddings_survive_spec_augment(mask_experiment, mask_corpus):
    _, _, out = mask_experiment
    scorer = MaskScorer.from_checkpoint(load_checkpoint(out / "speed_specaug" / "model.pckp"))
    manifest = read_manifest(mask_corpus / "manifest.csv", "mask")
    x = scorer.features(manifest, manifest.split("devel"))
    masked = np.stack([spec_augment(FeatureMatrix(f), SpecAugmentConfig(), Rng(7).split(i)).data
                       for i, f in enumerate(x)])
    _, clean = scorer.forward(x)
    _, noisy = scorer.forward(masked)
    cos = np.sum(clean * noisy, axis=1) / (np.linalg.norm(clean, axis=1) * np.linalg.norm(noisy, axis=1))
    assert cos.mean() > 0.8


# ------------------------------------------------------------- 8. BSC end to end

DESK_BREATH = {"optim.epochs": 30, "train.segment_frames": 500}


@pytest.mark.slow
def test_criterion_8_breath_end_to_end(breath_corpus):
    with criterion(8) as c:
        manifest = read_manifest(breath_corpus / "manifest.csv", "breath")
        cfg = load_config(None, "breath", DESK_BREATH)
        c.check("reference architecture",
                (cfg.lstm.n_layers, cfg.lstm.hidden_per_direction, cfg.lstm.dropout, cfg.optim.kind,
                 cfg.optim.batch_size) == (2, 256, 0.6, "adam", 16))
        start = time.perf_counter()
        result = train_breath(manifest, cfg)
        data, preds = predict_breath(result.checkpoint, manifest, "test", cfg)
        elapsed = time.perf_counter() - start
        recs = {r.path: r for r in manifest.split("test")}
        truths = by_speaker(data.speakers, [read_belt(manifest.resolve(recs[i].belt_path)) for i in data.ids])
        held_out = breath_report(truths, by_speaker(data.speakers, preds), "mean").value
        init, final = result.log[0]["devel_pcc"], result.log[-1]["devel_pcc"]
        c.check("held-out PCC >= 0.80", held_out >= 0.80)
        c.check("within 15 min", elapsed <= 900.0)
        c.check("final PCC > initial PCC", final > init)
        c.note(f"test PCC {held_out:.3f}, devel PCC {init:.3f} -> {final:.3f}; {elapsed:.0f} s")


# ---------------------------------------------------------------- 9. determinism

PLAN = ('task = "mask"\nmanifest = "mask/manifest.csv"\nconfig = "mask.cfg"\n'
        'systems = ["plain*", "erase*"]\nsystem.erase.train.augment = ["speed", "specaug", "erase"]\n')


def cli_chain(root) -> int:
    """Run every subcommand once inside ``root``; stdout is kept as an output too."""
    root.mkdir()
    (root / "mask.cfg").write_text(config_text(TINY_MASK))
    (root / "breath.cfg").write_text(config_text(TINY_BREATH))
    (root / "exp.plan").write_text(PLAN)
    (root / "stdout").mkdir()
    commands = [
        ["synth-data", "--task", "mask", "--out", "mask", "--speakers", "4", "--clips", "6",
         "--split-sizes", "2", "1", "1"],
        ["synth-data", "--task", "breath", "--out", "breath", "--speakers", "3", "--seconds", "20",
         "--split-sizes", "1", "1", "1"],
        ["--jobs", "2", "fbank", "--in", "mask/wav", "--out", "feats"],
        ["augment", "--scheme", "specaug", "--in", "feats", "--out", "aug_specaug"],
        ["augment", "--scheme", "erase", "--in", "feats", "--out", "aug_erase"],
        ["augment", "--scheme", "speed", "--in", "mask/wav/s00", "--out", "aug_speed"],
        ["--config", "mask.cfg", "train-mask", "--manifest", "mask/manifest.csv", "--out", "m.pckp",
         "--log", "m_log.csv"],
        ["--config", "mask.cfg", "extract-embed", "--model", "m.pckp", "--manifest", "mask/manifest.csv",
         "--split", "train", "--out", "train.pemb"],
        ["--config", "mask.cfg", "extract-embed", "--model", "m.pckp", "--manifest", "mask/manifest.csv",
         "--split", "devel", "--out", "devel.pemb"],
        ["--config", "mask.cfg", "svm-train", "--embeddings", "train.pemb", "--out", "s.psvm"],
        ["predict", "--model", "s.psvm", "--embeddings", "devel.pemb", "--out", "svm.csv"],
        ["predict", "--model", "m.pckp", "--manifest", "mask/manifest.csv", "--out", "soft.csv"],
        ["fuse", "--in", "svm.csv", "soft.csv", "--out", "fused.csv"],
        ["eval", "--task", "mask", "--truth", "mask/manifest.csv", "--pred", "fused.csv", "--out", "mask_eval.csv"],
        ["--config", "breath.cfg", "train-breath", "--manifest", "breath/manifest.csv", "--out", "b.pckp",
         "--log", "b_log.csv"],
        ["--config", "breath.cfg", "predict", "--model", "b.pckp", "--manifest", "breath/manifest.csv",
         "--split", "test", "--out", "bpred"],
        ["eval", "--task", "breath", "--truth", "breath/manifest.csv", "--pred", "bpred",
         "--out", "breath_eval.csv"],
        ["run-experiment", "--plan", "exp.plan", "--out", "exp"],
    ]
    env = {**os.environ, "PYTHONHASHSEED": "0"}
    for i, argv in enumerate(commands):
        proc = subprocess.run([sys.executable, "-m", "paraforge", "--quiet", "--seed", "5", *argv], cwd=root,
                              capture_output=True, text=True, env=env)
        assert proc.returncode == 0, f"{argv}: {proc.stderr}"
        (root / "stdout" / f"{i:02d}.txt").write_text(proc.stdout)
    return len(commands)


def test_criterion_9_cli_determinism(tmp_path):
    with criterion(9) as c:
        n_commands = cli_chain(tmp_path / "a")
        cli_chain(tmp_path / "b")
        a, b = tree_digest(tmp_path / "a"), tree_digest(tmp_path / "b")
        c.check("same file set", a.keys() == b.keys())
        differing = sorted(k for k in a if a[k] != b.get(k))
        c.check("byte-identical outputs", not differing)
        c.check("experiment bundle present", "exp/report.csv" in a and "exp/fused_test_pred.csv" in a)
        c.note(f"{n_commands} commands, {len(a)} files compared" + (f"; differing {differing[:5]}" if differing else ""))


# ------------------------------------------------------------------ 10. checkpoints

def same_outputs(a, b) -> bool:
    a, b = (a, b) if isinstance(a, tuple) else ((a,), (b,))
    return len(a) == len(b) and all(np.array_equal(p, q) for p, q in zip(a, b))


def _corruptions(blob: bytes):
    for pos in (0, 5, 17, len(blob) // 3, len(blob) // 2, len(blob) - 9, len(blob) - 1):
        bad = bytearray(blob)
        bad[pos] ^= 0x20
        yield f"flip@{pos}", bytes(bad)
    for cut in (4, 40, len(blob) // 2, len(blob) - 1):
        yield f"cut@{cut}", blob[:cut]


def test_criterion_10_checkpoint_roundtrip(small_mask_corpus, small_breath_corpus, tmp_path, monkeypatch):
    with criterion(10) as c:
        r = np.random.default_rng(10)
        fresh = ResNetEmbed(ResNetEmbedConfig(stage_channels=(4, 8), blocks_per_stage=(1, 1), embed_dim=8), 16,
                            seed=3).eval()
        save_checkpoint(tmp_path / "fresh.pckp", fresh, epoch=0, seed=1)
        x = r.normal(size=(3, 20, 16)).astype(np.float32)
        reloaded = build_model(load_checkpoint(tmp_path / "fresh.pckp"))
        c.check("fresh resnet forward bit-exact",
                same_outputs(fresh.forward(x), reloaded.forward(x)))

        lstm = BiLstmRegressor(BiLstmConfig(hidden_per_direction=5), 12, seed=4).eval()
        save_checkpoint(tmp_path / "lstm.pckp", lstm)
        seq = r.normal(size=(2, 30, 12)).astype(np.float32)
        c.check("fresh bilstm forward bit-exact",
                np.array_equal(lstm.forward(seq), build_model(load_checkpoint(tmp_path / "lstm.pckp")).forward(seq)))

        manifest = read_manifest(small_mask_corpus / "manifest.csv", "mask")
        cfg = load_config(None, "mask", TINY_MASK)
        trained = train_mask(manifest, cfg).checkpoint
        save_checkpoint(tmp_path / "trained.pckp", checkpoint=trained)
        back = load_checkpoint(tmp_path / "trained.pckp")
        in_mem, from_disk = MaskScorer.from_checkpoint(trained, cfg), MaskScorer.from_checkpoint(back, cfg)
        feats = in_mem.features(manifest, manifest.split("devel"))
        c.check("trained resnet forward bit-exact",
                same_outputs(in_mem.forward(feats), from_disk.forward(feats)))
        ids, p_mem = softmax_probabilities(trained, manifest, "devel")
        _, p_disk = softmax_probabilities(back, manifest, "devel")
        truth = {rec.path: rec.label_index for rec in manifest.split("devel")}
        labels = [truth[i] for i in ids]
        c.check("eval UAR reproduced", uar(labels, decide(p_mem)) == uar(labels, decide(p_disk)))

        bmanifest = read_manifest(small_breath_corpus / "manifest.csv", "breath")
        bcfg = load_config(None, "breath", TINY_BREATH)
        bckpt = train_breath(bmanifest, bcfg).checkpoint
        save_checkpoint(tmp_path / "breath.pckp", checkpoint=bckpt)
        _, pa = predict_breath(bckpt, bmanifest, "test", bcfg)
        _, pb = predict_breath(load_checkpoint(tmp_path / "breath.pckp"), bmanifest, "test", bcfg)
        c.check("trained bilstm predictions bit-exact", np.array_equal(pa, pb))

        blob = (tmp_path / "trained.pckp").read_bytes()
        cases = list(_corruptions(blob))
        outcomes = {}
        for name, bad in cases:
            (tmp_path / "bad.pckp").write_bytes(bad)
            try:
                load_checkpoint(tmp_path / "bad.pckp")
                outcomes[name] = None
            except DataError as exc:
                outcomes[name] = type(exc)
        # a damaged magic number means "not a checkpoint"; any other damage fails the integrity check
        c.check("magic damage raises FormatError", outcomes.pop("flip@0") is FormatError)
        c.check("other corruption raises IntegrityError", all(t is IntegrityError for t in outcomes.values()))

        def broken_replace(src, dst):
            raise OSError("disk full")

        monkeypatch.setattr(checkpoint_mod.os, "replace", broken_replace)
        with contextlib.suppress(OSError):
            save_checkpoint(tmp_path / "trained.pckp", fresh)
        monkeypatch.undo()
        c.check("failed save leaves the old file", (tmp_path / "trained.pckp").read_bytes() == blob)
        c.note(f"{len(cases)} corrupted/truncated files rejected")
