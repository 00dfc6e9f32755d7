"""Acceptance criteria, one test each.

Every test prints a ``[PASS]``/``[FAIL]`` line and the full set is repeated in
the "acceptance criteria" section of the pytest summary. Criteria 7-10 share
one synthetic end-to-end run driven entirely through the command line.
"""

import json
import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from ukat.cli import run
from ukat.dsp import FrontendConfig, Waveform, extract_log_mel
from ukat.inference import DecisionConfig, decide
from ukat.labels import LabelVocabulary, merge_vocabularies
from ukat.metrics import average_precision, mean_average_precision
from ukat.model import (
    backward,
    build_model,
    count_parameters,
    forward,
    forward_logits,
    reference_config,
    strip_output,
    tiny_config,
)
from ukat.training import bce_loss

from conftest import randomize_norms, record_criterion

# Synthetic corpus: 3 keywords, 4 events, 60 training clips per class plus
# 30 non-target words; 30 eval clips per class; 20 ten-second negative streams.
SYNTH = ["--keywords", "3", "--events", "4", "--per-class", "60", "--valid-per-class", "10",
         "--eval-per-class", "30", "--unknown", "30", "--neg-streams", "20", "--seed", "0"]
TEACHER_EPOCHS = 15
EPOCHS = 30
SEED = 0
GAMMA = 0.4


# 1 --------------------------------------------------------------------------

def naive_bce(z, y):
    s = 1.0 / (1.0 + np.exp(-z))
    return float(-np.mean(y * np.log(s) + (1.0 - y) * np.log(1.0 - s)))


def test_criterion_01_bce_loss():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_naive, worst_fd = 0.0, 0.0
    for i in range(1000):
        z = float(rng.uniform(-15, 15))
        y = float(rng.choice([0.0, 1.0])) if i % 4 == 0 else float(rng.uniform())
        loss, grad = bce_loss(np.array([z]), np.array([y]))
        worst_naive = max(worst_naive, abs(loss - naive_bce(np.array([z]), np.array([y]))))
        # five-point central stencil
        h = 1e-3
        f = [bce_loss(np.array([z + k * h]), np.array([y]))[0] for k in (-2, -1, 1, 2)]
        fd = (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * h)
        rel = abs(fd - grad[0]) / max(abs(fd), abs(grad[0]), 1e-4)
        worst_fd = max(worst_fd, rel)
    # batched inputs against the naive form
    for _ in range(200):
        shape = tuple(rng.integers(1, 6, size=2))
        z, y = rng.uniform(-15, 15, shape), rng.uniform(0, 1, shape)
        worst_naive = max(worst_naive, abs(bce_loss(z, y)[0] - naive_bce(z, y)))
    zero = bce_loss(np.zeros((8, 11)), rng.uniform(size=(8, 11)))[0]
    elapsed = time.perf_counter() - t0
    ok = worst_naive < 1e-9 and worst_fd < 1e-6 and abs(zero - math.log(2)) < 1e-15 \
        and elapsed < 5
    record_criterion(1, "BCE vs naive form and finite differences", ok,
                     f"naive diff {worst_naive:.1e}, FD rel err {worst_fd:.1e}, "
                     f"z=0 loss {zero:.9f}, {elapsed:.2f}s")
    assert ok


# 2 --------------------------------------------------------------------------

def oracle_decision(p, C, K, gamma):
    best_k, best_kv = None, -math.inf
    for k in range(K):
        if p[C + k] > best_kv:
            best_k, best_kv = k, p[C + k]
    if K and best_kv >= gamma:
        return C + best_k, "kws"
    best_a, best_av = None, -math.inf
    for a in range(C):
        if p[a] > best_av:
            best_a, best_av = a, p[a]
    return best_a, "at"


def test_criterion_02_decision_rule():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    eps = 1e-9
    mismatches, boundary = 0, 0
    vocabs = {}
    for i in range(10_000):
        C, K = int(rng.integers(1, 9)), int(rng.integers(0, 7))
        v = vocabs.setdefault((C, K), LabelVocabulary([f"e{j}" for j in range(C)],
                                                      [f"k{j}" for j in range(K)]))
        gamma = float(rng.uniform(0.01, 0.99))
        p = rng.uniform(size=C + K)
        if i % 5 == 0:
            p = np.round(p, 1)  # ties
        if K and i % 3 == 0:
            target = gamma + float(rng.choice([-eps, 0.0, eps]))
            p[C:] = np.minimum(p[C:], target)
            p[C + int(rng.integers(K))] = target
            boundary += 1
        d = decide(p, v, DecisionConfig(gamma=gamma))
        mismatches += (d.index, d.branch) != oracle_decision(list(p), C, K, gamma)
    v = merge_vocabularies(["Speech", "Music", "Engine"], ["yes", "no", "up"])
    gammas = np.linspace(0.0, 1.0, 100)
    violations = 0
    for _ in range(300):
        p = rng.uniform(size=len(v))
        fired = [decide(p, v, DecisionConfig(gamma=float(g))).branch == "kws" for g in gammas]
        violations += any(not a and b for a, b in zip(fired, fired[1:]))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and violations == 0 and elapsed < 5
    record_criterion(2, "decision rule vs brute-force oracle, gamma monotone", ok,
                     f"{mismatches} mismatches in 10000 ({boundary} boundary cases), "
                     f"{violations} monotonicity violations, {elapsed:.2f}s")
    assert ok


# 3 --------------------------------------------------------------------------

def test_criterion_03_network_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    v = merge_vocabularies(["Speech", "Music", "Engine"], ["yes", "no"])
    p = randomize_norms(build_model(tiny_config(len(v)), v, seed=3), rng)
    x = rng.normal(size=(3, 14, 8))
    y = rng.uniform(size=(3, len(v)))

    def loss_at():
        logits, _ = forward_logits(p, x, "train")
        return bce_loss(logits, y)[0]

    logits, cache = forward_logits(p, x, "train")
    grads = backward(p, cache, bce_loss(logits, y)[1])
    h = 1e-6
    worst, worst_name, checked = 0.0, "", 0
    kinds = set()
    for name in p.trainable_names():
        t = p.tensors[name]
        for idx in np.ndindex(t.shape):
            orig = t[idx]
            t[idx] = orig + h
            up = loss_at()
            t[idx] = orig - h
            down = loss_at()
            t[idx] = orig
            fd = (up - down) / (2 * h)
            an = grads[name][idx]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            if rel > worst:
                worst, worst_name = rel, f"{name}{list(idx)}"
            checked += 1
        kinds.add(name.split(".")[-2] if ".bn." in name else name.rsplit(".", 2)[-2])
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-3 and elapsed < 120
    record_criterion(3, "end-to-end network gradients vs finite differences", ok,
                     f"{checked} coordinates over {len(p.trainable_names())} tensors, "
                     f"worst rel err {worst:.1e} at {worst_name}, {elapsed:.1f}s")
    assert ok


# 4 --------------------------------------------------------------------------

def test_criterion_04_strip_consistency():
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    at = ["Speech"] + [f"event_{i:03d}" for i in range(526)]
    kws = ["yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go"]
    v = merge_vocabularies(at, kws)
    p = build_model(reference_config(len(v)), v, seed=4)
    q, qv = strip_output(p, kws, v)
    cols = [v.index(n) for n in kws]
    worst = 0.0
    for _ in range(100):
        x = rng.normal(-8.0, 4.0, size=(1, int(rng.integers(20, 101)), 64))
        worst = max(worst, float(np.max(np.abs(forward(q, x) - forward(p, x)[:, cols]))))
    full, stripped = count_parameters(p), count_parameters(q)
    F = p.config.embed_width
    delta = full - stripped
    elapsed = time.perf_counter() - t0
    ok = (worst < 1e-7 and delta == 527 * F + 527 and abs(full / 2.9e6 - 1) < 0.05
          and abs(stripped / 2.2e6 - 1) < 0.05 and elapsed < 60)
    record_criterion(4, "strip consistency and parameter delta", ok,
                     f"max diff {worst:.1e} over 100 inputs, {full} -> {stripped} params, "
                     f"delta {delta} = 527*{F}+527, {elapsed:.1f}s")
    assert ok


# 5 --------------------------------------------------------------------------

def brute_ap(scores, rel):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, acc = 0, 0.0
    for rank, i in enumerate(order, start=1):
        if rel[i]:
            hits += 1
            acc += hits / rank
    return acc / hits


def test_criterion_05_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(505)
    worst, tied, empty = 0.0, 0, 0
    for i in range(1000):
        n, c = int(rng.integers(1, 30)), int(rng.integers(1, 8))
        S = np.full((n, c), 0.25) if i % 10 == 0 else np.round(rng.uniform(size=(n, c)), 2)
        tied += i % 10 == 0
        Y = (rng.uniform(size=(n, c)) < 0.3).astype(int)
        Y[int(rng.integers(n)), int(rng.integers(c))] = 1
        if c > 1 and i % 4 == 0:
            col = int(rng.integers(c))
            if Y.any(axis=0).sum() > 1 or not Y[:, col].any():
                Y[:, col] = 0
        if not Y.any():
            Y[0, 0] = 1
        empty += int((~Y.any(axis=0)).sum() > 0)
        aps = [brute_ap(list(S[:, j]), list(Y[:, j])) for j in range(c) if Y[:, j].any()]
        worst = max(worst, abs(mean_average_precision(S, Y) - sum(aps) / len(aps)))
        j = int(np.flatnonzero(Y.any(axis=0))[0])
        worst = max(worst, abs(average_precision(S[:, j], Y[:, j]) - brute_ap(S[:, j], Y[:, j])))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-12 and elapsed < 10
    record_criterion(5, "AP / mAP vs brute force", ok,
                     f"max diff {worst:.1e} on 1000 instances ({tied} all-tied, "
                     f"{empty} with zero-positive classes), {elapsed:.2f}s")
    assert ok


# 6 --------------------------------------------------------------------------

def test_criterion_06_frontend_shape_and_determinism():
    t0 = time.perf_counter()
    cfg = FrontendConfig()
    x = np.random.default_rng(606).normal(size=20000) * 0.1
    bad = []
    for n in range(512, 20001):
        T = extract_log_mel(Waveform(x[:n], 16000), cfg).shape[0]
        starts = len(range(0, n - 512 + 1, 160))  # enumerate frame offsets
        if not T == starts == (n - 512) // 160 + 1:
            bad.append(n)
    one_sec = extract_log_mel(Waveform(x[:16000], 16000), cfg)
    again = extract_log_mel(Waveform(x[:16000].copy(), 16000), cfg)
    elapsed = time.perf_counter() - t0
    ok = not bad and one_sec.shape == (97, 64) and one_sec.tobytes() == again.tobytes() \
        and elapsed < 30
    record_criterion(6, "front-end shape law and determinism", ok,
                     f"{19489 - len(bad)}/19489 lengths match, 1 s -> {one_sec.shape}, "
                     f"repeat bit-identical: {one_sec.tobytes() == again.tobytes()}, "
                     f"{elapsed:.1f}s")
    assert ok


# shared end-to-end run --------------------------------------------------------

def cli(*argv):
    code = run([str(a) for a in argv])
    assert code == 0, f"ukat {' '.join(map(str, argv))} exited {code}"


def build_corpus_and_teacher(root: Path):
    data = root / "data"
    cli("synth", data, *SYNTH)
    at_names = LabelVocabulary.load(data / "vocab.txt").at_labels
    (root / "events.txt").write_text("\n".join(at_names) + "\n")
    cli("vocab", "--at", root / "events.txt", "--out", root / "teacher_vocab.txt")
    cli("train", "--vocab", root / "teacher_vocab.txt", "--at-manifest", data / "at_train.jsonl",
        "--valid", data / "at_valid.jsonl", "--out", root / "teacher", "--arch", "small",
        "--epochs", TEACHER_EPOCHS, "--seed", SEED + 1, "--no-psl")
    return data, root / "teacher" / "last.ukat"


def train_and_evaluate(root: Path, data: Path, teacher: Path, name: str, crop: bool = True):
    out = root / name
    cli("train", "--vocab", data / "vocab.txt", "--kws-manifest", data / "kws_train.jsonl",
        "--at-manifest", data / "at_train.jsonl",
        "--valid", data / "kws_valid.jsonl", data / "at_valid.jsonl",
        "--out", out, "--arch", "small", "--epochs", EPOCHS, "--seed", SEED,
        "--teacher", teacher, *([] if crop else ["--no-crop"]))
    model = out / "last.ukat"
    reports = {}
    for task, manifest in (("kws", "kws_eval.jsonl"), ("at", "at_eval.jsonl"),
                           ("neg", "eval_neg.jsonl")):
        extra = ["--gamma-sweep", "0:1:0.05", "--sweep-out", out / "neg_sweep.csv"] \
            if task == "neg" else []
        cli("eval", "--model", model, "--manifest", data / manifest, "--task", task,
            "--gamma", GAMMA, "--seed", SEED, "--report", out / f"report_{task}.json",
            "--per-class-csv", out / f"per_class_{task}.csv", *extra)
        reports[task] = json.loads((out / f"report_{task}.json").read_text())
    return out, reports


@pytest.fixture(scope="session")
def e2e_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    yield root
    shutil.rmtree(root, ignore_errors=True)


@pytest.fixture(scope="session")
def joint_run(e2e_root):
    t0 = time.perf_counter()
    data, teacher = build_corpus_and_teacher(e2e_root / "run1")
    out, reports = train_and_evaluate(e2e_root / "run1", data, teacher, "joint")
    return {"root": e2e_root / "run1", "data": data, "teacher": teacher, "out": out,
            "reports": reports, "seconds": time.perf_counter() - t0}


# 7 --------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_07_joint_training(joint_run):
    acc = joint_run["reports"]["kws"]["accuracy"]
    mAP = joint_run["reports"]["at"]["mAP"]
    secs = joint_run["seconds"]
    ok = acc >= 0.90 and mAP >= 0.80 and secs < 600
    record_criterion(7, "synthetic joint training, one model for both tasks", ok,
                     f"keyword accuracy {acc:.4f} on "
                     f"{joint_run['reports']['kws']['n_samples']} clips, AT mAP {mAP:.4f}, "
                     f"{EPOCHS} epochs, {secs:.0f}s including data and teacher")
    assert ok


@pytest.mark.slow
def test_joint_training_halves_loss(joint_run):
    hist = json.loads((joint_run["out"] / "history.json").read_text())
    assert hist["status"] == "completed" and len(hist["epoch_loss"]) == EPOCHS
    assert hist["epoch_loss"][-1] < 0.5 * hist["step_loss"][0]


# 8 --------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_08_crop_ablation(joint_run):
    t0 = time.perf_counter()
    _, reports = train_and_evaluate(joint_run["root"], joint_run["data"], joint_run["teacher"],
                                    "no_crop", crop=False)
    secs = time.perf_counter() - t0 + joint_run["seconds"]
    base = joint_run["reports"]
    drop = base["kws"]["accuracy"] - reports["kws"]["accuracy"]
    rej_base, rej_ablate = base["neg"]["rejection_rate"], reports["neg"]["rejection_rate"]
    ok = drop >= 0.10 and rej_ablate >= rej_base and secs < 1200
    record_criterion(8, "random-crop ablation direction", ok,
                     f"keyword accuracy {base['kws']['accuracy']:.4f} -> "
                     f"{reports['kws']['accuracy']:.4f} (drop {100 * drop:.1f} points), "
                     f"rejection {rej_base:.4f} -> {rej_ablate:.4f}, {secs:.0f}s total")
    assert ok


# 9 --------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_09_noise_rejection(joint_run):
    t0 = time.perf_counter()
    out = joint_run["out"]
    cli("eval", "--model", out / "last.ukat", "--manifest", joint_run["data"] / "eval_neg.jsonl",
        "--task", "neg", "--gamma", GAMMA, "--gamma-sweep", "0:1:0.01",
        "--report", out / "neg_recheck.json", "--sweep-out", out / "neg_sweep_fine.csv")
    rep = json.loads((out / "neg_recheck.json").read_text())
    rows = (out / "neg_sweep_fine.csv").read_text().strip().splitlines()[1:]
    curve = [float(r.split(",")[1]) for r in rows]
    monotone = all(a <= b for a, b in zip(curve, curve[1:]))
    secs = time.perf_counter() - t0
    ok = rep["rejection_rate"] >= 0.95 and monotone and len(curve) == 101 and secs < 120
    record_criterion(9, "negative-stream rejection and gamma sweep", ok,
                     f"rejection {rep['rejection_rate']:.4f} over {rep['n_samples']} chunks "
                     f"at gamma={GAMMA}, sweep of {len(curve)} points monotone: {monotone}, "
                     f"{secs:.0f}s")
    assert ok


# 10 -------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_10_determinism(joint_run, e2e_root):
    data, teacher = build_corpus_and_teacher(e2e_root / "run2")
    out, _ = train_and_evaluate(e2e_root / "run2", data, teacher, "joint")
    first = joint_run["out"]
    names = ["last.ukat", "ranking.json", "history.json", "report_kws.json", "report_at.json",
             "report_neg.json", "neg_sweep.csv", "per_class_kws.csv", "per_class_at.csv",
             "per_class_neg.csv"]
    names += sorted(p.name for p in first.glob("epoch_*.ukat"))
    differing = [n for n in names if (first / n).read_bytes() != (out / n).read_bytes()]
    teacher_same = teacher.read_bytes() == joint_run["teacher"].read_bytes()
    ok = not differing and teacher_same
    record_criterion(10, "seeded determinism of the full run", ok,
                     f"{len(names) - len(differing)}/{len(names)} artifacts byte-identical, "
                     f"teacher identical: {teacher_same}"
                     + (f", differing: {differing}" if differing else ""))
    assert ok
