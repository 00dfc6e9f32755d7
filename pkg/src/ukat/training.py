"""Joint keyword + sound-event training.

Both sources share one shuffled pool. Every clip is cropped to the same
duration, sound-event crops get soft targets from a teacher model (pseudo
strong labels), and the model is fit with multi-label BCE and Adam. The
best ``top_k`` epochs by validation mAP are kept on disk.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import tomli

from .dsp import FrontendConfig, Waveform, extract_log_mel, load_audio
from .errors import ArgumentError, ConfigurationError, NumericError
from .labels import LabelVocabulary, ManifestEntry, encode_targets
from .metrics import mean_average_precision
from .model import (
    ArchitectureConfig,
    ModelParameters,
    backward,
    build_model,
    forward,
    forward_logits,
    load_model,
    preset_config,
    save_model,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    crop_duration: float = 1.0
    batch_size: int = 64
    max_epochs: int = 500
    learning_rate: float = 0.001
    seed: int = 0
    random_crop: bool = True
    psl: bool = True
    speech_on_target: bool = True
    top_k: int = 4
    # Length every clip is padded to when random cropping is off.
    pad_duration: float = 10.0
    lr_schedule: str = "constant"
    arch: str = "reference"

    def __post_init__(self):
        if self.crop_duration <= 0 or self.pad_duration <= 0:
            raise ConfigurationError("durations must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.top_k < 1:
            raise ConfigurationError("batch_size, max_epochs and top_k must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown lr_schedule {self.lr_schedule!r}")

    @classmethod
    def from_toml(cls, path) -> "TrainConfig":
        with open(path, "rb") as fh:
            try:
                raw = tomli.load(fh)
            except tomli.TOMLDecodeError as exc:
                raise ConfigurationError(f"{path}: {exc}") from None
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigurationError(f"{path}: unknown training keys {unknown}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class Teacher(NamedTuple):
    params: ModelParameters
    vocab: LabelVocabulary
    frontend: FrontendConfig

    @classmethod
    def load(cls, path) -> "Teacher":
        params, vocab, _, frontend, _ = load_model(path)
        return cls(params, vocab, frontend)


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def random_crop(w: Waveform, t: float, rng: np.random.Generator) -> Waveform:
    """Uniformly placed window of exactly ``t`` seconds; short clips are right-padded."""
    if t <= 0:
        raise ArgumentError(f"crop duration must be positive, got {t}")
    n = int(round(t * w.sample_rate))
    if len(w) >= n:
        start = int(rng.integers(0, len(w) - n + 1))
        return Waveform(w.samples[start:start + n], w.sample_rate)
    return Waveform(np.pad(w.samples, (0, n - len(w))), w.sample_rate)


def fit_length(w: Waveform, t: float) -> Waveform:
    """Zero-pad (or truncate) to exactly ``t`` seconds."""
    n = int(round(t * w.sample_rate))
    if len(w) >= n:
        return Waveform(w.samples[:n], w.sample_rate)
    return Waveform(np.pad(w.samples, (0, n - len(w))), w.sample_rate)


def _teacher_columns(teacher: Teacher, v: LabelVocabulary):
    missing = [n for n in v.at_labels if n not in teacher.vocab]
    if missing:
        raise ConfigurationError(f"teacher does not predict sound events {missing[:5]}"
                                 f"{'...' if len(missing) > 5 else ''}")
    return [teacher.vocab.index(n) for n in v.at_labels]


def generate_psl(teacher: Teacher, crop: Waveform, v: LabelVocabulary) -> np.ndarray:
    """Soft target for a sound-event crop: the teacher's sound-event scores, keywords zero."""
    cols = _teacher_columns(teacher, v)
    probs = forward(teacher.params, extract_log_mel(crop, teacher.frontend), "eval")[0]
    y = np.zeros(len(v), dtype=np.float64)
    y[:v.C] = probs[cols]
    return y


def pad_batch(samples, pad_value: float = FrontendConfig().log_floor):
    """Stack spectrograms, right-padding shorter ones with ``pad_value`` frames."""
    if not samples:
        raise ArgumentError("cannot pad an empty list of spectrograms")
    mels = {s.shape[1] for s in samples}
    if len(mels) != 1:
        raise ArgumentError(f"spectrograms disagree on mel bins: {sorted(mels)}")
    lengths = np.array([s.shape[0] for s in samples])
    batch = np.full((len(samples), lengths.max(), mels.pop()), pad_value,
                    dtype=samples[0].dtype)
    for i, s in enumerate(samples):
        batch[i, :s.shape[0]] = s
    return batch, lengths


def bce_loss(logits, targets):
    """Mean binary cross-entropy on logits, and its gradient w.r.t. the logits.

    Uses ``max(z, 0) - z*y + log1p(exp(-|z|))``; computed in float64.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if z.shape != y.shape:
        raise ArgumentError(f"logits {z.shape} and targets {y.shape} differ in shape")
    if np.any((y < 0) | (y > 1)) or np.any(np.isnan(y)):
        raise ArgumentError("targets must lie in [0, 1]")
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    n = z.size
    loss = np.sum(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))) / n
    sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                   np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    return float(loss), (sig - y) / n


def adam_step(p: ModelParameters, grads: dict, state: OptimState, lr: float = 0.001,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, applied in place.

    A non-finite gradient aborts the step before anything is modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(g.shape)
            state.v[name] = np.zeros(g.shape)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.tensors[name] = (p.tensors[name] - update).astype(p.tensors[name].dtype)
    state.step = t
    p.version += 1
    return p, state


def top_k_epochs(scores, k: int):
    """``[(epoch, score), ...]`` of the k best (1-based) epochs; ties go to the earlier epoch."""
    ranked = sorted(enumerate(scores, start=1), key=lambda es: (-es[1], es[0]))
    return ranked[:k]


def learning_rate_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_schedule == "cosine":
        return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / cfg.max_epochs))
    return cfg.learning_rate


def prepare_clip(e: ManifestEntry, w: Waveform, cfg: TrainConfig, rng) -> Waveform:
    if cfg.random_crop:
        return random_crop(w, cfg.crop_duration, rng)
    if e.source == "kws":
        return fit_length(w, cfg.pad_duration)
    return w if w.duration <= cfg.pad_duration else fit_length(w, cfg.pad_duration)


def build_targets(entries, crops, v: LabelVocabulary, cfg: TrainConfig,
                  teacher: Teacher | None, frontend: FrontendConfig) -> np.ndarray:
    y = np.zeros((len(entries), len(v)))
    psl_rows = []
    for i, e in enumerate(entries):
        if e.source == "at" and cfg.psl:
            if teacher is not None:
                psl_rows.append(i)
                continue
            if e.soft is None:
                raise ConfigurationError(
                    f"{e.audio}: pseudo labels enabled but no teacher and no soft scores")
        y[i] = encode_targets(e, v, cfg.speech_on_target, use_soft=cfg.psl)
    if psl_rows:
        cols = _teacher_columns(teacher, v)
        feats = [extract_log_mel(crops[i], teacher.frontend) for i in psl_rows]
        probs = predict(teacher.params, feats, teacher.frontend.log_floor)
        y[psl_rows, :v.C] = probs[:, cols]
    return y


def predict(p: ModelParameters, feats, pad_value: float, batch_size: int = 32) -> np.ndarray:
    """Eval-mode probabilities for a list of spectrograms.

    Spectrograms are grouped by length so no padding enters the pooled
    embedding.
    """
    out = np.zeros((len(feats), p.config.num_outputs), dtype=np.float64)
    by_len: dict = {}
    for i, f in enumerate(feats):
        by_len.setdefault(f.shape[0], []).append(i)
    for _, idx in sorted(by_len.items()):
        for s in range(0, len(idx), batch_size):
            chunk = idx[s:s + batch_size]
            batch, _ = pad_batch([feats[i] for i in chunk], pad_value)
            out[chunk] = forward(p, batch, "eval")
    return out


def validation_map(p: ModelParameters, entries, v: LabelVocabulary, cfg: TrainConfig,
                   frontend: FrontendConfig, feats=None) -> float:
    if feats is None:
        feats = [extract_log_mel(load_audio(e.audio, frontend), frontend) for e in entries]
    with np.errstate(over="ignore", invalid="ignore"):
        scores = predict(p, feats, frontend.log_floor)
    refs = np.stack([encode_targets(e, v, cfg.speech_on_target, use_soft=False) > 0.5
                     for e in entries]).astype(np.int64)
    return mean_average_precision(scores, refs)


def train(cfg: TrainConfig, kws_entries, at_entries, valid_entries, vocab: LabelVocabulary,
          out_dir, teacher: Teacher | None = None, arch: ArchitectureConfig | None = None,
          frontend: FrontendConfig = FrontendConfig(), init: ModelParameters | None = None):
    """Run training and return the ranking ``[(epoch, mAP, path), ...]``, best first.

    Writes ``epoch_<n>.ukat`` for the retained epochs, ``last.ukat``,
    ``ranking.json`` and ``history.json`` into ``out_dir``.
    """
    pool = list(kws_entries) + list(at_entries)
    if not pool:
        raise ArgumentError("training manifests are empty")
    if not valid_entries:
        raise ArgumentError("validation manifest is empty")
    if arch is None:
        arch = preset_config(cfg.arch, len(vocab))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    rng = np.random.default_rng(seeds[0])
    p = init.copy() if init is not None else build_model(
        arch, vocab, int(seeds[1].generate_state(1, np.uint64)[0]))
    state = OptimState()
    extra = {"train_config": cfg.to_dict()}

    valid_feats = [extract_log_mel(load_audio(e.audio, frontend), frontend)
                   for e in valid_entries]
    # without cropping a clip looks the same every epoch: keep its features and targets
    fixed: dict | None = None if cfg.random_crop else {}

    def batch_inputs(idx):
        if fixed is None:
            entries = [pool[i] for i in idx]
            crops = [prepare_clip(e, load_audio(e.audio, frontend), cfg, rng) for e in entries]
            targets = build_targets(entries, crops, vocab, cfg, teacher, frontend)
            return [extract_log_mel(c, frontend) for c in crops], targets
        new = [i for i in idx if i not in fixed]
        if new:
            crops = [prepare_clip(pool[i], load_audio(pool[i].audio, frontend), cfg, rng)
                     for i in new]
            targets = build_targets([pool[i] for i in new], crops, vocab, cfg, teacher, frontend)
            for i, c, t in zip(new, crops, targets):
                fixed[i] = (extract_log_mel(c, frontend), t)
        return [fixed[i][0] for i in idx], np.stack([fixed[i][1] for i in idx])

    history = {"step_loss": [], "epoch_loss": [], "val_map": []}
    kept: list = []
    status = "completed"
    for epoch in range(1, cfg.max_epochs + 1):
        lr = learning_rate_at(cfg, epoch)
        order = rng.permutation(len(pool))
        losses = []
        diverged = False
        for s in range(0, len(order), cfg.batch_size):
            feats, targets = batch_inputs(order[s:s + cfg.batch_size])
            x, _ = pad_batch(feats, frontend.log_floor)
            with np.errstate(over="ignore", invalid="ignore"):
                logits, cache = forward_logits(p, x, "train")
            if not np.all(np.isfinite(logits)):
                diverged = True
                break
            loss, grad = bce_loss(logits, targets)
            grads = backward(p, cache, grad)
            try:
                adam_step(p, grads, state, lr)
            except NumericError:
                diverged = True
                break
            losses.append(loss)
            history["step_loss"].append(loss)
        if diverged:
            status = f"diverged in epoch {epoch}"
            log.error("training diverged in epoch %d; keeping last good checkpoint", epoch)
            break

        score = validation_map(p, valid_entries, vocab, cfg, frontend, valid_feats)
        history["epoch_loss"].append(float(np.mean(losses)))
        history["val_map"].append(score)
        log.info("epoch %d  loss %.4f  val mAP %.4f", epoch, np.mean(losses), score)

        save_model(p, vocab, frontend, out / "last.ukat", {**extra, "epoch": epoch})
        ranking = top_k_epochs(history["val_map"], cfg.top_k)
        if any(e == epoch for e, _ in ranking):
            save_model(p, vocab, frontend, out / f"epoch_{epoch}.ukat",
                       {**extra, "epoch": epoch})
        keep_names = {f"epoch_{e}.ukat" for e, _ in ranking}
        for old in kept:
            if old not in keep_names:
                (out / old).unlink(missing_ok=True)
        kept = sorted(keep_names)
        _write_json(out / "ranking.json",
                    {"seed": cfg.seed, "ranking": [[e, s] for e, s in ranking]})
        _write_json(out / "history.json", {"seed": cfg.seed, "status": status, **history})

    _write_json(out / "history.json", {"seed": cfg.seed, "status": status, **history})
    ranking = top_k_epochs(history["val_map"], cfg.top_k)
    result = [(e, s, out / f"epoch_{e}.ukat") for e, s in ranking]
    if status != "completed":
        raise NumericError(f"training {status}; last good checkpoint is {out / 'last.ukat'}")
    return result


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
