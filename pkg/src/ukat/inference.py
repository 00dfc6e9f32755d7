"""Chunked inference, the keyword/event decision rule and conditional wake-up."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import FrontendConfig, Waveform, extract_log_mel
from .errors import ArgumentError, ConfigurationError
from .labels import LabelVocabulary, split_prediction
from .model import ModelParameters
from .training import predict


@dataclass(frozen=True)
class Decision:
    """One decision. ``index`` is global in the vocabulary; None means
    "rejected" on a vocabulary that has no sound events left."""

    index: int | None
    branch: str
    score: float
    label: str | None = None
    suppressed: bool = False

    def to_json(self) -> dict:
        d = {"label": self.label, "branch": self.branch, "score": round(float(self.score), 6)}
        if self.suppressed:
            d["suppressed"] = True
        return d


@dataclass(frozen=True)
class DecisionConfig:
    gamma: float = 0.4
    condition: tuple = ()
    theta: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ArgumentError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.theta <= 1.0:
            raise ArgumentError(f"theta must lie in [0, 1], got {self.theta}")
        object.__setattr__(self, "condition", tuple(self.condition))


def chunk_audio(w: Waveform, t: float = 1.0) -> list:
    """Split into back-to-back ``t``-second chunks; the tail chunk is zero-padded."""
    if t <= 0:
        raise ArgumentError(f"chunk duration must be positive, got {t}")
    n = int(round(t * w.sample_rate))
    chunks = []
    for start in range(0, len(w), n):
        piece = w.samples[start:start + n]
        if piece.shape[0] < n:
            piece = np.pad(piece, (0, n - piece.shape[0]))
        chunks.append(Waveform(piece, w.sample_rate))
    return chunks


def _at_decision(at, v: LabelVocabulary, suppressed=False) -> Decision:
    i = int(np.argmax(at))
    return Decision(i, "at", float(at[i]), v.names[i], suppressed)


def decide(p, v: LabelVocabulary, cfg: DecisionConfig = DecisionConfig()) -> Decision:
    """Keyword branch if the best keyword score reaches gamma, else the top sound event."""
    at, kws = split_prediction(p, v)
    if kws.size and kws.max() >= cfg.gamma:
        k = int(np.argmax(kws))
        return Decision(v.C + k, "kws", float(kws[k]), v.kws_labels[k])
    if at.size:
        return _at_decision(at, v)
    return Decision(None, "at", float(kws.max()) if kws.size else 0.0, None)


def conditional_decide(p, v: LabelVocabulary, cfg: DecisionConfig) -> Decision:
    """Like :func:`decide`, but a keyword only wakes the device when at least
    one condition event scores >= theta. Suppressed wake-ups fall back to the
    sound-event decision with ``suppressed=True``."""
    unknown = [n for n in cfg.condition if n not in v.at_labels]
    if unknown:
        raise ConfigurationError(f"condition labels are not sound events: {unknown}")
    d = decide(p, v, cfg)
    if d.branch != "kws" or not cfg.condition:
        return d
    p = np.asarray(p)
    if max(p[v.index(n)] for n in cfg.condition) >= cfg.theta:
        return d
    at, _ = split_prediction(p, v)
    return _at_decision(at, v, suppressed=True)


def tag_events(p, v: LabelVocabulary, threshold: float | None = None,
               top_n: int | None = None) -> list:
    """Sound events meeting ``threshold`` (and/or the ``top_n`` best), highest first."""
    if threshold is not None and not 0.0 <= threshold <= 1.0:
        raise ArgumentError(f"threshold must lie in [0, 1], got {threshold}")
    if top_n is not None and top_n < 1:
        raise ArgumentError(f"top_n must be >= 1, got {top_n}")
    at, _ = split_prediction(p, v)
    order = np.argsort(-at, kind="stable")
    if threshold is not None:
        order = [i for i in order if at[i] >= threshold]
    if top_n is not None:
        order = order[:top_n]
    return [(v.at_labels[i], float(at[i])) for i in order]


def predict_chunks(params: ModelParameters, frontend: FrontendConfig, chunks) -> np.ndarray:
    feats = [extract_log_mel(c, frontend) for c in chunks]
    return predict(params, feats, frontend.log_floor)


def infer_waveform(params: ModelParameters, vocab: LabelVocabulary, frontend: FrontendConfig,
                   w: Waveform, cfg: DecisionConfig = DecisionConfig(), chunk_s: float = 1.0,
                   event_threshold: float | None = None, top_n: int | None = 3) -> list:
    """One JSON-ready record per chunk of ``w``."""
    chunks = chunk_audio(w, chunk_s)
    if not chunks:
        return []
    probs = predict_chunks(params, frontend, chunks)
    records = []
    for i, p in enumerate(probs):
        d = conditional_decide(p, vocab, cfg) if cfg.condition else decide(p, vocab, cfg)
        events = tag_events(p, vocab, event_threshold, top_n) if vocab.C else []
        records.append({
            "chunk_index": i,
            "start_s": round(i * chunk_s, 6),
            "decision": d.to_json(),
            "events": [{"label": n, "score": round(s, 6)} for n, s in events],
        })
    return records
