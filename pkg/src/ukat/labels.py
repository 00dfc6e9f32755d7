"""Merged label vocabulary, manifests and training-target encoding."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ArgumentError,
    CollisionError,
    EncodingError,
    ManifestParseError,
    ShapeError,
    VocabularyError,
)

SPEECH = "Speech"
NON_TARGET = "unknown"
VOCAB_SEPARATOR = "#---"
SOURCES = ("kws", "at")


@dataclass(frozen=True)
class LabelVocabulary:
    """Sound events first (indices ``[0, C)``), keywords after (``[C, C+K)``).

    Vocabularies produced by output stripping may lack "Speech"; their
    ``speech_index`` is None.
    """

    at_labels: tuple
    kws_labels: tuple = ()
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "at_labels", tuple(self.at_labels))
        object.__setattr__(self, "kws_labels", tuple(self.kws_labels))
        names = self.at_labels + self.kws_labels
        index = {}
        for i, name in enumerate(names):
            if name in index:
                raise CollisionError(f"label {name!r} appears more than once")
            index[name] = i
        if not names:
            raise VocabularyError("vocabulary is empty")
        object.__setattr__(self, "_index", index)

    @property
    def C(self) -> int:
        return len(self.at_labels)

    @property
    def K(self) -> int:
        return len(self.kws_labels)

    @property
    def names(self) -> tuple:
        return self.at_labels + self.kws_labels

    @property
    def speech_index(self):
        return self._index.get(SPEECH) if SPEECH in self.at_labels else None

    def __len__(self):
        return len(self.at_labels) + len(self.kws_labels)

    def __contains__(self, name):
        return name in self._index

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise EncodingError(f"label {name!r} is not in the vocabulary") from None

    def is_keyword(self, name: str) -> bool:
        return self.index(name) >= self.C

    def to_text(self) -> str:
        return "\n".join([*self.at_labels, VOCAB_SEPARATOR, *self.kws_labels]) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "LabelVocabulary":
        lines = [ln.strip() for ln in text.splitlines()]
        lines = [ln for ln in lines if ln]
        if VOCAB_SEPARATOR in lines:
            cut = lines.index(VOCAB_SEPARATOR)
            return cls(lines[:cut], lines[cut + 1:])
        return cls(lines, ())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "LabelVocabulary":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def merge_vocabularies(at_labels, kws_labels) -> LabelVocabulary:
    at_labels, kws_labels = list(at_labels), list(kws_labels)
    if SPEECH not in at_labels:
        raise VocabularyError(f"sound-event labels must include {SPEECH!r}")
    for block, labels in (("sound-event", at_labels), ("keyword", kws_labels)):
        if len(set(labels)) != len(labels):
            raise VocabularyError(f"duplicate names in the {block} list")
    clash = sorted(set(at_labels) & set(kws_labels))
    if clash:
        raise CollisionError(f"keyword names collide with sound events: {clash}")
    if NON_TARGET in kws_labels:
        raise VocabularyError(f"{NON_TARGET!r} is reserved for non-target words")
    return LabelVocabulary(at_labels, kws_labels)


@dataclass
class ManifestEntry:
    audio: str
    labels: list
    source: str
    split: str = "train"
    soft: dict | None = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ArgumentError(f"source must be one of {SOURCES}, got {self.source!r}")
        if self.soft is not None:
            for name, score in self.soft.items():
                if not 0.0 <= float(score) <= 1.0:
                    raise ArgumentError(f"soft score for {name!r} outside [0, 1]: {score}")

    def to_json(self) -> dict:
        d = {"audio": self.audio, "labels": list(self.labels),
             "split": self.split, "source": self.source}
        if self.soft is not None:
            d["soft"] = dict(self.soft)
        return d


def parse_manifest(path, resolve: bool = True) -> list:
    """Read a JSON Lines manifest. Unknown fields are ignored.

    With ``resolve``, relative ``audio`` paths are taken relative to the
    manifest's own directory.
    """
    base = Path(path).resolve().parent
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(obj, dict):
                raise ManifestParseError("entry must be a JSON object", lineno)
            try:
                audio = obj["audio"]
                labels = obj.get("labels", [])
                source = obj["source"]
            except KeyError as exc:
                raise ManifestParseError(f"missing field {exc.args[0]!r}", lineno) from None
            if not isinstance(audio, str) or not isinstance(labels, list) \
                    or not all(isinstance(n, str) for n in labels):
                raise ManifestParseError("`audio` must be a string and `labels` a list of names",
                                         lineno)
            soft = obj.get("soft")
            if soft is not None and not isinstance(soft, dict):
                raise ManifestParseError("`soft` must be an object", lineno)
            if resolve and not Path(audio).is_absolute():
                audio = str(base / audio)
            try:
                entries.append(ManifestEntry(audio, labels, source,
                                             str(obj.get("split", "train")), soft))
            except ArgumentError as exc:
                raise ManifestParseError(str(exc), lineno) from None
    return entries


def write_manifest(path, entries) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_json()) + "\n")


def encode_targets(e: ManifestEntry, v: LabelVocabulary, speech_on_target: bool = True,
                   use_soft: bool = True) -> np.ndarray:
    """Build the (C+K,) training target for one manifest entry.

    Keyword clips light their keyword and, when ``speech_on_target``, also
    "Speech"; the non-target name lights "Speech" alone. Sound-event clips
    copy their soft scores when present (and ``use_soft``), else their hard
    labels become 1.0.
    """
    y = np.zeros(len(v), dtype=np.float64)
    if e.source == "at" and use_soft and e.soft is not None:
        for name, score in e.soft.items():
            y[v.index(name)] = float(score)
        return y

    for name in e.labels:
        if e.source == "kws" and name == NON_TARGET:
            if v.speech_index is None:
                raise EncodingError(f"{NON_TARGET!r} needs {SPEECH!r} in the vocabulary")
            y[v.speech_index] = 1.0
            continue
        i = v.index(name)
        y[i] = 1.0
        if e.source == "kws" and i >= v.C and speech_on_target and v.speech_index is not None:
            y[v.speech_index] = 1.0
    return y


def split_prediction(p, v: LabelVocabulary):
    p = np.asarray(p)
    if p.shape[-1] != len(v):
        raise ShapeError(f"prediction has {p.shape[-1]} entries, vocabulary has {len(v)}")
    return p[..., :v.C], p[..., v.C:]
