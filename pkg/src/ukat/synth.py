"""Seeded synthetic stand-in for a keyword corpus plus a sound-event corpus.

Keywords are fixed sequences of three formant-shaped voiced segments
("words") embedded in noise, about 1 s long. Non-target words use freshly
drawn formant sequences. Sound events are textures about 10 s long; each
clip's labelled event only covers part of the clip, so clip labels are
weak. "Speech" is babble built from random non-target words.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dsp import Waveform, write_wav
from .errors import ArgumentError
from .labels import NON_TARGET, SPEECH, ManifestEntry, merge_vocabularies, write_manifest

SR = 16000
KEYWORD_NAMES = ("yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go")
EVENT_NAMES = (SPEECH, "Music", "Engine", "Birdsong", "Water", "Alarm", "Wind")
# Minimum mel-scale distance between any non-target word and every keyword.
MIN_SIGNATURE_DISTANCE = 250.0


@dataclass
class SyntheticDatasetSpec:
    n_keywords: int = 3
    n_events: int = 4
    samples_per_class: int = 200
    valid_per_class: int = 20
    eval_per_class: int = 40
    n_unknown: int = 0
    n_neg_streams: int = 40
    neg_stream_duration: float = 10.0
    kws_duration: tuple = (0.8, 1.0)
    at_duration: tuple = (9.0, 10.0)
    noise_level: float = 0.02
    seed: int = 0
    wav_format: str = field(default="int16")

    def __post_init__(self):
        if not 1 <= self.n_keywords <= len(KEYWORD_NAMES):
            raise ArgumentError(f"n_keywords must be in [1, {len(KEYWORD_NAMES)}]")
        if not 2 <= self.n_events <= len(EVENT_NAMES):
            raise ArgumentError(f"n_events must be in [2, {len(EVENT_NAMES)}]")
        if self.samples_per_class < 1:
            raise ArgumentError("samples_per_class must be >= 1")
        self.kws_duration = tuple(self.kws_duration)
        self.at_duration = tuple(self.at_duration)

    @property
    def keywords(self):
        return KEYWORD_NAMES[:self.n_keywords]

    @property
    def events(self):
        return EVENT_NAMES[:self.n_events]


def _mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _draw_signature(rng):
    return [(rng.uniform(250, 900), rng.uniform(1000, 3200)) for _ in range(3)]


def _signature_distance(a, b):
    return float(np.mean([np.hypot(*(_mel(x) - _mel(y))) for x, y in zip(a, b)]))


class Generator:
    """Signal synthesis for one dataset; keyword signatures depend only on the seed."""

    def __init__(self, spec: SyntheticDatasetSpec):
        self.spec = spec
        sig_rng = np.random.default_rng([spec.seed, 1])
        self.keyword_sigs = []
        while len(self.keyword_sigs) < spec.n_keywords:
            sig = _draw_signature(sig_rng)
            if all(_signature_distance(sig, k) > 2 * MIN_SIGNATURE_DISTANCE
                   for k in self.keyword_sigs):
                self.keyword_sigs.append(sig)

    # words -----------------------------------------------------------------

    def nontarget_signature(self, rng):
        while True:
            sig = _draw_signature(rng)
            if all(_signature_distance(sig, k) > MIN_SIGNATURE_DISTANCE
                   for k in self.keyword_sigs):
                return sig

    def word(self, sig, rng) -> np.ndarray:
        f0 = rng.uniform(100, 220)
        parts = []
        for f1, f2 in sig:
            n = int(rng.uniform(0.13, 0.17) * SR)
            t = np.arange(n) / SR
            jitter = rng.uniform(0.97, 1.03, size=2)
            pitch = f0 * (1.0 + 0.05 * np.sin(2 * np.pi * rng.uniform(2, 5) * t))
            phase = 2 * np.pi * np.cumsum(pitch) / SR
            seg = np.zeros(n)
            for h in range(1, int(3800 // f0)):
                fh = h * f0
                amp = (np.exp(-0.5 * ((fh - f1 * jitter[0]) / 120.0) ** 2)
                       + 0.7 * np.exp(-0.5 * ((fh - f2 * jitter[1]) / 180.0) ** 2) + 0.02)
                seg += amp * np.sin(h * phase)
            seg *= np.hanning(n)
            parts.append(seg)
            parts.append(np.zeros(int(rng.uniform(0.02, 0.04) * SR)))
        w = np.concatenate(parts[:-1])
        return w / (np.abs(w).max() + 1e-9)

    # textures --------------------------------------------------------------

    def _noise(self, n, rng, level=None):
        level = self.spec.noise_level if level is None else level
        white = rng.standard_normal(n)
        pink = np.cumsum(rng.standard_normal(n))
        pink -= np.convolve(pink, np.ones(400) / 400, mode="same")
        return level * (0.6 * white + 0.4 * pink / (np.std(pink) + 1e-9))

    def event(self, name, n, rng) -> np.ndarray:
        t = np.arange(n) / SR
        if name == SPEECH:
            out = np.zeros(n)
            pos = int(rng.uniform(0, 0.1) * SR)
            while pos < n:
                w = 0.5 * self.word(self.nontarget_signature(rng), rng)
                end = min(n, pos + w.shape[0])
                out[pos:end] += w[:end - pos]
                pos = end + int(rng.uniform(0.05, 0.25) * SR)
            return out
        if name == "Music":
            out = np.zeros(n)
            pos = 0
            scale = 220.0 * 2 ** (np.array([0, 2, 4, 7, 9, 12, 14, 16]) / 12)
            while pos < n:
                dur = int(rng.uniform(0.25, 0.6) * SR)
                end = min(n, pos + dur)
                tt = np.arange(end - pos) / SR
                env = np.exp(-tt * rng.uniform(1.5, 4.0))
                for f in rng.choice(scale, size=2, replace=False):
                    for h in range(1, 6):
                        out[pos:end] += env * np.sin(2 * np.pi * f * h * tt) / h ** 1.5 * 0.25
                pos = end
            return out
        if name == "Engine":
            f = rng.uniform(40, 70)
            hum = sum(np.sin(2 * np.pi * f * h * t + rng.uniform(0, 6.3)) / h for h in range(1, 8))
            rumble = np.cumsum(rng.standard_normal(n))
            rumble -= np.convolve(rumble, np.ones(200) / 200, mode="same")
            rumble /= np.std(rumble) + 1e-9
            am = 1.0 + 0.5 * np.sin(2 * np.pi * rng.uniform(15, 30) * t)
            return 0.2 * am * (hum / 2.5 + 0.8 * rumble)
        if name == "Birdsong":
            out = np.zeros(n)
            pos = int(rng.uniform(0, 0.2) * SR)
            while pos < n:
                dur = int(rng.uniform(0.05, 0.12) * SR)
                end = min(n, pos + dur)
                tt = np.arange(end - pos) / SR
                f_start, f_end = rng.uniform(2500, 4500), rng.uniform(4000, 6500)
                inst = f_start + (f_end - f_start) * tt / max(tt[-1], 1e-3)
                out[pos:end] += 0.5 * np.sin(2 * np.pi * np.cumsum(inst) / SR) * np.hanning(end - pos)
                pos = end + int(rng.uniform(0.03, 0.25) * SR)
            return out
        if name == "Water":
            noise = rng.standard_normal(n)
            spec = np.fft.rfft(noise)
            freqs = np.fft.rfftfreq(n, 1.0 / SR)
            spec *= np.exp(-0.5 * ((freqs - 1500.0) / 600.0) ** 2)
            band = np.fft.irfft(spec, n)
            flicker = np.abs(np.convolve(rng.standard_normal(n), np.ones(320) / 320, mode="same"))
            return 0.4 * band / (np.std(band) + 1e-9) * (0.3 + 8.0 * flicker)
        if name == "Alarm":
            f = rng.uniform(1800, 2400)
            gate = (np.floor(t * rng.uniform(3, 5)) % 2 == 0).astype(float)
            return 0.3 * gate * np.sign(np.sin(2 * np.pi * f * t)) * 0.5
        if name == "Wind":
            noise = np.cumsum(rng.standard_normal(n))
            noise -= np.convolve(noise, np.ones(800) / 800, mode="same")
            gust = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.1, 0.4) * t + rng.uniform(0, 6.3))
            return 0.3 * gust * noise / (np.std(noise) + 1e-9)
        raise ArgumentError(f"unknown synthetic event {name!r}")

    # clips -----------------------------------------------------------------

    def _duration(self, lo_hi, rng):
        return int(round(rng.uniform(*lo_hi) * SR))

    def keyword_clip(self, sig, rng) -> np.ndarray:
        n = self._duration(self.spec.kws_duration, rng)
        w = self.word(sig, rng) * rng.uniform(0.3, 0.8)
        out = self._noise(n, rng)
        start = int(rng.integers(0, max(1, n - w.shape[0])))
        end = min(n, start + w.shape[0])
        out[start:end] += w[:end - start]
        return out

    def event_clip(self, labels, rng) -> np.ndarray:
        n = self._duration(self.spec.at_duration, rng)
        out = self._noise(n, rng)
        for name in labels:
            # Each event is active over one contiguous stretch of 40-80% of the clip.
            span = int(n * rng.uniform(0.4, 0.8))
            start = int(rng.integers(0, n - span + 1))
            sig = self.event(name, span, rng) * rng.uniform(0.5, 1.0)
            fade = np.minimum(1.0, np.minimum(np.arange(span), np.arange(span)[::-1]) / 800.0)
            out[start:start + span] += sig * fade
        return out

    def negative_stream(self, i, rng) -> np.ndarray:
        n = int(round(self.spec.neg_stream_duration * SR))
        out = self._noise(n, rng)
        if i % 2 == 0:
            # unseen word signatures
            pos = int(rng.uniform(0, 0.3) * SR)
            while pos < n:
                w = self.word(self.nontarget_signature(rng), rng) * rng.uniform(0.3, 0.8)
                end = min(n, pos + w.shape[0])
                out[pos:end] += w[:end - pos]
                pos = end + int(rng.uniform(0.1, 0.6) * SR)
        else:
            names = [e for e in self.spec.events if e != SPEECH]
            for name in rng.choice(names, size=min(2, len(names)), replace=False):
                out += self.event(str(name), n, rng) * rng.uniform(0.3, 0.8)
        return out


def _rel(path: Path, root: Path) -> str:
    return path.relative_to(root).as_posix()


def _clip(x):
    peak = np.abs(x).max()
    return x * (0.95 / peak) if peak > 0.95 else x


def generate_synthetic_dataset(spec: SyntheticDatasetSpec, out_dir) -> dict:
    """Write WAVs, manifests and ``vocab.txt`` under ``out_dir``.

    Returns ``{manifest name: path}``. Refuses to write into a non-empty
    directory.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        raise FileExistsError(f"{out} already exists and is not empty")
    gen = Generator(spec)
    root = np.random.SeedSequence([spec.seed, 2])
    split_seeds = dict(zip(("train", "valid", "eval"), root.spawn(3)))
    sizes = {"train": spec.samples_per_class, "valid": spec.valid_per_class,
             "eval": spec.eval_per_class}
    unknown_sizes = {"train": spec.n_unknown, "valid": spec.valid_per_class // 2,
                     "eval": spec.eval_per_class}

    manifests = {}
    for split, seed in split_seeds.items():
        rng = np.random.default_rng(seed)
        adir = out / "audio" / split
        adir.mkdir(parents=True)
        kws, at = [], []
        for k, name in enumerate(spec.keywords):
            for i in range(sizes[split]):
                path = adir / f"kw_{name}_{i:04d}.wav"
                write_wav(path, Waveform(_clip(gen.keyword_clip(gen.keyword_sigs[k], rng)), SR),
                          spec.wav_format)
                kws.append(ManifestEntry(_rel(path, out), [name], "kws", split))
        for i in range(unknown_sizes[split]):
            path = adir / f"kw_unknown_{i:04d}.wav"
            sig = gen.nontarget_signature(rng)
            write_wav(path, Waveform(_clip(gen.keyword_clip(sig, rng)), SR), spec.wav_format)
            kws.append(ManifestEntry(_rel(path, out), [NON_TARGET], "kws", split))
        for c, name in enumerate(spec.events):
            for i in range(sizes[split]):
                labels = [name]
                if rng.uniform() < 0.3:
                    other = [e for e in spec.events if e != name]
                    labels.append(str(rng.choice(other)))
                path = adir / f"ev_{name}_{i:04d}.wav"
                write_wav(path, Waveform(_clip(gen.event_clip(labels, rng)), SR), spec.wav_format)
                at.append(ManifestEntry(_rel(path, out), labels, "at", split))
        manifests[f"kws_{split}"] = kws
        manifests[f"at_{split}"] = at

    rng = np.random.default_rng(root.spawn(1)[0])
    ndir = out / "audio" / "eval_neg"
    ndir.mkdir(parents=True)
    neg = []
    for i in range(spec.n_neg_streams):
        path = ndir / f"neg_{i:04d}.wav"
        write_wav(path, Waveform(_clip(gen.negative_stream(i, rng)), SR), spec.wav_format)
        neg.append(ManifestEntry(_rel(path, out), [], "kws", "eval_neg"))
    manifests["eval_neg"] = neg

    paths = {}
    for name, entries in manifests.items():
        paths[name] = out / f"{name}.jsonl"
        write_manifest(paths[name], entries)
    vocab = merge_vocabularies(spec.events, spec.keywords)
    vocab.save(out / "vocab.txt")
    paths["vocab"] = out / "vocab.txt"
    spec_d = asdict(spec)
    (out / "spec.json").write_text(json.dumps(spec_d, indent=2) + "\n", encoding="utf-8")
    return paths
