import numpy as np
import pytest

from ukat.dsp import FrontendConfig, Waveform, write_wav
from ukat.labels import LabelVocabulary, merge_vocabularies
from ukat.model import ArchitectureConfig, build_model, save_model, tiny_config

SR = 16000


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def vocab():
    # C = 3 sound events, K = 2 keywords
    return merge_vocabularies(["Speech", "Music", "Engine"], ["yes", "no"])


@pytest.fixture
def tiny_params(vocab):
    return build_model(tiny_config(len(vocab)), vocab, seed=7)


def randomize_norms(p, rng, dtype=np.float64):
    """Move every norm layer off its scale-invariant init point."""
    q = p.astype(dtype)
    for name, t in q.tensors.items():
        if name.endswith(".bn.weight"):
            q.tensors[name] = rng.uniform(0.5, 1.5, t.shape).astype(dtype)
        elif name.endswith(".bn.bias"):
            q.tensors[name] = rng.normal(0.0, 0.5, t.shape).astype(dtype)
    return q


def full_mel_tiny_arch(n_outputs):
    """Two-block network over the real 64-band front-end (fast, for CLI tests)."""
    return ArchitectureConfig(num_outputs=n_outputs, blocks=((1, 8, 1, 2), (4, 8, 1, 2)),
                              stem_channels=8, embed_dim=32)


@pytest.fixture
def model_file(tmp_path, vocab):
    p = build_model(full_mel_tiny_arch(len(vocab)), vocab, seed=3)
    path = tmp_path / "m.ukat"
    save_model(p, vocab, FrontendConfig(), path)
    return path


def tone(freq, seconds, sr=SR, amp=0.5):
    n = int(round(seconds * sr))
    return Waveform(amp * np.sin(2 * np.pi * freq * np.arange(n) / sr), sr)


@pytest.fixture
def wav_file(tmp_path):
    rng = np.random.default_rng(5)
    w = Waveform(0.3 * rng.standard_normal(int(2.5 * SR)), SR)
    path = tmp_path / "clip.wav"
    write_wav(path, w)
    return path


# acceptance verdicts, printed after the run ----------------------------------

ACCEPTANCE = {}


def record_criterion(number, title, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} ({detail})"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
