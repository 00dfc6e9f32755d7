import json

import numpy as np
import pytest

from ukat.dsp import extract_log_mel, load_audio
from ukat.errors import ArgumentError
from ukat.labels import LabelVocabulary, parse_manifest
from ukat.synth import SyntheticDatasetSpec, generate_synthetic_dataset


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth") / "d"
    spec = SyntheticDatasetSpec(samples_per_class=20, valid_per_class=4, eval_per_class=15,
                                n_unknown=5, n_neg_streams=3, seed=4)
    generate_synthetic_dataset(spec, root)
    return root


def test_training_clip_count_arithmetic(tmp_path):
    # short event clips keep this fast; the count does not depend on duration
    spec = SyntheticDatasetSpec(samples_per_class=200, valid_per_class=1, eval_per_class=1,
                                n_neg_streams=1, at_duration=(1.0, 1.0))
    paths = generate_synthetic_dataset(spec, tmp_path / "d")
    kws = parse_manifest(paths["kws_train"])
    at = parse_manifest(paths["at_train"])
    assert (len(kws), len(at), len(kws) + len(at)) == (600, 800, 1400)


def test_layout_and_vocab(small_dataset):
    v = LabelVocabulary.load(small_dataset / "vocab.txt")
    assert v.kws_labels == ("yes", "no", "up") and v.C == 4 and v.speech_index == 0
    kws = parse_manifest(small_dataset / "kws_train.jsonl")
    assert sum(e.labels == ["unknown"] for e in kws) == 5
    ev = parse_manifest(small_dataset / "kws_eval.jsonl")
    assert sum(e.labels == ["unknown"] for e in ev) == 15
    neg = parse_manifest(small_dataset / "eval_neg.jsonl")
    assert len(neg) == 3 and all(e.labels == [] for e in neg)
    w = load_audio(neg[0].audio)
    assert w.duration == pytest.approx(10.0)
    spec = json.loads((small_dataset / "spec.json").read_text())
    assert spec["seed"] == 4
    for e in parse_manifest(small_dataset / "at_eval.jsonl"):
        assert 9.0 <= load_audio(e.audio).duration <= 10.0
    for e in ev:
        assert 0.8 <= load_audio(e.audio).duration <= 1.0


def test_same_seed_byte_identical(tmp_path):
    spec = SyntheticDatasetSpec(samples_per_class=2, valid_per_class=1, eval_per_class=1,
                                n_unknown=1, n_neg_streams=1, seed=9)
    generate_synthetic_dataset(spec, tmp_path / "a")
    generate_synthetic_dataset(spec, tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.*"))
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*.*"))
    assert files_a == files_b and len(files_a) > 20
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    spec.seed = 10
    generate_synthetic_dataset(spec, tmp_path / "c")
    wav = next(rel for rel in files_a if rel.suffix == ".wav")
    assert (tmp_path / "c" / wav).read_bytes() != (tmp_path / "a" / wav).read_bytes()


def test_refuses_nonempty_output(tmp_path):
    (tmp_path / "x").mkdir()
    (tmp_path / "x" / "f").write_text("")
    with pytest.raises(FileExistsError):
        generate_synthetic_dataset(SyntheticDatasetSpec(samples_per_class=1), tmp_path / "x")


def test_spec_validation():
    with pytest.raises(ArgumentError):
        SyntheticDatasetSpec(n_keywords=0)
    with pytest.raises(ArgumentError):
        SyntheticDatasetSpec(n_events=1)


def test_nearest_centroid_oracle_separates_classes(small_dataset):
    """Template classifier on mean log-Mel frames must beat 90% on the eval split."""
    def feat(e):
        return extract_log_mel(load_audio(e.audio)).mean(axis=0)

    train = parse_manifest(small_dataset / "kws_train.jsonl") + \
        parse_manifest(small_dataset / "at_train.jsonl")
    train = [e for e in train if len(e.labels) == 1 and e.labels[0] != "unknown"]
    classes = sorted({e.labels[0] for e in train})
    centroids = {c: np.mean([feat(e) for e in train if e.labels[0] == c], axis=0)
                 for c in classes}
    evals = parse_manifest(small_dataset / "kws_eval.jsonl") + \
        parse_manifest(small_dataset / "at_eval.jsonl")
    evals = [e for e in evals if e.labels[0] != "unknown"]
    hits = 0
    for e in evals:
        f = feat(e)
        guess = min(classes, key=lambda c: float(np.sum((f - centroids[c]) ** 2)))
        hits += guess in e.labels
    assert hits / len(evals) > 0.90
