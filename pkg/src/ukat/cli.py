"""``ukat`` command line.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
Diagnostics go to stderr; results go to stdout or the files named by flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dsp import Waveform, load_audio, write_wav
from .errors import ArgumentError, UkatError
from .inference import (
    DecisionConfig,
    chunk_audio,
    decide,
    infer_waveform,
    predict_chunks,
)
from .labels import (
    NON_TARGET,
    LabelVocabulary,
    ManifestEntry,
    merge_vocabularies,
    parse_manifest,
    write_manifest,
)
from .metrics import (
    accuracy,
    mean_average_precision,
    per_class_ap,
    per_class_csv,
    rejection_rate,
    report_json,
)
from .model import count_parameters, load_model, read_header, save_model, strip_output
from .synth import SyntheticDatasetSpec, generate_synthetic_dataset
from .training import Teacher, TrainConfig, train

log = logging.getLogger("ukat")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _gamma_range(text: str):
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError("expected lo:hi:step") from None
    if step <= 0 or lo > hi or lo < 0 or hi > 1:
        raise argparse.ArgumentTypeError("need 0 <= lo <= hi <= 1 and step > 0")
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return [round(lo + i * step, 10) for i in range(n)]


def _name_list(text: str):
    if text.startswith("@"):
        lines = Path(text[1:]).read_text(encoding="utf-8").splitlines()
        return [ln.strip() for ln in lines if ln.strip()]
    return [n.strip() for n in text.split(",") if n.strip()]


def _write_or_print(text: str, path) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# synth ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SyntheticDatasetSpec(
        n_keywords=args.keywords, n_events=args.events, samples_per_class=args.per_class,
        valid_per_class=args.valid_per_class, eval_per_class=args.eval_per_class,
        n_unknown=args.unknown, n_neg_streams=args.neg_streams,
        noise_level=args.noise_level, seed=args.seed)
    paths = generate_synthetic_dataset(spec, args.out_dir)
    print(json.dumps({"seed": args.seed, **{k: str(v) for k, v in paths.items()}}, indent=2))
    return 0


# vocab ---------------------------------------------------------------------

def cmd_vocab(args) -> int:
    at = _name_list("@" + args.at)
    kws = _name_list("@" + args.kws) if args.kws else []
    v = merge_vocabularies(at, kws)
    _write_or_print(v.to_text(), args.out)
    log.info("vocabulary: %d sound events + %d keywords", v.C, v.K)
    return 0


# train ---------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = TrainConfig.from_toml(args.config) if args.config else TrainConfig()
    overrides = {"seed": args.seed, "max_epochs": args.epochs, "arch": args.arch,
                 "batch_size": args.batch_size, "learning_rate": args.lr}
    if args.no_crop:
        overrides["random_crop"] = False
    if args.no_psl:
        overrides["psl"] = False
    if args.no_speech_on_target:
        overrides["speech_on_target"] = False
    cfg = TrainConfig(**{**cfg.to_dict(), **{k: v for k, v in overrides.items() if v is not None}})
    vocab = LabelVocabulary.load(args.vocab)
    kws = [e for m in args.kws_manifest for e in parse_manifest(m)]
    at = [e for m in args.at_manifest for e in parse_manifest(m)]
    valid = [e for m in args.valid for e in parse_manifest(m)]
    teacher = Teacher.load(args.teacher) if args.teacher and cfg.psl else None
    log.info("training with seed %d: %d keyword clips, %d event clips, %d validation clips",
             cfg.seed, len(kws), len(at), len(valid))
    ranking = train(cfg, kws, at, valid, vocab, args.out, teacher=teacher)
    print(json.dumps({"seed": cfg.seed,
                      "ranking": [{"epoch": e, "mAP": s, "path": str(p)} for e, s, p in ranking]},
                     indent=2))
    return 0


# eval ----------------------------------------------------------------------

def _kws_reference(e: ManifestEntry, v: LabelVocabulary) -> int:
    if not e.labels:
        raise ArgumentError(f"{e.audio}: keyword evaluation entry has no label")
    name = e.labels[0]
    if name == NON_TARGET:
        if v.speech_index is None:
            raise ArgumentError("non-target references need 'Speech' in the model vocabulary")
        return v.speech_index
    return v.index(name)


def _clip_scores(params, frontend, w, chunk_s):
    """Per-chunk probabilities for one clip."""
    return predict_chunks(params, frontend, chunk_audio(w, chunk_s))


def cmd_eval(args) -> int:
    params, vocab, _, frontend, _ = load_model(args.model)
    entries = [e for m in args.manifest for e in parse_manifest(m)]
    if not entries:
        raise ArgumentError("evaluation manifest is empty")
    gamma_cfg = DecisionConfig(gamma=args.gamma)
    report = {"dataset": args.dataset or Path(args.manifest[0]).stem, "gamma": args.gamma,
              "seed": args.seed, "task": args.task}
    sweep_rows = []

    if args.task == "kws":
        probs, refs = [], []
        for e in entries:
            scores = _clip_scores(params, frontend, load_audio(e.audio, frontend), args.chunk)
            best = int(np.argmax(scores[:, vocab.C:].max(axis=1))) if vocab.K else 0
            probs.append(scores[best])
            refs.append(_kws_reference(e, vocab))
        decisions = [decide(p, vocab, gamma_cfg) for p in probs]
        report["n_samples"] = len(decisions)
        report["accuracy"] = accuracy(decisions, refs)
        per_class = []
        for r in sorted(set(refs)):
            idx = [i for i, x in enumerate(refs) if x == r]
            hits = sum(decisions[i].index == r for i in idx)
            per_class.append({"label": vocab.names[r], "n": len(idx), "correct": hits,
                              "accuracy": hits / len(idx)})
        report["per_class"] = per_class
        fields = ["label", "n", "correct", "accuracy"]
        for g in args.gamma_sweep or []:
            d = [decide(p, vocab, DecisionConfig(gamma=g)) for p in probs]
            sweep_rows.append({"gamma": g, "accuracy": accuracy(d, refs)})
        sweep_fields = ["gamma", "accuracy"]

    elif args.task == "neg":
        probs = []
        for e in entries:
            probs.extend(_clip_scores(params, frontend, load_audio(e.audio, frontend), args.chunk))
        decisions = [decide(p, vocab, gamma_cfg) for p in probs]
        report["n_samples"] = len(decisions)
        report["rejection_rate"] = rejection_rate(decisions)
        fired = {}
        for d in decisions:
            if d.branch == "kws":
                fired[d.label] = fired.get(d.label, 0) + 1
        report["per_class"] = [{"label": n, "false_alarms": fired.get(n, 0)}
                               for n in vocab.kws_labels]
        fields = ["label", "false_alarms"]
        for g in args.gamma_sweep or []:
            d = [decide(p, vocab, DecisionConfig(gamma=g)) for p in probs]
            sweep_rows.append({"gamma": g, "rejection_rate": rejection_rate(d)})
        sweep_fields = ["gamma", "rejection_rate"]

    else:  # at
        if args.gamma_sweep:
            raise ArgumentError("--gamma-sweep applies to the kws and neg tasks only")
        if vocab.C == 0:
            raise ArgumentError("model has no sound-event outputs")
        scores, labels = [], []
        for e in entries:
            w = load_audio(e.audio, frontend)
            if args.at_pooling == "clip":
                s = predict_chunks(params, frontend, [w])[0]
            else:
                s = _clip_scores(params, frontend, w, args.chunk).max(axis=0)
            scores.append(s[:vocab.C])
            y = np.zeros(vocab.C, dtype=np.int64)
            for n in e.labels:
                i = vocab.index(n)
                if i < vocab.C:
                    y[i] = 1
            labels.append(y)
        scores, labels = np.array(scores), np.array(labels)
        report["n_samples"] = len(entries)
        report["mAP"] = mean_average_precision(scores, labels)
        report["per_class"] = [{"label": n, "n_positive": int(labels[:, i].sum()), "AP": ap}
                               for i, (n, ap) in enumerate(zip(vocab.at_labels,
                                                               per_class_ap(scores, labels)))]
        fields = ["label", "n_positive", "AP"]

    _write_or_print(report_json(report), args.report)
    if args.per_class_csv:
        Path(args.per_class_csv).write_text(per_class_csv(report["per_class"], fields),
                                            encoding="utf-8")
    if sweep_rows:
        _write_or_print(per_class_csv(sweep_rows, sweep_fields), args.sweep_out)
    return 0


# infer ---------------------------------------------------------------------

def cmd_infer(args) -> int:
    params, vocab, _, frontend, _ = load_model(args.model)
    cfg = DecisionConfig(gamma=args.gamma, condition=tuple(args.condition or ()),
                         theta=args.theta)
    for path in args.audio:
        w = load_audio(path, frontend)
        if len(w) == 0:
            log.warning("%s: empty audio, no chunks", path)
            continue
        for rec in infer_waveform(params, vocab, frontend, w, cfg, args.chunk,
                                  args.threshold, args.top_n):
            if len(args.audio) > 1:
                rec = {"file": str(path), **rec}
            sys.stdout.write(json.dumps(rec) + "\n")
    return 0


# strip ---------------------------------------------------------------------

def cmd_strip(args) -> int:
    params, vocab, _, frontend, extra = load_model(args.model)
    keep = _name_list(args.keep)
    stripped, new_vocab = strip_output(params, keep, vocab)
    save_model(stripped, new_vocab, frontend, args.out, {**extra, "stripped_from": len(vocab)})
    before, after = count_parameters(params), count_parameters(stripped)
    print(json.dumps({"parameters_before": before, "parameters_after": after,
                      "removed": before - after, "labels": list(new_vocab.names)}, indent=2))
    return 0


# relabel -------------------------------------------------------------------

def cmd_relabel(args) -> int:
    teacher = Teacher.load(args.teacher)
    entries = [e for m in args.manifest for e in parse_manifest(m)]
    out = Path(args.out_dir)
    adir = out / "audio"
    adir.mkdir(parents=True, exist_ok=True)
    at_names = teacher.vocab.at_labels
    relabelled = []
    for n, e in enumerate(entries):
        if e.source != "at":
            relabelled.append(e)
            continue
        w = load_audio(e.audio, teacher.frontend)
        chunks = chunk_audio(w, args.crop)
        probs = predict_chunks(teacher.params, teacher.frontend, chunks)
        for i, (c, p) in enumerate(zip(chunks, probs)):
            name = f"{n:05d}_{Path(e.audio).stem}_c{i:03d}.wav"
            write_wav(adir / name, c)
            soft = {lab: round(float(p[teacher.vocab.index(lab)]), 6) for lab in at_names}
            relabelled.append(ManifestEntry(f"audio/{name}", list(e.labels), "at", e.split, soft))
    write_manifest(out / "manifest.jsonl", relabelled)
    print(json.dumps({"entries": len(relabelled), "manifest": str(out / "manifest.jsonl")}))
    return 0


# inspect / serve -----------------------------------------------------------

def cmd_inspect(args) -> int:
    header = read_header(args.model)
    params, *_ = load_model(args.model)
    if not args.tensors:
        header["tensors"] = len(header["tensors"])
    header["parameters"] = count_parameters(params)
    print(json.dumps(header, indent=2))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(args.model), host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ukat", description="Joint keyword spotting and audio tagging.")
    p.add_argument("--version", action="version", version=f"ukat {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate the synthetic keyword + event dataset")
    s.add_argument("out_dir")
    s.add_argument("--keywords", type=int, default=3)
    s.add_argument("--events", type=int, default=4)
    s.add_argument("--per-class", type=int, default=200)
    s.add_argument("--valid-per-class", type=int, default=20)
    s.add_argument("--eval-per-class", type=int, default=40)
    s.add_argument("--unknown", type=int, default=0, help="non-target training words")
    s.add_argument("--neg-streams", type=int, default=40)
    s.add_argument("--noise-level", type=float, default=0.02)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("vocab", help="merge sound-event and keyword name lists")
    s.add_argument("--at", required=True, help="file with one sound-event name per line")
    s.add_argument("--kws", help="file with one keyword per line")
    s.add_argument("--out")
    s.set_defaults(func=cmd_vocab)

    s = sub.add_parser("train", help="joint training")
    s.add_argument("--config", help="TOML training config")
    s.add_argument("--vocab", required=True)
    s.add_argument("--kws-manifest", nargs="*", default=[])
    s.add_argument("--at-manifest", nargs="*", default=[])
    s.add_argument("--valid", nargs="+", required=True)
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--teacher", help="model producing pseudo labels for event crops")
    s.add_argument("--arch")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--no-crop", action="store_true")
    s.add_argument("--no-psl", action="store_true")
    s.add_argument("--no-speech-on-target", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="accuracy / mAP / rejection-rate report")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", nargs="+", required=True)
    s.add_argument("--task", choices=("kws", "at", "neg"), required=True)
    s.add_argument("--gamma", type=float, default=0.4)
    s.add_argument("--gamma-sweep", type=_gamma_range, metavar="LO:HI:STEP")
    s.add_argument("--sweep-out", help="CSV path for the gamma sweep (default stdout)")
    s.add_argument("--chunk", type=float, default=1.0, help="chunk length in seconds")
    s.add_argument("--at-pooling", choices=("clip", "chunk-max"), default="clip")
    s.add_argument("--dataset")
    s.add_argument("--report", help="JSON report path (default stdout)")
    s.add_argument("--per-class-csv")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="per-chunk decisions as JSON Lines")
    s.add_argument("--model", required=True)
    s.add_argument("audio", nargs="+")
    s.add_argument("--gamma", type=float, default=0.4)
    s.add_argument("--condition", type=_name_list, help="events required for a wake-up")
    s.add_argument("--theta", type=float, default=0.5)
    s.add_argument("--chunk", type=float, default=1.0)
    s.add_argument("--threshold", type=float)
    s.add_argument("--top-n", type=int, default=3)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("strip", help="drop classifier outputs")
    s.add_argument("--model", required=True)
    s.add_argument("--keep", required=True, help="comma-separated names or @file")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_strip)

    s = sub.add_parser("relabel", help="pseudo strong labels for event clips")
    s.add_argument("--teacher", required=True)
    s.add_argument("--manifest", nargs="+", required=True)
    s.add_argument("--crop", type=float, default=1.0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_relabel)

    s = sub.add_parser("inspect", help="dump a model header")
    s.add_argument("--model", required=True)
    s.add_argument("--tensors", action="store_true", help="include the tensor manifest")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("serve", help="HTTP inference server")
    s.add_argument("--model", required=True)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    s.set_defaults(func=cmd_serve)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UkatError as exc:
        print(f"ukat {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"ukat {args.command}: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
