"""Command-line entry point: ``ahnpl <command> [options]``.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from collections import Counter
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from ahnpl import __version__
from ahnpl import encoders as enc
from ahnpl import synthetic as syn
from ahnpl.embedding import read_embeddings, write_embeddings
from ahnpl.evaluation import distance_report, distance_table_tsv, evaluate_choice
from ahnpl.losses import LOSS_NAMES
from ahnpl.pipeline import gradcheck, toy_problem
from ahnpl.textgen import (
    NOUN_SWAP,
    SUBSTITUTION,
    PosLexicon,
    generate_negative_set,
    pos_tag,
    read_corpus,
    read_negatives,
    write_corpus,
    write_negatives,
)
from ahnpl.trainer import PRESETS, NumericalError, Sample, TrainConfig, preset, stream, train

logger = logging.getLogger("ahnpl")


class ValidationError(Exception):
    pass


class _OtherTagger:
    def tag(self, word: str) -> str:
        return "OTHER"


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed, inputs, outputs) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "tool_version": __version__,
    }
    path = out_dir / f"manifest.{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_config_file(path) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ValidationError("config file must hold a JSON object")
    unknown = set(doc) - {"preset", "train", "data"}
    if unknown:
        raise ValidationError(f"unknown config sections: {sorted(unknown)}")
    return doc


def features_path(path) -> Path:
    return Path(path).with_suffix(".features.txt")


def load_samples(corpus_path, lexicon) -> list[Sample]:
    rows = read_corpus(corpus_path)
    feats = read_embeddings(features_path(corpus_path))
    samples = []
    for cid, tokens in rows:
        if cid not in feats:
            raise ValidationError(f"no features for corpus id {cid!r}")
        samples.append(Sample(cid, pos_tag(tokens, lexicon, cid), feats[cid]))
    return samples


# -- commands --------------------------------------------------------------


def cmd_gen_data(args) -> int:
    doc = load_config_file(args.config)
    data = syn.DataConfig(**doc.get("data", {}))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = data.vocab
    pairs = syn.generate_pairs(data.n_train, stream(args.seed, "data"), vocab, data.noise_sigma)
    bench = syn.build_benchmark(data.n_benchmark, stream(args.seed, "benchmark"), vocab=vocab, noise_sigma=data.noise_sigma)
    corpus_path = out / "train.tsv"
    write_corpus(corpus_path, [(p.id, p.caption.tokens) for p in pairs])
    write_embeddings(features_path(corpus_path), [(p.id, p.features) for p in pairs])
    lexicon_path = out / "lexicon.tsv"
    vocab.lexicon().to_file(lexicon_path)
    bench_path = out / "benchmark.tsv"
    bench_features = syn.write_benchmark(bench_path, bench)
    outputs = [corpus_path, features_path(corpus_path), lexicon_path, bench_path, bench_features]
    write_manifest(out, "gen-data", asdict(data), args.seed, [p for p in [args.config] if p], outputs)
    print(f"wrote {len(pairs)} training pairs and {len(bench)} benchmark items to {out}")
    return 0


def cmd_gen_negatives(args) -> int:
    lexicon = PosLexicon.from_file(args.lexicon)
    rng = stream(args.seed, "negatives")
    sets = []
    kinds: Counter = Counter()
    skipped = 0
    for cid, tokens in read_corpus(args.corpus):
        s = generate_negative_set(pos_tag(tokens, lexicon, cid), args.k, lexicon, rng)
        if len(s) == 0:
            skipped += 1
        kinds.update(n.kind for n in s)
        sets.append(s)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_negatives(out, sets)
    write_manifest(out.parent, "gen-negatives", {"k": args.k}, args.seed, [args.corpus, args.lexicon], [out])
    print(f"captions: {len(sets)}")
    print(f"{NOUN_SWAP}: {kinds[NOUN_SWAP]}")
    print(f"{SUBSTITUTION}: {kinds[SUBSTITUTION]}")
    print(f"skipped: {skipped}")
    return 0


def resolve_train_config(args) -> TrainConfig:
    doc = load_config_file(args.config)
    name = args.preset or doc.get("preset", "desk")
    overrides = dict(doc.get("train", {}))
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.no_negatives:
        overrides["use_negatives"] = False
    if args.no_mhnl:
        overrides["use_mhnl"] = False
    if args.no_dmcl:
        overrides["use_dmcl"] = False
    try:
        return preset(name, **overrides)
    except (KeyError, TypeError) as exc:
        raise ValidationError(str(exc)) from None


def cmd_train(args) -> int:
    config = resolve_train_config(args)
    lexicon = PosLexicon.from_file(args.lexicon)
    corpus = load_samples(args.corpus, lexicon)
    negative_sets = read_negatives(args.negatives, lexicon) if args.negatives else None
    benchmark = syn.read_benchmark(args.benchmark, lexicon) if args.benchmark else None
    init, vocab = None, None
    if args.init:
        init, vocab, _, _ = enc.load_checkpoint(args.init)
    result = train(config, corpus, benchmark, lexicon, vocab=vocab, negative_sets=negative_sets, init=init)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.txt"
    enc.save_checkpoint(ckpt, result.params, result.vocab, result.margin.a, {"config": asdict(config)})
    result.report.checkpoint_id = sha256_file(ckpt)[:16]
    metrics = out / "metrics.csv"
    metrics.write_text(result.report.metrics_csv(), encoding="utf-8")
    report = out / "report.json"
    # wall-clock stays out of the file so reruns are byte-identical
    report.write_text(replace(result.report, wall_clock=0.0).to_json() + "\n", encoding="utf-8")
    inputs = [p for p in (args.config, args.corpus, features_path(args.corpus), args.lexicon, args.negatives, args.benchmark, args.init) if p]
    write_manifest(out, "train", asdict(config), config.seed, inputs, [ckpt, metrics, report])
    acc = result.report.epoch_accuracy
    print(f"steps: {len(result.report.history)}  final loss: {result.report.history[-1]['l_total']:.6f}  a: {result.margin.a:.4f}")
    if acc:
        print(f"benchmark accuracy by epoch: {' '.join(f'{x:.4f}' for x in acc)}")
    print(f"wall-clock: {result.report.wall_clock:.2f}s")
    return 0


def _read_benchmark_any(path, lexicon_path):
    tagger = PosLexicon.from_file(lexicon_path) if lexicon_path else _OtherTagger()
    return syn.read_benchmark(path, tagger)


def cmd_eval(args) -> int:
    try:
        params, vocab, _, _ = enc.load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read checkpoint {args.checkpoint}: {exc}") from None
    items = _read_benchmark_any(args.benchmark, args.lexicon)
    report = evaluate_choice(params, vocab, items)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "eval.csv"
    csv_path.write_text(report.to_csv(), encoding="utf-8")
    outputs = [csv_path]
    if args.items:
        items_path = out / "items.tsv"
        items_path.write_text(report.items_tsv(), encoding="utf-8")
        outputs.append(items_path)
    write_manifest(out, "eval", {"items": bool(args.items)}, None, [args.checkpoint, args.benchmark], outputs)
    sys.stdout.write(report.to_csv())
    return 0


def cmd_gradcheck(args) -> int:
    doc = load_config_file(args.config)
    tau = doc.get("train", {}).get("tau", args.tau)
    params, raw, state = toy_problem(args.seed, n=args.n, k=args.k, dim=args.dim)
    ok = True
    for term in LOSS_NAMES:
        rep = gradcheck(params, raw, state, term, tau=tau, epsilon=args.epsilon, corrupt=args.corrupt)
        passed = rep.passed(args.tol)
        ok &= passed
        print(f"{term:14s} {'PASS' if passed else 'FAIL'}  max_rel_err={rep.max_rel_error:.3e}  checked={rep.n_checked}  kinks={rep.n_kink}")
    return 0 if ok else 2


def cmd_distance_report(args) -> int:
    try:
        params, vocab, _, _ = enc.load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read checkpoint {args.checkpoint}: {exc}") from None
    items = _read_benchmark_any(args.examples, args.lexicon)
    if args.limit:
        items = items[: args.limit]
    rows = distance_report(params, vocab, items)
    table = distance_table_tsv(rows)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table, encoding="utf-8")
        write_manifest(out.parent, "distance-report", {"limit": args.limit}, None, [args.checkpoint, args.examples], [out])
    sys.stdout.write(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ahnpl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic training corpus, lexicon and benchmark")
    g.add_argument("--config", help="JSON config; its 'data' section sets sizes and noise")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("gen-negatives", help="generate textual hard negatives for a corpus")
    g.add_argument("--corpus", required=True)
    g.add_argument("--lexicon", required=True)
    g.add_argument("--k", type=int, default=2, help="negatives per kind (default 2)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="negative corpus file")
    g.set_defaults(func=cmd_gen_negatives)

    g = sub.add_parser("train", help="train the dual encoder")
    g.add_argument("--config", help="JSON config with optional 'preset' and 'train' sections")
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--corpus", required=True, help="corpus TSV; features read from the sibling .features.txt")
    g.add_argument("--lexicon", required=True)
    g.add_argument("--negatives", help="precomputed negative corpus (generated on the fly otherwise)")
    g.add_argument("--benchmark", help="benchmark TSV scored after each epoch")
    g.add_argument("--init", help="checkpoint to fine-tune from")
    g.add_argument("--seed", type=int)
    g.add_argument("--no-negatives", action="store_true", help="drop hard negatives from the contrastive softmax")
    g.add_argument("--no-mhnl", action="store_true", help="drop the multimodal hard negative loss")
    g.add_argument("--no-dmcl", action="store_true", help="drop the dynamic margin loss")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("eval", help="binary-choice accuracy of a checkpoint on a benchmark")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--benchmark", required=True)
    g.add_argument("--lexicon")
    g.add_argument("--items", action="store_true", help="also write the per-item TSV")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="verify analytic gradients of every loss term")
    g.add_argument("--config")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=4)
    g.add_argument("--k", type=int, default=2)
    g.add_argument("--dim", type=int, default=8)
    g.add_argument("--tau", type=float, default=0.07)
    g.add_argument("--epsilon", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-6)
    g.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    g = sub.add_parser("distance-report", help="cosine distances among image, text and their negatives")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--examples", required=True, help="benchmark-format file of (positive, negative) pairs")
    g.add_argument("--lexicon")
    g.add_argument("--limit", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_distance_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        dump = getattr(exc, "dump", None)
        if dump:
            print(json.dumps(dump, default=str), file=sys.stderr)
        return 2
    except (ValidationError, ValueError, KeyError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
