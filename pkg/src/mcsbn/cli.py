"""Command-line entry point: one subcommand per pipeline stage.

Exit status: 0 on success, 1 on data or model errors (one JSON line on
stderr), 2 on usage errors.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .featurize import CHANNELS, Vocab, build_vocab, iter_jsonl, read_ads, read_events, write_jsonl
from .metrics import UndefinedMetricError, evaluate_ranking
from .model import ALL_VARIANTS, BowScorer, CheckpointError, ModelScorer, load_checkpoint, save_checkpoint
from .ad_encoder import AdCache
from .serving import (CorruptRecordError, ExportReport, StoreError, VectorStore, apply_event_batch,
                      export_features, get_user_vector, score_candidates, store_summary, write_features_csv)
from .synthetic import InfeasibleConfig, SyntheticConfig, write_synthetic
from .experiment import bow_idf
from .training import (TrainConfig, TrainingDiverged, TrainingExample, build_examples, read_interactions,
                       split_by_user, train)

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


class DataError(Exception):
    """Bad input data or model files; reported as exit status 1."""

    def __init__(self, kind: str, message: str, **counts):
        super().__init__(message)
        self.kind = kind
        self.counts = counts


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError("missing_input", f"{what} not found: {p}")
    return p


def _load_vocab(path) -> Vocab:
    try:
        return Vocab.load(_require(path, "vocab"))
    except ValueError as e:
        raise DataError("bad_vocab", str(e)) from None


def _ad_tokens(ads, vocab: Vocab) -> dict[str, list[int]]:
    return {a.ad_id: vocab.encode(a.text) for a in ads.values()}


def _load_ads(path):
    ads, bad = read_ads(_require(path, "ad catalog"))
    if not ads:
        raise DataError("no_ads", f"no valid ads in {path}", malformed=bad)
    return ads, bad


def _read_dataset(path) -> tuple[dict, list[TrainingExample]]:
    rows = iter_jsonl(_require(path, "dataset"))
    header = None
    examples, bad = [], 0
    for lineno, row in rows:
        if header is None:
            if not row or row.get("kind") != "dataset":
                raise DataError("bad_dataset", f"{path}: line {lineno} is not a dataset header")
            header = row
            continue
        try:
            examples.append(TrainingExample.from_dict(row))
        except (TypeError, KeyError, ValueError, AttributeError):
            bad += 1
    if header is None:
        raise DataError("bad_dataset", f"{path}: empty dataset file")
    if bad:
        raise DataError("bad_dataset", f"{path}: {bad} malformed example rows", malformed=bad)
    return header, examples


def _load_model(path, vocab: Vocab):
    try:
        ckpt = load_checkpoint(_require(path, "checkpoint"))
    except CheckpointError as e:
        raise DataError("bad_checkpoint", str(e)) from None
    if ckpt.config.get("vocab_hash") != vocab.fingerprint():
        raise DataError("vocab_mismatch", f"checkpoint was trained with vocab {ckpt.config.get('vocab_hash')}, "
                                          f"got {vocab.fingerprint()}")
    return ckpt


def _parse_fidelity(text: str) -> dict:
    vals = [float(v) for v in text.split(",")]
    if len(vals) != len(CHANNELS):
        raise argparse.ArgumentTypeError(f"expected {len(CHANNELS)} comma-separated values")
    return dict(zip(CHANNELS, vals))


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_gen_synthetic(args) -> int:
    base = SyntheticConfig()
    cfg = SyntheticConfig(
        num_users=args.users, num_ads=args.ads, num_topics=args.topics, days=args.days, seed=args.seed,
        fidelity=args.fidelity or base.fidelity, event_rate=args.rates or base.event_rate,
        fidelity_spread=base.fidelity_spread if args.fidelity_spread is None else args.fidelity_spread,
    )
    try:
        data = write_synthetic(cfg, args.out)
    except InfeasibleConfig as e:
        raise DataError("infeasible_config", str(e)) from None
    _emit({"out": str(args.out), "seed": args.seed, "events": len(data.events), "ads": len(data.ads),
           "interactions": len(data.interactions)})
    return 0


def cmd_build_vocab(args) -> int:
    events, bad = read_events(_require(args.events, "event log"))
    texts = [e.text for e in events]
    n_ads = 0
    if args.ads:
        ads, bad_ads = _load_ads(args.ads)
        texts.extend(a.text for a in ads.values())
        n_ads = len(ads)
        bad += bad_ads
    if not texts:
        raise DataError("no_events", "no valid events", malformed=bad)
    vocab = build_vocab(texts, args.min_frequency)
    vocab.save(args.out)
    _emit({"out": str(args.out), "size": len(vocab), "hash": vocab.fingerprint(), "events": len(events),
           "ads": n_ads, "malformed": bad})
    return 0


def cmd_build_dataset(args) -> int:
    vocab = _load_vocab(args.vocab)
    events, bad_events = read_events(_require(args.events, "event log"))
    rows, _ = read_interactions(_require(args.interactions, "interaction log"))
    cfg = TrainConfig(delta_seconds=args.delta, lookback_days=args.lookback, max_sessions=args.max_sessions,
                      seed=args.seed)
    examples, report = build_examples(rows, events, vocab, cfg)
    if not examples:
        raise DataError("no_examples", "no positive interactions produced examples", malformed=report.malformed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_part, test_part = split_by_user(examples, args.test_fraction, args.seed + 1000)
    header = {"kind": "dataset", "vocab_hash": vocab.fingerprint(), "seed": args.seed, "delta_seconds": args.delta,
              "lookback_days": args.lookback, "max_sessions": args.max_sessions}
    for name, part in (("train", train_part), ("test", test_part)):
        write_jsonl(out / f"{name}.jsonl", [dict(header, split=name)] + [e.to_dict() for e in part])
    _emit({"out": str(out), "train": len(train_part), "test": len(test_part), "malformed_events": bad_events,
           "malformed_interactions": report.malformed, "unlabeled": report.skipped_unlabeled})
    return 0


def cmd_train(args) -> int:
    vocab = _load_vocab(args.vocab)
    header, examples = _read_dataset(args.dataset)
    if header.get("vocab_hash") != vocab.fingerprint():
        raise DataError("vocab_mismatch", "dataset and vocab disagree")
    ads, _ = _load_ads(args.ads)
    ad_tokens = _ad_tokens(ads, vocab)
    cfg = TrainConfig(d=args.dim, batch_size=args.batch_size, max_steps=args.steps, negatives=args.negatives,
                      patience=args.patience, eval_every=args.eval_every, lr=args.lr, seed=args.seed,
                      sampler=args.sampler, delta_seconds=header.get("delta_seconds", 3600),
                      lookback_days=header.get("lookback_days", 14), max_sessions=header.get("max_sessions", 14))
    config = {"variant": args.variant, "vocab_hash": vocab.fingerprint(), "vocab_size": len(vocab),
              "seed": args.seed, "train": cfg.to_dict()}
    if args.variant == "bow":
        idf = bow_idf(examples, ad_tokens, len(vocab))
        save_checkpoint(args.out, config, {"bow.idf": idf.astype(np.float32)})
        _emit({"out": str(args.out), "variant": "bow", "documents": len(examples) + len(ad_tokens)})
        return 0
    try:
        params, report = train(examples, ad_tokens, len(vocab), cfg, variant=args.variant)
    except TrainingDiverged as e:
        raise DataError("diverged", str(e)) from None
    config["report"] = {"steps": report.steps, "best_step": report.best_step, "best_val_auc": report.best_auc,
                        "stopped_early": report.stopped_early, "train_examples": report.train_examples,
                        "val_examples": report.val_examples}
    save_checkpoint(args.out, config, params.tensors())
    _emit(dict(out=str(args.out), variant=args.variant, **config["report"]))
    return 0


def cmd_eval(args) -> int:
    vocab = _load_vocab(args.vocab)
    ckpt = _load_model(args.checkpoint, vocab)
    header, examples = _read_dataset(args.dataset)
    if header.get("vocab_hash") != vocab.fingerprint():
        raise DataError("vocab_mismatch", "dataset and vocab disagree")
    ads, _ = _load_ads(args.ads)
    ad_tokens = {a: t for a, t in _ad_tokens(ads, vocab).items() if t}
    examples = [e for e in examples if e.positive_ad_id in ad_tokens]
    if ckpt.variant == "bow":
        scorer = BowScorer(ckpt.tensors["bow.idf"], ad_tokens)
    else:
        scorer = ModelScorer(ckpt.model(), ad_tokens)
    ad_ids = sorted(ad_tokens)
    try:
        report = evaluate_ranking(scorer, examples, [e.packed() for e in examples], ad_ids, np.ones(len(ad_ids)),
                                  m=args.negatives, seed=args.seed,
                                  advertiser_of={a.ad_id: a.advertiser_id for a in ads.values()})
    except UndefinedMetricError as e:
        raise DataError("undefined_metric", str(e)) from None
    out = dict(report.to_dict(), variant=ckpt.variant, seed=args.seed)
    _emit({k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in out.items()})
    if args.csv:
        report.append_csv(args.csv, {"variant": ckpt.variant, "seed": args.seed})
    return 0


def _open_serving(args):
    vocab = _load_vocab(args.vocab)
    ckpt = _load_model(args.checkpoint, vocab)
    if ckpt.variant == "bow":
        raise DataError("unsupported_variant", "bow checkpoints cannot serve user vectors")
    try:
        params = ckpt.model()
        store = VectorStore(args.store)
    except (CheckpointError, CorruptRecordError, ValueError) as e:
        raise DataError("bad_model_or_store", str(e)) from None
    return vocab, ckpt, params, store


def cmd_update_vectors(args) -> int:
    vocab, ckpt, params, store = _open_serving(args)
    events, bad = read_events(_require(args.events, "event log"))
    total = {"users_touched": 0, "events_applied": 0, "sessions_committed": 0, "late_events": 0}
    batches = 0
    try:
        for s in range(0, len(events), args.batch_events):
            rep = apply_event_batch(store, params, vocab, events[s : s + args.batch_events], ckpt.model_version)
            batches += 1
            for k, v in rep.to_dict().items():
                total[k] += v
    except (StoreError, ValueError) as e:
        raise DataError("update_failed", str(e), batches_committed=batches) from None
    if args.compact:
        store.compact()
    _emit(dict(total, batches=batches, malformed=bad, users_in_store=len(store), watermark=store.watermark))
    return 0


def _candidate_ids(path) -> list[str]:
    return [line.strip() for line in Path(_require(path, "candidates file")).read_text().splitlines() if line.strip()]


def cmd_score(args) -> int:
    vocab, ckpt, params, store = _open_serving(args)
    ads, _ = _load_ads(args.ads)
    try:
        vec = get_user_vector(store, params, args.user_id)
    except CorruptRecordError as e:
        raise DataError("corrupt_record", str(e)) from None
    cands = [(a, vocab.encode(ads[a].text) if a in ads else None) for a in _candidate_ids(args.candidates)]
    if not cands:
        raise DataError("no_candidates", "candidate list is empty")
    ranking = score_candidates(vec, cands, AdCache(), params, args.top_k, ckpt.model_version)
    if not ranking.candidates:
        raise DataError("no_valid_candidates", ranking.diagnostic, skipped=len(ranking.skipped))
    for c in ranking:
        _emit({"user_id": args.user_id, "ad_id": c.ad_id, "score": c.score, "rank": c.rank})
    if ranking.skipped:
        print(json.dumps({"warning": ranking.diagnostic}), file=sys.stderr)
    return 0


def _read_pairs(path) -> list[tuple[str, str]]:
    pairs = []
    for _, row in iter_jsonl(_require(path, "pairs file")):
        if row and "user_id" in row and "ad_id" in row:
            pairs.append((str(row["user_id"]), str(row["ad_id"])))
    return pairs


def cmd_export_features(args) -> int:
    vocab, ckpt, params, store = _open_serving(args)
    ads, _ = _load_ads(args.ads)
    report = ExportReport()
    rows = export_features(store, params, _read_pairs(args.pairs), _ad_tokens(ads, vocab), report)
    try:
        write_features_csv(args.out, rows, params.dim)
    except CorruptRecordError as e:
        raise DataError("corrupt_record", str(e)) from None
    _emit({"out": str(args.out), "rows": report.rows, "missing_ads": report.missing_ads,
           "columns": 2 * params.dim + 1})
    return 0


def cmd_inspect(args) -> int:
    path = _require(args.path, "file")
    with open(path, "rb") as f:
        magic = f.read(8)
    try:
        if magic == b"MCSBCKPT":
            ckpt = load_checkpoint(path)
            _emit({"kind": "checkpoint", "variant": ckpt.variant, "model_version": ckpt.model_version,
                   "config": ckpt.config, "tensors": {n: list(a.shape) for n, a in sorted(ckpt.tensors.items())}})
        elif magic == b"MCSBSTOR":
            _emit(store_summary(path))
        else:
            raise DataError("unknown_file", f"{path}: unrecognized magic {magic!r} at byte offset 0")
    except (CheckpointError, CorruptRecordError) as e:
        raise DataError("corrupt_file", str(e)) from None
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcsbn", description="Multi-channel sequential user/ad encoder pipeline.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", help="TOML file; keys are flag names (top level or per-subcommand table)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    g = sub.add_parser("gen-synthetic", help="write a seeded synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--users", type=int, default=10_000)
    g.add_argument("--ads", type=int, default=2_000)
    g.add_argument("--topics", type=int, default=20)
    g.add_argument("--days", type=int, default=14)
    g.add_argument("--fidelity", type=_parse_fidelity, help="page,query,ad_click topic fidelities")
    g.add_argument("--fidelity-spread", type=float)
    g.add_argument("--rates", type=_parse_fidelity, help="page,query,ad_click events per user-day")
    g.set_defaults(func=cmd_gen_synthetic)

    v = sub.add_parser("build-vocab", help="build the token vocabulary")
    v.add_argument("--events", required=True)
    v.add_argument("--ads")
    v.add_argument("--out", required=True)
    v.add_argument("--min-frequency", type=int, default=3)
    v.set_defaults(func=cmd_build_vocab)

    d = sub.add_parser("build-dataset", help="featurize interactions into train/test example files")
    d.add_argument("--events", required=True)
    d.add_argument("--interactions", required=True)
    d.add_argument("--vocab", required=True)
    d.add_argument("--out", required=True, help="output directory")
    d.add_argument("--delta", type=int, default=3600, help="withheld seconds before each positive")
    d.add_argument("--lookback", type=int, default=14, help="history window in days")
    d.add_argument("--max-sessions", type=int, default=14)
    d.add_argument("--test-fraction", type=float, default=0.1)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_build_dataset)

    t = sub.add_parser("train", help="train one model variant")
    t.add_argument("--dataset", required=True)
    t.add_argument("--ads", required=True)
    t.add_argument("--vocab", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=ALL_VARIANTS, default="mcsbn")
    t.add_argument("--dim", type=int, default=128)
    t.add_argument("--batch-size", type=int, default=512)
    t.add_argument("--steps", type=int, default=100_000)
    t.add_argument("--negatives", type=int, default=10)
    t.add_argument("--patience", type=int, default=5)
    t.add_argument("--eval-every", type=int, default=500)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--sampler", choices=("frequency", "uniform"), default="frequency")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="candidate-set evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--ads", required=True)
    e.add_argument("--vocab", required=True)
    e.add_argument("--negatives", type=int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--csv", help="append a result row to this CSV file")
    e.set_defaults(func=cmd_eval)

    for name, func, helptext in (("update-vectors", cmd_update_vectors, "fold an event log into the vector store"),
                                 ("score", cmd_score, "rank candidate ads for one user"),
                                 ("export-features", cmd_export_features, "write h_u, h_a, S feature rows")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--vocab", required=True)
        s.add_argument("--store", required=True)
        s.set_defaults(func=func)
        if name == "update-vectors":
            s.add_argument("--events", required=True)
            s.add_argument("--batch-events", type=int, default=50_000)
            s.add_argument("--compact", action="store_true")
        elif name == "score":
            s.add_argument("--ads", required=True)
            s.add_argument("--user-id", required=True)
            s.add_argument("--candidates", required=True, help="one ad_id per line")
            s.add_argument("--top-k", type=int, default=10)
        else:
            s.add_argument("--ads", required=True)
            s.add_argument("--pairs", required=True, help="JSONL with user_id and ad_id")
            s.add_argument("--out", required=True)

    i = sub.add_parser("inspect", help="summarize a checkpoint or store file")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Feed TOML values in as parser defaults so explicit flags still win."""
    # a bare pre-parser: the real subparsers would reject flags the config is about to supply
    pre_parser = argparse.ArgumentParser(add_help=False)
    pre_parser.add_argument("--config")
    pre, rest = pre_parser.parse_known_args(argv)
    commands = parser._subparsers._group_actions[0].choices
    command = next((a for a in rest if a in commands), None)
    if not pre.config or command is None:
        return
    try:
        with open(pre.config, "rb") as f:
            cfg = tomllib.load(f)
    except (OSError, tomllib.TOMLDecodeError) as e:
        parser.error(f"cannot read config {pre.config}: {e}")
    sub = commands[command]
    known = {a.dest for a in sub._actions}
    # top-level keys are shared and apply where they fit; a command's own table is strict
    values = {k.replace("-", "_"): v for k, v in cfg.items() if not isinstance(v, dict)}
    values = {k: v for k, v in values.items() if k in known}
    table = {k.replace("-", "_"): v for k, v in cfg.get(command, {}).items()}
    values.update(table)
    unknown = sorted(set(table) - known)
    if unknown:
        parser.error(f"unknown config keys for {command}: {', '.join(unknown)}")
    for a in sub._actions:
        if a.dest in values:
            a.required = False
            if a.type is _parse_fidelity and isinstance(values[a.dest], list):
                values[a.dest] = dict(zip(CHANNELS, map(float, values[a.dest])))
    sub.set_defaults(**values)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except DataError as e:
        print(json.dumps(dict({"error": e.kind, "message": str(e)}, **e.counts), sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
