"""Command-line front end: ``interdistill <command> [flags]``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import corpus as C
from .config import read_config
from .distill import (DistillConfig, TrainReport, child_seed, direct_distill_train, make_record,
                      stage1_train_ranker, stage2_train_retriever)
from .encoder import load_model, save_model
from .errors import (CheckpointError, IntegrityError, InterDistillError, ParseError,
                     TeacherError, UnparseableResponseError)
from .evaluate import evaluate_retrieval
from .pipeline import AXES, SweepAborted, ablate, base_encoder, sweep_table
from .synth import LatentRelevance, SynthConfig, config_dict, generate
from .teacher import (RemoteTeacher, TeacherEndpointConfig, TeacherRanking, TeacherScores,
                      bm25_teacher, check_latent_coverage, load_teacher_file, oracle_scores,
                      oracle_teacher, rouge2_teacher, rule_based_teacher, write_teacher_file)

log = logging.getLogger("interdistill")

EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_MISSING, EXIT_FORMAT, EXIT_INTEGRITY, EXIT_TEACHER = \
    0, 1, 2, 3, 4, 5, 6

EXIT_HELP = """exit status:
  0  success
  1  any other failure
  2  bad command line or configuration value
  3  a required input file is missing
  4  an input file is malformed (JSONL, checkpoint, config)
  5  inputs disagree with each other (unknown ids, missing latent relevance)
  6  teacher endpoint failure (transport or HTTP error)
"""

SYNTH_KEYS = ("num_docs", "num_train", "num_valid", "num_test", "vocab_size", "topics")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument handling

def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run")
    g.add_argument("--config", help="flat key = value file; flags win")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="output file or directory")
    g.add_argument("-v", "--verbose", action="store_true")
    d = p.add_argument_group("training")
    d.add_argument("--k", type=int, default=5, help="candidates per question")
    d.add_argument("--theta", type=float, default=1.0, help="softmax temperature (both stages)")
    d.add_argument("--theta-retriever", type=float, help="override the retriever temperature")
    d.add_argument("--epochs", type=int, default=5)
    d.add_argument("--batch-size", type=int, default=20)
    d.add_argument("--max-len", type=int, default=128)
    d.add_argument("--lr-ranker", type=float, default=DistillConfig.lr_ranker)
    d.add_argument("--lr-retriever", type=float, default=DistillConfig.lr_retriever)
    d.add_argument("--lr-direct", type=float, default=DistillConfig.lr_direct)
    d.add_argument("--exclude-fallback", action="store_true",
                   help="drop teacher fallbacks from training")
    f = p.add_argument_group("inputs")
    for name in ("corpus", "examples", "candidates", "latent", "model", "ranker",
                 "teacher-file", "synth-dir"):
        f.add_argument(f"--{name}")
    f.add_argument("--split", default=None, help="train | valid | test")
    t = p.add_argument_group("teacher")
    t.add_argument("--teacher", default="oracle",
                   choices=["oracle", "remote", "bm25", "rouge2", "rule_based", "none"])
    t.add_argument("--mode", default="rerank", choices=["rerank", "score"])
    t.add_argument("--p-swap", type=float, default=0.0)
    t.add_argument("--noise", type=float, default=0.0, help="oracle score noise")
    t.add_argument("--endpoint", help="base URL of a chat-completions endpoint")
    t.add_argument("--model-name", default="gpt-4o")
    t.add_argument("--api-key-env", default="TEACHER_API_KEY")
    t.add_argument("--cache-dir")
    t.add_argument("--max-in-flight", type=int, default=4)
    t.add_argument("--retries", type=int, default=3)
    t.add_argument("--backoff", type=float, default=0.5)
    t.add_argument("--timeout", type=float, default=60.0)
    e = p.add_argument_group("evaluation and sweeps")
    e.add_argument("--ks", default="5,10", help="comma-separated k values for HR@k")
    e.add_argument("--axis", choices=AXES)
    e.add_argument("--values", help="comma-separated sweep values")
    e.add_argument("--direct", action="store_true", help="ablate: also run direct distillation")
    s = p.add_argument_group("synthetic data")
    for key in SYNTH_KEYS:
        s.add_argument("--" + key.replace("_", "-"), type=int)


COMMANDS = {
    "synth": "generate a synthetic corpus, questions and hidden relevance",
    "index": "initialise the base encoder and embed the corpus",
    "retrieve": "write top-k candidates per question",
    "teach": "ask a teacher to order (or score) each candidate set",
    "train-ranker": "stage 1: fit a ranker to teacher orders",
    "train-retriever": "stage 2: fit a retriever to the ranker",
    "direct": "fit a retriever straight to teacher scores",
    "eval": "hit rate of a retriever checkpoint",
    "ablate": "full synthetic pipeline swept over one axis",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="interdistill", epilog=EXIT_HELP,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=EXIT_HELP,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        _common(p)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    """Parse ``argv`` with config-file values installed as defaults."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in read_config(args.config).items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise UsageError(f"unknown configuration key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            value = raw.lower() in ("1", "true", "yes", "on")
        else:
            try:
                value = action.type(raw) if action.type else raw
            except ValueError:
                raise UsageError(f"bad value for {key}: {raw!r}") from None
            if action.choices and value not in action.choices:
                raise UsageError(f"{key} must be one of {list(action.choices)}")
        defaults[key] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def distill_config(args) -> DistillConfig:
    theta_r = args.theta_retriever if args.theta_retriever is not None else args.theta
    return DistillConfig(k=args.k, theta_ranker=args.theta, theta_retriever=theta_r,
                         lr_ranker=args.lr_ranker, lr_retriever=args.lr_retriever,
                         lr_direct=args.lr_direct, epochs=args.epochs,
                         batch_size=args.batch_size, max_len=args.max_len, seed=args.seed,
                         exclude_fallback=args.exclude_fallback)


# ---------------------------------------------------------------------------
# manifests

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


_PATH_ARGS = {"corpus", "examples", "candidates", "latent", "model", "ranker", "teacher_file",
              "synth_dir", "cache_dir"}


def _config_echo(args) -> dict:
    skip = {"command", "config", "verbose", "out"} | _PATH_ARGS
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip and v is not None}


def write_manifest(path, args, inputs: dict, outputs: dict, extra: dict | None = None) -> None:
    """Config echo plus input/output digests; no timestamps or absolute paths."""
    manifest = {
        "command": args.command,
        "config": _config_echo(args),
        "inputs": {k: {"file": Path(p).name, "sha256": file_digest(p)}
                   for k, p in sorted(inputs.items())},
        "outputs": {k: {"file": Path(p).name, "sha256": file_digest(p)}
                    for k, p in sorted(outputs.items())},
    }
    if extra:
        manifest.update(extra)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def _need(args, *names) -> dict:
    found = {}
    for name in names:
        value = getattr(args, name.replace("-", "_"))
        if value is None:
            raise UsageError(f"--{name} is required for {args.command}")
        if name not in ("out", "endpoint") and not Path(value).exists():
            raise FileNotFoundError(f"--{name}: {value} does not exist")
        found[name.replace("-", "_")] = value
    return found


def _out_file(args) -> Path:
    out = Path(_need(args, "out")["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _manifest_for(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    out = Path(_need(args, "out")["out"])
    out.mkdir(parents=True, exist_ok=True)
    overrides = {k: getattr(args, k) for k in SYNTH_KEYS if getattr(args, k) is not None}
    cfg = SynthConfig(seed=args.seed, **overrides)
    world = generate(cfg)
    files = {"corpus": out / "corpus.jsonl", "examples": out / "examples.jsonl",
             "latent": out / "latent.jsonl"}
    C.write_corpus(world.corpus, files["corpus"])
    C.write_examples(world.examples, files["examples"])
    world.latent.save(files["latent"])
    write_manifest(out / "manifest.json", args, {}, files, {"synth": config_dict(cfg)})
    print(f"wrote {len(world.corpus)} documents and {len(world.examples)} questions to {out}")
    return EXIT_OK


def cmd_index(args) -> int:
    paths = _need(args, "corpus", "out")
    out = Path(paths["out"])
    out.mkdir(parents=True, exist_ok=True)
    model = base_encoder(args.seed)
    index = C.build_index(C.load_corpus(paths["corpus"]), model, args.max_len)
    files = {"model": out / "base.ckpt", "vectors": out / "doc_vectors.npy"}
    save_model(model, files["model"])
    np.save(files["vectors"], index.vectors)
    write_manifest(out / "manifest.json", args, {"corpus": paths["corpus"]}, files)
    print(f"indexed {len(index)} documents; base encoder at {files['model']}")
    return EXIT_OK


def _split(examples, name):
    return [e for e in examples if e.split == name] if name else list(examples)


def cmd_retrieve(args) -> int:
    paths = _need(args, "corpus", "examples", "model")
    out = _out_file(args)
    model = load_model(paths["model"])
    index = C.build_index(C.load_corpus(paths["corpus"]), model, args.max_len)
    examples = _split(C.load_examples(paths["examples"]), args.split or "train")
    cands = C.retrieve_many(index, model, examples, args.k)
    cats = [C.categorize(C.candidate_texts(index, c), e.answers) for c, e in zip(cands, examples)]
    C.write_candidates(cands, out, cats)
    write_manifest(_manifest_for(out), args, paths, {"candidates": out})
    print(f"retrieved top-{args.k} for {len(cands)} questions")
    return EXIT_OK


def _align(examples, candidates):
    by_qid = {e.qid: e for e in examples}
    pairs = []
    for c in candidates:
        if c.qid not in by_qid:
            raise IntegrityError(f"candidate set for unknown qid {c.qid!r}")
        pairs.append((by_qid[c.qid], c))
    return pairs


def cmd_teach(args) -> int:
    paths = _need(args, "corpus", "examples", "candidates")
    out = _out_file(args)
    docs = C.load_corpus(paths["corpus"])
    pairs = _align(C.load_examples(paths["examples"]), C.load_candidates(paths["candidates"]))
    index = C.build_index(docs, base_encoder(args.seed), args.max_len)
    texts = [C.candidate_texts(index, c) for _, c in pairs]
    kind = args.teacher
    extra: dict = {}
    if kind == "oracle":
        if args.latent is None:
            raise IntegrityError("the oracle teacher needs --latent relevance")
        paths.update(_need(args, "latent"))
        latent = LatentRelevance.load(paths["latent"])
        check_latent_coverage(latent, [e.qid for e, _ in pairs])
        rng = np.random.default_rng(child_seed(args.seed, "teacher"))
        if args.mode == "rerank":
            items = [oracle_teacher(e.qid, c.doc_ids, latent, args.p_swap, rng) for e, c in pairs]
        else:
            items = [oracle_scores(e.qid, c.doc_ids, latent, args.noise, rng) for e, c in pairs]
    elif kind == "remote":
        _need(args, "endpoint")
        cfg = TeacherEndpointConfig(args.endpoint, args.model_name, args.timeout,
                                    args.max_in_flight, args.retries, args.backoff,
                                    args.cache_dir, args.api_key_env)
        with RemoteTeacher(cfg) as teacher:
            method = "rerank" if args.mode == "rerank" else "score"
            items = teacher.map(method, [(e.qid, e.question, t) for (e, _), t in zip(pairs, texts)])
            extra["requests"] = teacher.requests_made
    elif args.mode == "score":
        raise UsageError(f"teacher {kind} only produces rankings")
    elif kind == "bm25":
        items = [bm25_teacher(e.qid, e.question, c.doc_ids, index) for e, c in pairs]
    elif kind == "rouge2":
        items = [rouge2_teacher(e.qid, e.question, t) for (e, _), t in zip(pairs, texts)]
    elif kind == "rule_based":
        items = [rule_based_teacher(e.qid, t, e.answers) for (e, _), t in zip(pairs, texts)]
    else:
        raise UsageError("teach needs a teacher other than none")
    write_teacher_file(items, out)
    stats = {"total": len(items), "fallback": sum(1 for i in items if i.fallback),
             "repaired": sum(1 for i in items if getattr(i, "repaired", False))}
    write_manifest(_manifest_for(out), args, paths, {"teacher": out}, {"teacher_stats": stats})
    print(f"teacher {kind}: {stats['total']} instances, {stats['repaired']} repaired, "
          f"{stats['fallback']} fallback")
    return EXIT_OK


def _records(args, model, need: str):
    """Training records from corpus, examples, candidates and a teacher file."""
    paths = _need(args, "corpus", "examples", "candidates", "teacher-file")
    index = C.build_index(C.load_corpus(paths["corpus"]), model, args.max_len)
    pairs = _align(C.load_examples(paths["examples"]), C.load_candidates(paths["candidates"]))
    teach = {t.qid: t for t in load_teacher_file(paths["teacher_file"])}
    records, skipped = [], 0
    for ex, cands in pairs:
        out = teach.get(ex.qid)
        if not isinstance(out, TeacherRanking if need == "ranking" else TeacherScores):
            log.warning("skipping %s: no teacher %s", ex.qid, need)
            skipped += 1
            continue
        try:
            records.append(make_record(ex, cands, index, model.vocab_buckets, out))
        except IntegrityError as exc:
            log.warning("skipping %s: %s", ex.qid, exc)
            skipped += 1
    if not records:
        raise IntegrityError(f"no usable training records (teacher file lacks {need}s?)")
    return records, skipped, paths


def _finish_training(args, model, report: TrainReport, skipped, inputs) -> int:
    out = _out_file(args)
    save_model(model, out)
    report.skipped = skipped
    report.checkpoint = out.name
    log_path = out.with_name(out.name + ".log.jsonl")
    report.write_log(log_path)
    # the log holds wall-clock seconds, so it is named but not digested
    write_manifest(_manifest_for(out), args, inputs, {"model": out},
                   {"log": log_path.name, "training": {"instances": report.total, "repaired": report.repaired,
                                 "fallback": report.fallback, "skipped": skipped,
                                 "epoch_losses": report.epoch_losses}})
    print(f"{args.command}: {report.total} instances, final loss "
          f"{report.epoch_losses[-1]:.6f}, checkpoint {out}")
    return EXIT_OK


def _base_model(args):
    if args.model:
        return load_model(_need(args, "model")["model"]), {"model": args.model}
    return base_encoder(args.seed), {}


def cmd_train_ranker(args) -> int:
    base, inputs = _base_model(args)
    ranker = base.copy("ranker")
    records, skipped, paths = _records(args, base, "ranking")
    report = stage1_train_ranker(records, ranker, distill_config(args))
    return _finish_training(args, ranker, report, skipped, {**paths, **inputs})


def cmd_train_retriever(args) -> int:
    base, inputs = _base_model(args)
    ranker = load_model(_need(args, "ranker")["ranker"])
    records, skipped, paths = _records(args, base, "ranking")
    retriever = base.copy("retriever")
    report = stage2_train_retriever(records, ranker, retriever, distill_config(args))
    return _finish_training(args, retriever, report, skipped,
                            {**paths, **inputs, "ranker": args.ranker})


def cmd_direct(args) -> int:
    base, inputs = _base_model(args)
    records, skipped, paths = _records(args, base, "score")
    retriever = base.copy("retriever")
    report = direct_distill_train(records, retriever, distill_config(args))
    return _finish_training(args, retriever, report, skipped, {**paths, **inputs})


def _ks(args) -> list[int]:
    try:
        ks = sorted({int(v) for v in args.ks.split(",") if v.strip()})
    except ValueError:
        raise UsageError(f"--ks must be comma-separated integers, got {args.ks!r}") from None
    if not ks or ks[0] < 1:
        raise UsageError("--ks needs positive integers")
    return ks


def cmd_eval(args) -> int:
    paths = _need(args, "corpus", "examples", "model")
    model = load_model(paths["model"])
    index = C.build_index(C.load_corpus(paths["corpus"]), model, args.max_len)
    examples = _split(C.load_examples(paths["examples"]), args.split or "test")
    ks = _ks(args)
    results = C.retrieve_many(index, model, examples, max(ks))
    report = evaluate_retrieval(results, examples, index, ks,
                                {"split": args.split or "test", "model": Path(paths["model"]).name})
    print(report.table(model.role))
    if args.out:
        out = _out_file(args)
        out.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                       encoding="utf-8")
        write_manifest(_manifest_for(out), args, paths, {"report": out})
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.synth_dir:
        d = Path(_need(args, "synth-dir")["synth_dir"])
        args.corpus = args.corpus or str(d / "corpus.jsonl")
        args.examples = args.examples or str(d / "examples.jsonl")
        args.latent = args.latent or str(d / "latent.jsonl")
    paths = _need(args, "corpus", "examples")
    if args.axis is None:
        raise UsageError("--axis is required for ablate")
    latent = None
    if args.latent:
        paths.update(_need(args, "latent"))
        latent = LatentRelevance.load(paths["latent"])
    examples = C.load_examples(paths["examples"])
    train, test = _split(examples, "train"), _split(examples, args.split or "test")
    if latent is not None:
        check_latent_coverage(latent, [e.qid for e in train + test])
    values = [v.strip() for v in (args.values or "").split(",") if v.strip()]
    if not values and args.axis != "data_category":
        raise UsageError(f"--values is required for axis {args.axis}")
    out = _out_file(args)
    run_kw = dict(latent=latent, teacher=args.teacher, p_swap=args.p_swap,
                  direct=args.direct, score_noise=args.noise, ks=_ks(args))
    status = EXIT_OK
    try:
        rows = ablate(C.load_corpus(paths["corpus"]), train, test, distill_config(args),
                      args.axis, values, **run_kw)
    except SweepAborted as exc:
        rows, status = exc.rows, None
        cause = exc.__cause__
    sweep = {"axis": args.axis,
             "rows": [{"value": r.value, "metrics": r.metrics, "error": r.error} for r in rows]}
    out.write_text(json.dumps(sweep, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(_manifest_for(out), args, paths, {"sweep": out})
    print(sweep_table(args.axis, rows))
    if status is None:
        raise cause
    return status


HANDLERS = {"synth": cmd_synth, "index": cmd_index, "retrieve": cmd_retrieve,
            "teach": cmd_teach, "train-ranker": cmd_train_ranker,
            "train-retriever": cmd_train_retriever, "direct": cmd_direct, "eval": cmd_eval,
            "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except (UsageError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING if isinstance(exc, FileNotFoundError) else (
            EXIT_FORMAT if isinstance(exc, ParseError) else EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return HANDLERS[args.command](args)
    except Exception as exc:  # mapped to a categorized exit status below
        code, kind = _classify(exc)
        if code == EXIT_OTHER and not isinstance(exc, (InterDistillError, ValueError, OSError)):
            raise
        print(f"{kind} error: {exc}", file=sys.stderr)
        return code


def _classify(exc: Exception) -> tuple[int, str]:
    if isinstance(exc, UsageError):
        return EXIT_USAGE, "usage"
    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING, "missing input"
    if isinstance(exc, (ParseError, CheckpointError, UnparseableResponseError)):
        return EXIT_FORMAT, "format"
    if isinstance(exc, IntegrityError):
        return EXIT_INTEGRITY, "integrity"
    if isinstance(exc, TeacherError):
        return EXIT_TEACHER, "teacher"
    return EXIT_OTHER, "error"


if __name__ == "__main__":
    sys.exit(main())
