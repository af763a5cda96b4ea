"""Command-line pipeline: data → vocab → teacher → logits → student → evaluation.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric divergence.  Every run writes a JSON manifest (command, resolved
configuration, seed, sha256 of inputs and outputs) next to its output.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from ._kernels import BACKEND
from .data import (
    SPLITS, SyntheticSpec, Vocab, generate_synthetic, load_dataset, load_splits, tensorize, write_splits,
)
from .errors import ConfigurationError, DataError, KdrankError
from .evaluation import (
    CandidateIndex, benchmark_latency, build_candidate_index, evaluate_model, metrics_report, paired_ttest,
)
from .experiments import Corpus, bundled_config, bundled_spec
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .training import TrainConfig, cache_teacher_logits, load_records, save_records, train

log = logging.getLogger("kdrank")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 0, 1, 2, 3

_argv: list[str] = []


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------------------
# manifests
# ----------------------------------------------------------------------------


def sha256_path(path) -> str:
    """Digest of a file, or of every file under a directory (sorted by relative path)."""
    path = Path(path)
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for f in files:
        if path.is_dir():
            h.update(str(f.relative_to(path)).encode())
        with f.open("rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command: str, config: dict, seed, inputs: dict, outputs: dict) -> None:
    manifest = {
        "command": command,
        "argv": list(_argv),
        "version": __version__,
        "backend": BACKEND,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seed": seed,
        "config": config,
        "inputs": {k: {"path": str(v), "sha256": sha256_path(v)} for k, v in inputs.items() if v is not None},
        "outputs": {k: {"path": str(v), "sha256": sha256_path(v)} for k, v in outputs.items() if v is not None},
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("manifest written to %s", path)


def _manifest_path(args, out, default_name: str) -> Path:
    if args.manifest:
        return Path(args.manifest)
    if out is None:
        return Path(default_name)
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    spec = SyntheticSpec.from_file(args.spec) if args.spec else bundled_spec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    write_splits(generate_synthetic(spec), args.out)
    write_manifest(_manifest_path(args, args.out, "gen-data.manifest.json"), "gen-data", asdict(spec),
                   spec.seed, {"spec": args.spec}, {"data": args.out})


def cmd_build_vocab(args) -> None:
    train_path = Path(args.data) / "train.jsonl"
    if not train_path.exists():
        raise DataError(f"missing split file {train_path}")
    vocab = Vocab.from_examples(load_dataset(train_path), max_size=args.max_size)
    vocab.save(args.out)
    log.info("vocabulary of %d tokens (%d reserved) written to %s", len(vocab), len(vocab) - len(vocab.tokens), args.out)
    write_manifest(_manifest_path(args, args.out, "vocab.manifest.json"), "build-vocab",
                   {"max_size": args.max_size}, None, {"train": train_path}, {"vocab": args.out})


def _corpus(args) -> Corpus:
    splits = load_splits(args.data)
    vocab = Vocab.load(args.vocab)
    return Corpus.from_splits(splits, vocab)


def _load_recipe(path, default: str) -> dict:
    raw = json.loads(Path(path).read_text()) if path else bundled_config(default)
    if set(raw) - {"model", "train"}:
        raise ConfigurationError(f"config file keys must be 'model' and 'train', got {sorted(raw)}")
    return {"model": dict(raw.get("model", {})), "train": dict(raw.get("train", {}))}


def _apply_overrides(train_cfg: dict, args) -> dict:
    for key in ("epochs", "lr", "batch_size"):
        value = getattr(args, key, None)
        if value is not None:
            train_cfg[key] = value
    return train_cfg


def _fit_and_save(args, command, model_cfg: ModelConfig, train_cfg: TrainConfig, corpus: Corpus,
                  records=None, inputs=None) -> None:
    model = build_model(model_cfg, corpus.vocab, corpus.ctx_max, corpus.resp_max, seed=args.seed)
    model, history = train(model, corpus.sets["train"], train_cfg, records, corpus.sets["valid"])
    valid = evaluate_model(model, corpus.sets["valid"])
    metrics = {"valid": {"recall_at_1": valid["recall_at_1"], "mrr": valid["mrr"], "n": valid["n"]},
               "history": history.to_dict()}
    save_checkpoint(args.out, model, asdict(train_cfg), args.seed, metrics)
    shapes = {k: list(v.shape) for k, v in model.parameters().items() if k.startswith("head.")}
    _print({"valid": metrics_report(valid), "best_epoch": history.best_epoch, "head_shapes": shapes})
    config = {"model": asdict(model_cfg), "train": asdict(train_cfg), "head_shapes": shapes}
    write_manifest(_manifest_path(args, args.out, f"{command}.manifest.json"), command, config, args.seed,
                   {"data": args.data, "vocab": args.vocab, **(inputs or {}), "config": args.config},
                   {"checkpoint": args.out})


def cmd_train_teacher(args) -> None:
    recipe = _load_recipe(args.config, "teacher")
    model = recipe["model"]
    if args.head:
        model["head"] = args.head
    if args.ablate:
        if model.get("head", "enhanced_cross") != "enhanced_cross":
            raise ConfigurationError("--ablate only applies to the enhanced_cross head")
        model["use_submult" if args.ablate == "submult" else "use_cross_attention"] = False
    train_cfg = _apply_overrides(recipe["train"], args)
    train_cfg.update(seed=args.seed, alpha=1.0)
    if model.get("head") == "plain_cross":
        train_cfg["negatives_mode"] = "explicit"
    _fit_and_save(args, "train-teacher", ModelConfig.from_dict(model), TrainConfig.from_dict(train_cfg), _corpus(args))


def cmd_cache_logits(args) -> None:
    teacher, meta = load_checkpoint(args.teacher)
    data_path = Path(args.data)
    train_path = data_path / "train.jsonl" if data_path.is_dir() else data_path
    # tokenization limits come from the teacher checkpoint
    data = tensorize(load_dataset(train_path), teacher.vocab, teacher.ctx_max, teacher.resp_max)
    records = cache_teacher_logits(teacher, data, workers=args.workers)
    save_records(records, args.out)
    log.info("cached %d teacher records to %s", len(records), args.out)
    write_manifest(_manifest_path(args, args.out, "cache-logits.manifest.json"), "cache-logits",
                   {"workers": args.workers, "teacher_architecture": meta["architecture"]}, None,
                   {"teacher": args.teacher, "data": train_path}, {"records": args.out})


def cmd_distill(args) -> None:
    default = "student_bilstm" if args.student_encoder == "bilstm" else "student"
    recipe = _load_recipe(args.config, default)
    model = recipe["model"]
    model["encoder"] = args.student_encoder
    model["head"] = "bi"
    model.pop("bi_aggregation", None)
    train_cfg = _apply_overrides(recipe["train"], args)
    alpha = args.alpha
    if args.teacher_logits is None:
        if alpha is not None and alpha < 1.0:
            raise ConfigurationError(f"--alpha {alpha} needs --teacher-logits (omit both for the no-KD baseline)")
        alpha = 1.0
    elif alpha is None:
        alpha = train_cfg.get("alpha", 0.5)
    train_cfg.update(seed=args.seed, alpha=alpha)
    records = load_records(args.teacher_logits) if args.teacher_logits else None
    _fit_and_save(args, "distill", ModelConfig.from_dict(model), TrainConfig.from_dict(train_cfg), _corpus(args),
                  records, {"teacher_logits": args.teacher_logits})


def _eval_split(model, data_dir, split):
    path = Path(data_dir) / f"{split}.jsonl" if Path(data_dir).is_dir() else Path(data_dir)
    examples = load_dataset(path)
    return path, evaluate_model(model, tensorize(examples, model.vocab, model.ctx_max, model.resp_max))


def cmd_evaluate(args) -> None:
    model, meta = load_checkpoint(args.model)
    path, metrics = _eval_split(model, args.data, args.split)
    comparisons = {}
    inputs = {"model": args.model, "data": path}
    if args.compare:
        other, _ = load_checkpoint(args.compare)
        _, other_metrics = _eval_split(other, args.data, args.split)
        a, b = metrics["reciprocal_ranks"], other_metrics["reciprocal_ranks"]
        comparisons = {
            "R@1": paired_ttest((a == 1.0).astype(float), (b == 1.0).astype(float)),
            "MRR": paired_ttest(a, b),
        }
        inputs["compare"] = args.compare
    report = metrics_report(metrics, comparisons)
    report["split"] = args.split
    if args.compare:
        report["compare"] = metrics_report(other_metrics)
    stored = meta.get("metrics", {}).get(args.split)
    if stored is not None:
        report["matches_stored"] = stored["recall_at_1"] == metrics["recall_at_1"] and stored["mrr"] == metrics["mrr"]
    _print(report)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_manifest(_manifest_path(args, args.out, "evaluate.manifest.json"), "evaluate", {"split": args.split},
                   None, inputs, {"report": args.out})


def _read_responses(path) -> list[tuple[str, str]]:
    """``{"id", "text"}`` lines, or dataset lines whose candidates are pooled as ``<id>#<j>``."""
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed response line ({exc})") from exc
            if isinstance(obj, dict) and "text" in obj and "id" in obj:
                out.append((str(obj["id"]), str(obj["text"])))
            elif isinstance(obj, dict) and "candidates" in obj and "id" in obj:
                out.extend((f"{obj['id']}#{j}", str(t)) for j, t in enumerate(obj["candidates"]))
            else:
                raise DataError(f"{path}:{lineno}: expected an id/text or id/candidates object")
    return out


def cmd_index(args) -> None:
    model, _ = load_checkpoint(args.model)
    responses = _read_responses(args.responses)
    index = build_candidate_index(model, responses)
    index.save(args.out)
    _print({"count": len(index), "d": index.d, "checksum": index.checksum})
    write_manifest(_manifest_path(args, args.out, "index.manifest.json"), "index", {}, None,
                   {"model": args.model, "responses": args.responses}, {"index": args.out})


def cmd_bench(args) -> None:
    model, _ = load_checkpoint(args.model)
    path = Path(args.data) / "test.jsonl" if Path(args.data).is_dir() else Path(args.data)
    examples = load_dataset(path)
    try:
        counts = [int(k) for k in args.candidates.split(",") if k.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"--candidates must be comma-separated integers, got {args.candidates!r}") from exc
    index = CandidateIndex.load(args.index) if args.index else None
    report = benchmark_latency(model, examples, counts, n_samples=args.samples, warmup=args.warmup, index=index)
    out = report.to_dict()
    if len(counts) >= 2:
        out["ratio"] = report.ratio(model.head.kind, max(counts), min(counts))
    _print(out)
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    write_manifest(_manifest_path(args, args.out, "bench.manifest.json"), "bench",
                   {"candidates": counts, "samples": args.samples, "warmup": args.warmup}, args.seed,
                   {"model": args.model, "data": path, "index": args.index}, {"report": args.out})


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kdrank", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"kdrank {__version__} ({BACKEND} kernels)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True):
        p.add_argument("--manifest", help="manifest path (default: next to the output)")
        if seed:
            p.add_argument("--seed", type=int, default=None if p.prog.endswith("gen-data") else 0)

    p = sub.add_parser("gen-data", help="write synthetic train/valid/test splits")
    p.add_argument("--spec", help="SyntheticSpec JSON (default: bundled tiny spec)")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-vocab", help="frequency vocabulary from the training split")
    p.add_argument("--data", required=True)
    p.add_argument("--max-size", type=int, default=None, help="cap on non-reserved tokens")
    p.add_argument("--out", required=True)
    common(p, seed=False)
    p.set_defaults(func=cmd_build_vocab)

    def trainer(p):
        p.add_argument("--data", required=True, help="directory holding train/valid/test.jsonl")
        p.add_argument("--vocab", required=True)
        p.add_argument("--config", help="JSON with 'model' and 'train' sections")
        p.add_argument("--out", required=True)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        common(p)

    p = sub.add_parser("train-teacher", help="train a cross-encoder")
    trainer(p)
    p.add_argument("--head", choices=["enhanced_cross", "plain_cross"])
    p.add_argument("--ablate", choices=["submult", "attention"])
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("cache-logits", help="store teacher logits over the training candidates")
    p.add_argument("--teacher", required=True)
    p.add_argument("--data", required=True, help="data directory or a single JSONL file")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    common(p, seed=False)
    p.set_defaults(func=cmd_cache_logits)

    p = sub.add_parser("distill", help="train a bi-encoder student, with or without teacher logits")
    trainer(p)
    p.add_argument("--student", dest="student_encoder", choices=["bi", "bilstm", "transformer"], default="bi",
                   help="'bi' is the transformer bi-encoder")
    p.add_argument("--alpha", type=float)
    p.add_argument("--teacher-logits")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("evaluate", help="R@1/MRR (x100) with optional paired t-test")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--compare")
    p.add_argument("--out")
    common(p, seed=False)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("index", help="pre-encode responses for a bi-encoder")
    p.add_argument("--model", required=True)
    p.add_argument("--responses", required=True)
    p.add_argument("--out", required=True)
    common(p, seed=False)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("bench", help="per-sample latency for several candidate counts")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--candidates", default="10,100")
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--index")
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    global _argv
    _argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(_argv)
    if getattr(args, "student_encoder", None) in ("bi", "transformer"):
        args.student_encoder = "transformer"
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except KdrankError as exc:
        print(f"kdrank {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"kdrank {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except json.JSONDecodeError as exc:
        print(f"kdrank {args.command}: invalid JSON ({exc})", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
