"""Command-line entry point: ``san {train,predict,eval,oracle,ablate,seeds,gen}``.

Run configs are JSON objects with flat dotted keys (``"train.lr": 0.002``).
Unknown keys are rejected, ``--set key=value`` overrides file values, and the
fully resolved config is written next to every run's outputs.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import tensor as T
from .answer import VARIANTS
from .data import ParseError, SyntheticConfig, generate_synthetic, load_corpus, save_annotated_jsonl
from .evaluate import (evaluate, kbest_oracle, read_dump, write_dump, write_oracle_csv, write_report)
from .model import ModelConfig, SANModel
from .train import (Corpus, TrainConfig, predict, run_ablation, seed_robustness, synthetic_corpus, train)

logger = logging.getLogger("san")

UNSUPPORTED_VARIANTS = {"reasonet": "dynamic-step termination (reasonet) is not supported; "
                                    f"choose one of {', '.join(VARIANTS)}"}

# Every key a run config may contain, with its default.  Values equal the
# published settings where one exists (d=128, batch 32, lr 0.002, dropout 0.4, T=5).
DEFAULTS: dict[str, object] = {
    "seed": 0,
    "output_dir": "runs/default",
    "workers": 1,
    "data.train": None,
    "data.dev": None,
    "data.embeddings": None,
    "data.synthetic": False,
    "data.synthetic.num_train": 2000,
    "data.synthetic.num_dev": 500,
    "data.synthetic.seed": 0,
    "data.synthetic.vocab_size": 200,
    "train.lr": 0.002,
    "train.lr_halving_epochs": 10,
    "train.batch_size": 32,
    "train.epochs": 50,
    "train.grad_clip": 5.0,
    "train.objective": "avg_nll",
    "train.independent_masks": False,
    "train.eval_batch_size": 64,
    "model.d": 128,
    "model.T": 5,
    "model.answer_variant": "san",
    "model.hidden_dropout": 0.4,
    "model.prediction_dropout": 0.4,
    "model.maxout_k": 2,
    "model.max_span_len": 15,
    "model.word_dim": 300,
    "model.pos_dim": 9,
    "model.ner_dim": 8,
    "model.align_dim": 280,
    "model.ffn_hidden": None,
    "model.attn_dim": None,
}

_TRAIN_KEYS = {"train.lr": "lr", "train.lr_halving_epochs": "lr_halving_epochs",
               "train.batch_size": "batch_size", "train.epochs": "epochs",
               "train.grad_clip": "grad_clip", "train.objective": "objective",
               "train.independent_masks": "independent_masks",
               "train.eval_batch_size": "eval_batch_size", "model.T": "T",
               "model.answer_variant": "answer_variant", "model.hidden_dropout": "hidden_dropout",
               "model.prediction_dropout": "prediction_dropout", "seed": "seed", "workers": "workers"}
_MODEL_KEYS = ("d", "maxout_k", "max_span_len", "word_dim", "pos_dim", "ner_dim", "align_dim",
               "ffn_hidden", "attn_dim")


class UsageError(Exception):
    """Bad flags, config keys or paths; maps to exit code 2."""


# --------------------------------------------------------------------------
# config resolution


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if value is None:
        return None
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise UsageError(f"config key {key!r} expects a boolean, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool) or key in ("model.ffn_hidden", "model.attn_dim"):
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise UsageError(f"config key {key!r} expects an integer, got {value!r}") from None
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise UsageError(f"config key {key!r} expects a number, got {value!r}") from None
    return str(value)


def resolve_config(path=None, overrides=()) -> dict:
    """Defaults <- config file <- ``key=value`` overrides, with validation."""
    cfg = dict(DEFAULTS)
    layers = []
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(raw, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        layers.append(raw)
    flat = {}
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} must look like key=value")
        key, value = item.split("=", 1)
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass
        flat[key.strip()] = value
    layers.append(flat)
    for layer in layers:
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise UsageError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value)
    variant = cfg["model.answer_variant"]
    if variant in UNSUPPORTED_VARIANTS:
        raise UsageError(UNSUPPORTED_VARIANTS[variant])
    try:
        train_config(cfg)
        model_config(cfg)
    except ValueError as e:
        raise UsageError(f"invalid config: {e}") from None
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**{field: cfg[key] for key, field in _TRAIN_KEYS.items()})


def model_config(cfg: dict) -> ModelConfig:
    mc = ModelConfig(**{k: cfg[f"model.{k}"] for k in _MODEL_KEYS})
    if mc.d < 1 or mc.maxout_k < 2 or mc.max_span_len < 1:
        raise ValueError("model.d and model.max_span_len must be positive, model.maxout_k at least 2")
    return mc


def load_run_corpus(cfg: dict) -> Corpus:
    if cfg["data.synthetic"]:
        return synthetic_corpus(cfg["data.synthetic.num_train"], cfg["data.synthetic.num_dev"],
                                cfg["data.synthetic.seed"], vocab_size=cfg["data.synthetic.vocab_size"])
    if not cfg["data.train"]:
        raise UsageError("no training data: set data.train (and data.dev) or data.synthetic=true")
    train_set = _load_examples(cfg["data.train"])
    dev_set = _load_examples(cfg["data.dev"]) if cfg["data.dev"] else []
    return Corpus(train_set, dev_set)


def _load_examples(path):
    if not Path(path).is_file():
        raise UsageError(f"data file not found: {path}")
    return load_corpus(path)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.set)
    corpus = load_run_corpus(cfg)
    tc, mc = train_config(cfg), model_config(cfg)
    if cfg["data.embeddings"] and not Path(cfg["data.embeddings"]).is_file():
        raise UsageError(f"embeddings file not found: {cfg['data.embeddings']}")
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg)
    result = train(tc, corpus, mc, embeddings_path=cfg["data.embeddings"])
    result.curve.write(out / "curve.csv")
    result.model.save(out / "checkpoint", {"train": {k: cfg[k] for k in _TRAIN_KEYS}})
    summary = {"best_epoch": result.best_epoch, "best_em": result.best_em,
               "best_f1": result.best_f1, "diverged": result.diverged}
    _write_json(out / "metrics.json", summary)
    print(json.dumps(summary, sort_keys=True))
    print(f"best dev EM {result.best_em:.3f} F1 {result.best_f1:.3f} at epoch {result.best_epoch}")
    return 1 if result.diverged else 0


def _load_checkpoint(stem):
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    if not stem.with_suffix(".json").is_file():
        raise UsageError(f"checkpoint not found: {stem}.json")
    return SANModel.load(stem)


def cmd_predict(args) -> int:
    if args.test_T is not None and args.test_T < 1:
        raise UsageError("--test-T must be at least 1")
    model, meta = _load_checkpoint(args.checkpoint)
    examples = _load_examples(args.data)
    saved = meta.get("train", {})
    cfg = resolve_config(None, [f"{k}={json.dumps(v)}" for k, v in saved.items()])
    tc = train_config(cfg)
    if args.test_T is not None and args.test_T > 1 and not model.answer.multi_step:
        raise UsageError("this checkpoint has a single-step answer module; --test-T must be 1")
    pred = predict(model, examples, tc, steps=args.test_T, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "predictions.json", pred.answers)
    write_dump(pred.records, out / "dump.jsonl")
    report = evaluate(pred.answers, examples)
    print(json.dumps({"count": report.count, "em": report.em, "f1": report.f1}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    examples = _load_examples(args.data)
    try:
        preds = json.loads(Path(args.predictions).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"predictions file not found: {args.predictions}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"predictions file is not valid JSON: {e}") from None
    if not isinstance(preds, dict):
        raise UsageError("predictions file must map example ids to answer strings")
    report = evaluate({str(k): str(v) for k, v in preds.items()}, examples)
    print(json.dumps(report.to_json(), sort_keys=True))
    print(f"EM {report.em:.1f} F1 {report.f1:.1f} ({report.count} questions, {report.skipped} missing)")
    for q, (em, f1, n) in report.by_qtype.items():
        print(f"  {q:<8} EM {em:6.2f} F1 {f1:6.2f} n={n}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_report(report, out / "metrics.json", out / "qtype.csv")
    return 0


def cmd_oracle(args) -> int:
    if args.kmax < 1:
        raise UsageError("--kmax must be at least 1")
    examples = _load_examples(args.data)
    if not Path(args.dump).is_file():
        raise UsageError(f"dump file not found: {args.dump}")
    try:
        dump = read_dump(args.dump)
    except ValueError as e:
        raise UsageError(str(e)) from None
    known = {ex.id for ex in examples}
    missing = [rec["id"] for rec in dump if str(rec["id"]) not in known]
    if missing:
        raise UsageError(f"dump ids not in the data file, e.g. {missing[0]!r}")
    curve = kbest_oracle(dump, examples, args.kmax, args.max_span_len)
    print(json.dumps({str(k): {"em": em, "f1": f1} for k, (em, f1) in curve.items()}))
    for k, (em, f1) in curve.items():
        print(f"K={k}: EM {em:.2f} F1 {f1:.2f}")
    csv_path = Path(args.out)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    write_oracle_csv(curve, csv_path)
    return 0


def _parse_seeds(text: str) -> list[int]:
    seeds = []
    try:
        for part in text.split(","):
            if "-" in part.strip()[1:]:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            elif part.strip():
                seeds.append(int(part))
    except ValueError:
        raise UsageError(f"cannot parse seed list {text!r}; use e.g. 1,2,3 or 1-5") from None
    if not seeds:
        raise UsageError("empty seed list")
    return seeds


def cmd_ablate(args) -> int:
    cfg = resolve_config(args.config, args.set)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v in UNSUPPORTED_VARIANTS:
            raise UsageError(UNSUPPORTED_VARIANTS[v])
        if v not in VARIANTS:
            raise UsageError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    seeds = _parse_seeds(args.seeds)
    corpus = load_run_corpus(cfg)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", {**cfg, "ablate.variants": variants, "ablate.seeds": seeds})
    report = run_ablation(train_config(cfg), corpus, variants, seeds, model_config(cfg))
    print(json.dumps(report.to_json(), sort_keys=True))
    print(report.table())
    _write_json(out / "ablation.json", report.to_json())
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed", "em", "f1"])
        for v, stats in report.variants.items():
            for s, em, f1 in zip(stats.seeds, stats.em, stats.f1):
                w.writerow([v, s, f"{em:.6f}", f"{f1:.6f}"])
    return 0


def cmd_seeds(args) -> int:
    cfg = resolve_config(args.config, args.set)
    seeds = _parse_seeds(args.seeds)
    if len(seeds) < 2:
        raise UsageError("seed robustness needs at least two seeds")
    corpus = load_run_corpus(cfg)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", {**cfg, "seeds.seeds": seeds})
    stats = seed_robustness(train_config(cfg), corpus, seeds, model_config(cfg))
    print(json.dumps(stats.to_json(), sort_keys=True))
    print(stats.table())
    _write_json(out / "seeds.json", stats.to_json())
    with open(out / "seeds.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "em", "f1"])
        for s, em, f1 in zip(stats.seeds, stats.em, stats.f1):
            w.writerow([s, f"{em:.6f}", f"{f1:.6f}"])
    return 0


def cmd_gen(args) -> int:
    if args.num_examples < 1:
        raise UsageError("--num-examples must be positive")
    cfg = SyntheticConfig(num_examples=args.num_examples, vocab_size=args.vocab_size, seed=args.seed)
    examples = generate_synthetic(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_annotated_jsonl(examples, out)
    print(json.dumps({"examples": len(examples), "path": str(out), "seed": args.seed}))
    return 0


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="san", description="Stochastic answer network for span extraction.")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--config", help="JSON run config with flat dotted keys")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    sp = sub.add_parser("train", help="train a model and write checkpoint, curve and config")
    run_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="write answers and distribution dumps for a data file")
    sp.add_argument("--checkpoint", required=True, help="checkpoint stem (or its .json file)")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--test-T", dest="test_T", type=int, help="override the number of reasoning steps")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("eval", help="score an {id: answer} JSON file")
    sp.add_argument("--data", required=True)
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--out", help="directory for metrics.json and qtype.csv")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("oracle", help="K-best oracle curve from a distribution dump")
    sp.add_argument("--data", required=True)
    sp.add_argument("--dump", required=True)
    sp.add_argument("--kmax", type=int, default=4)
    sp.add_argument("--max-span-len", type=int, default=15)
    sp.add_argument("--out", default="oracle.csv", help="CSV path")
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("ablate", help="compare answer-module variants across seeds")
    run_flags(sp)
    sp.add_argument("--variants", default=",".join(VARIANTS))
    sp.add_argument("--seeds", default="1")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("seeds", help="seed-robustness table")
    run_flags(sp)
    sp.add_argument("--seeds", default="1-10")
    sp.set_defaults(func=cmd_seeds)

    sp = sub.add_parser("gen", help="write a synthetic corpus as annotated JSONL")
    sp.add_argument("--out", required=True)
    sp.add_argument("--num-examples", type=int, default=2500)
    sp.add_argument("--vocab-size", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gen)
    return p


def _setup_logging() -> None:
    level = os.environ.get("SAN_LOG_LEVEL", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"SAN_LOG_LEVEL must be one of {', '.join(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        _setup_logging()
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ParseError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (T.NumericError, T.DimensionError, T.ContractError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
