"""Command-line entry point: prepare-data, train, generate, evaluate,
grad-check.  A flat JSON config file supplies defaults; flags override."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluation as E
from . import tensor as T
from .gradcheck import run_all
from .model import (BaselineBundle, ModelBundle, ModelConfig,
                    bundle_from_checkpoint, load_checkpoint, save_checkpoint)
from .training import (NumericError, TrainConfig, train_baseline, train_loop,
                       train_probe)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

CONFIG_DEFAULTS = {
    "train_path": None,
    "dev_path": None,
    "test_path": None,
    "vocab_path": "vocab.txt",
    "out_dir": "run",
    "dim": 300,
    "fusion": "mosm",
    "n_candidates": 4,
    "num_layers": 2,
    "min_count": 3,
    "max_len": 30,
    "lr": 0.001,
    "beta1": 0.0,
    "beta2": 0.999,
    "eps": 1e-8,
    "clip_norm": 1.0,
    "epochs": 30,
    "phase_prob": 0.5,
    "aux_n": 1,
    "w_rec": 1.0,
    "w_cls": 1.0,
    "w_adv": 1.0,
    "w_aux": 1.0,
    "batch_size": 32,
    "seed": 0,
    "eval_samples": 200,
    "lr_decay": 1.0,
    "lr_decay_epoch": 0,
    "log_wall_time": True,
}


class DataError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(EXIT_USAGE)


def load_config(path) -> dict:
    cfg = dict(CONFIG_DEFAULTS)
    if path:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise DataError(f"config file {path}: {e}")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    return cfg


def _apply_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "no_classifier", False):
        cfg["w_cls"] = 0.0
    if getattr(args, "no_aux_loss", False):
        cfg["w_aux"] = 0.0
    return cfg


def _train_config(cfg: dict) -> TrainConfig:
    names = {f.name for f in dc_fields(TrainConfig)}
    try:
        return TrainConfig(**{k: v for k, v in cfg.items() if k in names})
    except ValueError as e:
        raise DataError(f"invalid training config: {e}")


def _load_examples(path) -> tuple[list, D.ParseStats]:
    if not path:
        raise DataError("no data path given (config key train_path/test_path or flag)")
    if not Path(path).exists():
        raise DataError(f"data file not found: {path}")
    stats = D.ParseStats()
    examples = list(D.parse_snli_jsonl(path, stats))
    if not examples:
        raise DataError(f"{path}: no usable examples")
    return examples, stats


def cmd_prepare_data(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    examples, stats = _load_examples(cfg["train_path"])
    vocab = D.build_vocab(examples, min_count=cfg["min_count"])
    vocab.save(cfg["vocab_path"])
    print(f"examples: {stats.parsed}")
    print(f"skipped unlabeled: {stats.skipped_unlabeled}")
    print(f"parse errors: {len(stats.errors)}")
    for label in D.Label:
        print(f"label {label.name.lower()}: {stats.label_counts[label]}")
    print(f"vocab size: {len(vocab)} (min_count={cfg['min_count']})")
    print(f"wrote {cfg['vocab_path']}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    examples, _ = _load_examples(cfg["train_path"])
    vocab_path = Path(cfg["vocab_path"])
    if vocab_path.exists():
        vocab = D.Vocab.load(vocab_path)
    else:
        vocab = D.build_vocab(examples, min_count=cfg["min_count"])
    tcfg = _train_config(cfg)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    mcfg = ModelConfig(vocab_size=len(vocab), dim=cfg["dim"],
                       fusion=cfg["fusion"], n_candidates=cfg["n_candidates"],
                       num_layers=cfg["num_layers"], max_len=cfg["max_len"],
                       kind="baseline" if args.baseline else "caae")
    if args.baseline:
        bundle = BaselineBundle(mcfg, seed=tcfg.seed)
        train_baseline(bundle, examples, vocab, tcfg, out_dir)
    elif args.probe:
        bundle = ModelBundle(mcfg, seed=tcfg.seed)
        accs = train_probe(bundle, examples, vocab, tcfg)
        meta = {"model": mcfg.__dict__, "train": cfg, "probe": True,
                "train_accuracy": accs[-1]}
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "checkpoints" / "probe.ckpt",
                        bundle.named_params(), vocab, meta)
        print(f"probe train accuracy: {accs[-1]:.4f}")
    elif args.resume:
        arrays, ck_vocab, meta = load_checkpoint(args.resume)
        if ck_vocab.id_to_token != vocab.id_to_token:
            raise DataError("vocabulary mismatch between checkpoint and data")
        bundle = ModelBundle(ModelConfig(**meta["model"]), seed=tcfg.seed)
        from .model import restore_into
        restore_into(bundle.named_params(), arrays)
        train_loop(bundle, examples, vocab, tcfg, out_dir,
                   start_epoch=meta["epoch"] + 1, resume_arrays=arrays,
                   resume_meta=meta)
    else:
        bundle = ModelBundle(mcfg, seed=tcfg.seed)
        train_loop(bundle, examples, vocab, tcfg, out_dir)
    print(f"training complete; outputs in {out_dir}")
    return EXIT_OK


def cmd_generate(args) -> int:
    bundle, vocab, meta = bundle_from_checkpoint(args.checkpoint)
    if meta.get("model", {}).get("kind") == "baseline":
        raise DataError("generate requires a full-model checkpoint, not a baseline")
    label = D.Label.from_string(args.label)
    hypothesis = D.tokenize(args.hypothesis)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    samples = E.prior_generate(bundle, vocab, hypothesis, label, rng,
                               count=args.count)
    print(f"H: {' '.join(hypothesis)}")
    print(f"L: {label.name.capitalize()}")
    for i, s in enumerate(samples, start=1):
        print(f"S{i}: {' '.join(s)}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    bundle, vocab, _ = bundle_from_checkpoint(args.checkpoint)
    probe, probe_vocab, _ = bundle_from_checkpoint(args.probe_checkpoint)
    if vocab.id_to_token != probe_vocab.id_to_token:
        raise DataError("vocabulary mismatch between model and probe checkpoints")
    examples, _ = _load_examples(cfg["test_path"])
    examples = examples[: cfg["eval_samples"]]
    seed = cfg["seed"]

    report = E.probe_eval(probe, vocab,
                          E.make_prior_generator(bundle, vocab, seed), examples)
    rs, ss, used, failed = E.diversity_eval(bundle, vocab, examples, seed + 1)
    report.bleu_rs, report.bleu_ss = rs, ss
    report.generation_failures += failed
    report.real_pair_accuracy = E.probe_accuracy_on_pairs(
        probe, vocab, [(ex.premise, ex.hypothesis, ex.label.value) for ex in examples])
    report.random_control_accuracy = E.random_control(
        probe, vocab, examples, seed + 2, identity=args.identity_permutation)
    out = Path(args.out) if args.out else Path(cfg["out_dir"]) / "eval.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    if args.dump_latents:
        E.dump_latents(bundle, vocab, examples, args.dump_latents,
                       out.parent / "latents.jsonl", seed=seed + 3)
    print(report.to_json())
    return EXIT_OK


def cmd_grad_check(args) -> int:
    ok = run_all(seed=args.seed if args.seed is not None else 0)
    return EXIT_OK if ok else EXIT_NUMERIC


TABLE_HELP = """configuration rows and their flag combinations:
  Baseline (Mean)          train --baseline --fusion mean
  Baseline (MOSM)          train --baseline --fusion mosm
  Mean (N=1)               train --fusion mean --aux-n 1
  Mean (N=10)              train --fusion mean --aux-n 10
  MOSM (N=1)               train --fusion mosm --aux-n 1
  MOSM (N=10)              train --fusion mosm --aux-n 10
  MOSM (N=1, -classifier)  train --fusion mosm --aux-n 1 --no-classifier
  MOSM (-auxiliary loss)   train --fusion mosm --no-aux-loss
"""


def build_parser() -> _Parser:
    parser = _Parser(prog="caae", description="conditional adversarial "
                     "autoencoder for premise generation",
                     epilog=TABLE_HELP,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (flat keys)")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("prepare-data", help="build the vocabulary file")
    common(p)
    p.add_argument("--train-path", dest="train_path")
    p.add_argument("--vocab-path", dest="vocab_path")
    p.add_argument("--min-count", dest="min_count", type=int)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="train the model (or --baseline)")
    common(p)
    p.add_argument("--train-path", dest="train_path")
    p.add_argument("--vocab-path", dest="vocab_path")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--fusion", choices=["mean", "mosm"])
    p.add_argument("--aux-n", dest="aux_n", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--num-layers", dest="num_layers", type=int)
    p.add_argument("--no-classifier", action="store_true")
    p.add_argument("--no-aux-loss", action="store_true")
    p.add_argument("--baseline", action="store_true")
    p.add_argument("--probe", action="store_true",
                   help="train the probe classifier on real triplets only")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample premises for a hypothesis")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--hypothesis", required=True)
    p.add_argument("--label", required=True,
                   choices=[l.name.lower() for l in D.Label])
    p.add_argument("--count", type=int, default=2)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="probe accuracy, confusion, BLEU")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--probe-checkpoint", dest="probe_checkpoint", required=True)
    p.add_argument("--test-path", dest="test_path")
    p.add_argument("--eval-samples", dest="eval_samples", type=int)
    p.add_argument("--out")
    p.add_argument("--dump-latents", dest="dump_latents", type=int, default=0,
                   metavar="N", help="also write N prior z draws per triplet "
                   "with reconstruction NLLs to latents.jsonl")
    p.add_argument("--identity-permutation", action="store_true",
                   help="debug: identity instead of a random permutation")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    common(p)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
