"""Command-line interface.

Subcommands: generate-data, train-tokenizer, train, evaluate, robustness,
report. Flags mirror config keys (snake_case -> --kebab-case). Exit codes:
0 success, 2 configuration error, 3 data error, 4 a requested score
threshold was not met.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_THRESHOLD = 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _load_profile(args) -> "ExperimentProfile":
    from .harness import PROFILES, ExperimentProfile
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as f:
                return ExperimentProfile.from_dict(json.load(f))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {args.config}") from exc
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"bad config file {args.config}: {exc}") from exc
    if args.profile not in PROFILES:
        raise ConfigError(f"unknown profile {args.profile!r}; choices: {sorted(PROFILES)}")
    return PROFILES[args.profile]()


def _apply_overrides(profile, args):
    training = profile.training
    for key in ("steps", "batch_size", "lr", "warmup_steps", "text_dropout_p",
                "mix_p", "seed"):
        flag = getattr(args, key, None)
        if flag is not None:
            training = replace(training, **{key: flag})
    return replace(profile, training=training)


def cmd_generate_data(args) -> int:
    from .harness import generate_dataset
    profile = _apply_overrides(_load_profile(args), args)
    if args.n_clips:
        profile = replace(profile, corpus_size=args.n_clips)
    if args.split_sizes:
        sizes = tuple(int(x) for x in args.split_sizes.split(","))
        if len(sizes) != 3:
            raise ConfigError("--split-sizes wants three comma-separated integers")
        profile = replace(profile, split_sizes=sizes)
    generate_dataset(args.out, profile, args.seed)
    print(f"wrote corpus + split manifests under {args.out}")
    return EXIT_OK


def cmd_train_tokenizer(args) -> int:
    from .harness import train_tokenizer
    if not os.path.exists(os.path.join(args.data, "train.jsonl")):
        raise DataError(f"no train.jsonl under {args.data}; run generate-data first")
    vocab = train_tokenizer(args.data, args.out, args.vocab_size)
    print(f"trained vocabulary of {len(vocab)} tokens -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .harness import ScenarioConfig, load_data_pack, train_one
    profile = _apply_overrides(_load_profile(args), args)
    try:
        pack = load_data_pack(args.data, args.vocab)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    scenario = ScenarioConfig(split=args.split, train_captions=args.captions,
                              n_seeds=1)
    result = train_one(pack, profile, scenario, args.seed, args.out, args.master_seed)
    print(f"best validation PSDS-1*: {result.best_val:.4f}")
    print(f"checkpoints: {result.best_path} (best), {result.final_path} (final)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .harness import _presets, evaluate_model, load_data_pack
    from .model import load_model
    try:
        pack = load_data_pack(args.data, args.vocab)
        model = load_model(args.model)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    presets = _presets(("psds1_star", "psds2_star"))
    result = evaluate_model(model, pack, args.eval_text, presets, text_seed=args.seed)
    scores = result["scores"]
    payload = {k: float(v) for k, v in scores.items()}
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=1, sort_keys=True)
    print(json.dumps(payload, indent=1, sort_keys=True))
    if args.min_psds1 is not None and scores["psds1_star"] < args.min_psds1:
        print(f"psds1_star {scores['psds1_star']:.4f} below required {args.min_psds1}",
              file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


def cmd_robustness(args) -> int:
    from .harness import load_data_pack, tag_robustness, leave_one_out
    from .model import load_model
    try:
        pack = load_data_pack(args.data, args.vocab)
        model = load_model(args.model)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    probe = tag_robustness(model, pack, range(args.max_incorrect + 1),
                           trials=args.trials, seed=args.seed)
    out = {"tag_injection": {"n": probe["n"], "mean": probe["mean"]}}
    if args.leave_one_out:
        loo = leave_one_out(model, pack, seed=args.seed)
        out["leave_one_out"] = {"mean_d_precision": loo["mean_d_precision"],
                                "mean_d_recall": loo["mean_d_recall"]}
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(out, f, indent=1, sort_keys=True)
    print(json.dumps(out, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    from .reporting import Report, emit_report
    try:
        with open(args.summary, encoding="utf-8") as f:
            report = Report.from_json(f.read())
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    paths = emit_report(report, args.out)
    print("\n".join(paths))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capsed",
                                     description="text-guided sound event detection")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--profile", default="desk")
        p.add_argument("--config", default=None, help="JSON experiment profile")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("generate-data", help="synthesize the annotated corpus")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-clips", type=int, default=None)
    p.add_argument("--split-sizes", default=None, help="train,val,test")
    p.set_defaults(fn=cmd_generate_data)

    p = sub.add_parser("train-tokenizer", help="fit the BPE vocabulary on training captions")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-size", type=int, default=6000)
    p.set_defaults(fn=cmd_train_tokenizer)

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="100/0", choices=("100/0", "50/50"))
    p.add_argument("--captions", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--master-seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--warmup-steps", type=int, default=None)
    p.add_argument("--text-dropout-p", type=float, default=None)
    p.add_argument("--mix-p", type=float, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--eval-text", default="none",
                   choices=("none", "tags", "short", "verbose"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--min-psds1", type=float, default=None,
                   help="exit 4 when PSDS-1* falls below this")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("robustness", help="tag-injection / leave-one-out probes")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--max-incorrect", type=int, default=5)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--leave-one-out", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_robustness)

    p = sub.add_parser("report", help="emit tables and figures from a summary")
    p.add_argument("--summary", required=True, help="summary.json from a run")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
