"""Command-line interface: train, eval, verify, and the ablation grid.

Exit codes: 0 success, 1 input/config error, 2 numeric failure,
3 verification-suite failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import ConfigError, InputError, NumericError


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 by default; we reserve 2
        raise InputError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xmoe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--resume", default=None,
                         help="checkpoint to continue from")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--context-len", type=int, default=256)

    p_verify = sub.add_parser("verify", help="run verification suites")
    p_verify.add_argument("--suite", choices=["ratio", "grad", "cost", "all"],
                          default="all")
    p_verify.add_argument("--out", default="verify-out")
    p_verify.add_argument("--trials", type=int, default=1000)
    p_verify.add_argument("--seed", type=int, default=0)

    p_ablate = sub.add_parser("ablate", help="run the ablation grid")
    p_ablate.add_argument("--config", required=True)
    p_ablate.add_argument("--data", required=True)
    p_ablate.add_argument("--out", required=True)

    p_usage = sub.add_parser("usage-report",
                             help="summarize expert usage from a metrics CSV")
    p_usage.add_argument("--metrics", required=True)
    p_usage.add_argument("--out", default=None,
                         help="derived per-step gap CSV path")
    p_usage.add_argument("--compare", default=None,
                         help="second metrics CSV (run without group loss)")
    return parser


def cmd_train(args) -> int:
    from .train import load_corpus, parse_config_file, train_loop

    cfg, tcfg = parse_config_file(args.config)
    corpus = load_corpus(args.data, split_fraction=tcfg.split_fraction,
                         seed=cfg.seed)
    summary = train_loop(cfg, tcfg, corpus, args.out, resume_from=args.resume)
    with open(os.path.join(args.out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    print(f"training finished; metrics at {summary['metrics_path']}")
    if "val_ce" in summary:
        print(f"validation ce {summary['val_ce']:.4f}")
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate_checkpoint

    ce, ppl = evaluate_checkpoint(args.checkpoint, args.data, args.context_len)
    print(f"ce {ce:.6f} nats/token")
    print(f"perplexity {ppl:.4f}")
    return 0


def cmd_verify(args) -> int:
    from . import diagnostics
    from .model import ModelConfig

    os.makedirs(args.out, exist_ok=True)
    reports = []
    if args.suite in ("ratio", "all"):
        reports.append(diagnostics.verify_ratio_theorem(trials=args.trials,
                                                        seed=args.seed))
    if args.suite in ("grad", "all"):
        reports.append(diagnostics.verify_gradients(seed=args.seed))
    if args.suite in ("cost", "all"):
        cfg = ModelConfig(capacity_factor=None, seed=args.seed)
        reports.append(diagnostics.verify_inference_cost(cfg))
    ok = True
    for report in reports:
        text = report.to_text()
        print(text)
        print()
        path = os.path.join(args.out, f"{report.suite}.txt")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        ok = ok and report.passed
    return 0 if ok else 3


ABLATION_GRID = (
    ("baseline", {}),
    ("no-entropy-bias", {"gamma": 0.0}),
    ("no-group-loss", {"group_loss_enabled": False}),
    ("ffn-experts", {"expert_kind": "ffn", "gamma": 0.0}),
    ("mlstm-only", {"expert_kind": "mlstm-only", "gamma": 0.0}),
    ("slstm-only", {"expert_kind": "slstm-only", "gamma": 0.0}),
)


def cmd_ablate(args) -> int:
    from dataclasses import replace

    from .train import load_corpus, parse_config_file, train_loop

    cfg, tcfg = parse_config_file(args.config)
    corpus = load_corpus(args.data, split_fraction=tcfg.split_fraction,
                         seed=cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for name, overrides in ABLATION_GRID:
        variant = replace(cfg, **overrides)
        out_dir = os.path.join(args.out, name)
        print(f"[{name}] training {tcfg.steps} steps ...")
        summary = train_loop(variant, tcfg, corpus, out_dir)
        rows.append((name, summary.get("val_ce"), summary.get("val_ppl"),
                     summary["final"].get("ce")))
    table_path = os.path.join(args.out, "comparison.csv")
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write("variant,val_ce,val_ppl,final_train_ce\n")
        for name, val_ce, val_ppl, train_ce in rows:
            fh.write(f"{name},{val_ce},{val_ppl},{train_ce}\n")
    print(f"\n{'variant':<18} {'val_ce':>10} {'val_ppl':>12} {'train_ce':>10}")
    for name, val_ce, val_ppl, train_ce in rows:
        vc = f"{val_ce:.4f}" if val_ce is not None else "n/a"
        vp = f"{val_ppl:.2f}" if val_ppl is not None else "n/a"
        tc = f"{train_ce:.4f}" if train_ce is not None else "n/a"
        print(f"{name:<18} {vc:>10} {vp:>12} {tc:>10}")
    print(f"\ncomparison table written to {table_path}")
    print("ordering is observational output for this corpus and scale")
    return 0


def cmd_usage_report(args) -> int:
    from . import diagnostics

    report = diagnostics.expert_usage_report(args.metrics, out_csv=args.out)
    for line in report.lines():
        print(line)
    if args.compare is not None:
        result = diagnostics.compare_group_balance(args.metrics, args.compare)
        print(f"gap with group loss:    {result['gap_with_group_loss']:.4f}")
        print(f"gap without group loss: {result['gap_without_group_loss']:.4f}")
        verdict = "reduces" if result["group_loss_reduces_gap"] else "does not reduce"
        print(f"group loss {verdict} the expert-group gap "
              f"(final {result['window']} steps)")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "train": cmd_train,
            "eval": cmd_eval,
            "verify": cmd_verify,
            "ablate": cmd_ablate,
            "usage-report": cmd_usage_report,
        }[args.command]
        return handler(args)
    except (InputError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
