"""``confu`` command-line entry point."""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import checkpoint as ckpt_io
from .bench import (
    BENCH_MODES,
    ExperimentSpec,
    cmd_bench,
    cmd_report,
    cmd_verify_lossless,
    decoder_for,
    load_spec,
    tiny_models,
)
from .config import RunConfig, env_seed, load_run_config
from .data import SyntheticCorpus, detokenize, ingest_corpus, tokenize
from .errors import ConfuError
from .training import FutureConfig, JsonlLog, models_from_checkpoint, train_confu, train_draft, train_target


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    seed = args.seed if args.seed is not None else env_seed(-1)
    return cfg.with_seed(seed) if seed >= 0 else cfg


def _corpus(cfg: RunConfig) -> np.ndarray:
    c = cfg.corpus
    if c.path:
        return ingest_corpus(c.path, c.seq_len)
    return SyntheticCorpus(c.synthetic()).sequences(c.seq_len)[0]


def _train(args, stage: str) -> int:
    cfg = _run_config(args)
    corpus = _corpus(cfg)
    log = JsonlLog(args.log)
    if stage == "target":
        ck = train_target(corpus, cfg.target, cfg.train_target, log)
    elif stage == "draft":
        ck = train_draft(corpus, _load_init(args.init), cfg.draft, cfg.train_draft, log)
    else:
        fc = FutureConfig.for_variant(
            args.variant, soft_prompts=cfg.future.soft_prompts,
            n_expert=cfg.future.n_expert, k_expert=cfg.future.k_expert,
        )
        ck = train_confu(corpus, _load_init(args.init), fc, cfg.train_confu, log)
    ckpt_io.save(ck, args.out)
    last = log.losses[-1] if log.losses else float("nan")
    print(json.dumps({"stage": ck.stage, "steps": ck.step, "final_loss": last, "out": args.out}))
    return 0


def _load_init(path):
    if path is None:
        return None
    return ckpt_io.load(path)


def _decode(args) -> int:
    models = models_from_checkpoint(ckpt_io.load(args.checkpoint))
    mode = args.mode or ("confu" if models.contemplate is not None else "baseline")
    spec = ExperimentSpec(modes=(mode,), branch=args.branch, max_depth=args.max_depth, rule=args.rule)
    decoder = decoder_for(models, mode, args.temperature, args.nodes, spec)
    prompt = tokenize(args.prompt)[:-1]  # keep BOS, drop EOS so generation continues
    seed = args.seed if args.seed is not None else env_seed(0)
    out, metrics = decoder.generate(prompt, args.max_tokens, seed=seed)
    print(json.dumps({"text": detokenize(out), "ids": out, **metrics.to_json()}))
    return 0


def _bench(args) -> int:
    spec = load_spec(args.config)
    if args.seed is not None:
        spec = spec.with_seeds((args.seed,))
    out = args.out or spec.output
    report = cmd_bench(spec, out)
    sys.stdout.write(report.to_csv())
    return 0


def _verify(args) -> int:
    mode = args.mode or "confu"
    seed = args.seed if args.seed is not None else env_seed(0)
    models = ckpt_io.load(args.checkpoint) if args.checkpoint else tiny_models(seed, mode, 60.0)
    if not hasattr(models, "target"):
        models = models_from_checkpoint(models)
    report = cmd_verify_lossless(
        models, mode=mode, exhaustive=args.exhaustive, trials=args.trials,
        temperature=args.temperature, rule=args.rule, nodes=args.nodes, branch=args.branch,
        max_tokens=args.max_tokens, seed=seed,
    )
    text = json.dumps(report.to_json(), sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(("PASS " if report.passed else "FAIL ") + text)
    return 0 if report.passed else 1


def _report(args) -> int:
    table = cmd_report(args.reports)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(table.to_csv())
    sys.stdout.write(table.to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="confu", description="Future-aware speculative decoding at desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="INI run or experiment config")
        sp.add_argument("--seed", type=int, help="overrides CONFU_SEED and config seeds")
        sp.add_argument("--out", required=out_required, help="output path")

    sp = sub.add_parser("train-target", help="pretrain the target LM")
    common(sp)
    sp.add_argument("--log", help="JSONL per-step loss log")
    sp.set_defaults(func=lambda a: _train(a, "target"))

    sp = sub.add_parser("train-draft", help="train the baseline draft head")
    common(sp)
    sp.add_argument("--init", required=True, help="target-pretrain checkpoint")
    sp.add_argument("--log")
    sp.set_defaults(func=lambda a: _train(a, "draft"))

    sp = sub.add_parser("train-confu", help="train the future-aware draft from a baseline draft")
    common(sp)
    sp.add_argument("--init", required=True, help="draft-baseline checkpoint")
    sp.add_argument("--variant", default="confu", choices=BENCH_MODES[1:])
    sp.add_argument("--log")
    sp.set_defaults(func=lambda a: _train(a, "confu"))

    def decoding(sp):
        sp.add_argument("--mode", choices=("baseline", "confu"))
        sp.add_argument("--temperature", type=float, default=0.0)
        sp.add_argument("--nodes", type=int, default=30, help="tree budget, root included")
        sp.add_argument("--branch", type=int, default=4)
        sp.add_argument("--rule", default="lossless", choices=("lossless", "greedy-match"))

    sp = sub.add_parser("decode", help="speculatively decode one prompt")
    common(sp, out_required=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--max-tokens", type=int, default=48)
    sp.add_argument("--max-depth", type=int, default=0, help="0 means nodes - 1")
    decoding(sp)
    sp.set_defaults(func=_decode)

    sp = sub.add_parser("bench", help="run an experiment grid; writes OUT.csv and OUT.json")
    common(sp, out_required=False)
    sp.set_defaults(func=_bench)

    sp = sub.add_parser("verify-lossless", help="certify that decoding preserves the target distribution")
    common(sp, out_required=False)
    sp.add_argument("--checkpoint", help="model checkpoint; a random vocab-8 model when omitted")
    sp.add_argument("--exhaustive", action="store_true", help="exact enumeration (tiny models only)")
    sp.add_argument("--trials", type=int, default=2000, help="Monte-Carlo trials")
    sp.add_argument("--max-tokens", type=int, default=4)
    decoding(sp)
    sp.set_defaults(func=_verify, nodes=4, branch=2, temperature=1.0)

    sp = sub.add_parser("report", help="join bench reports into a comparison table")
    sp.add_argument("reports", nargs="+", help="bench JSON reports")
    sp.add_argument("--out", help="CSV output path")
    sp.set_defaults(func=_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfuError as exc:
        print(f"confu: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
