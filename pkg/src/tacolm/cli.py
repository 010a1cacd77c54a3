"""Command-line entry points.

Machine-readable results go to stdout (or ``--out``); human-readable logs go
to stderr. Exit status is 0 on success, 1 on runtime failure and 2 on usage
errors.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

log = logging.getLogger("tacolm")


def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies use SUPPRESS so they do not reset flags given before the subcommand
    dflt = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=dflt(None), help="YAML config file")
    p.add_argument("--seed", type=int, default=dflt(0))
    p.add_argument("--deterministic", action="store_true", default=dflt(False),
                   help="pin numeric libraries to one thread")
    p.add_argument("--out", type=Path, default=dflt(None), help="write the primary output here instead of stdout")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common(suppress=True)
    parser = argparse.ArgumentParser(prog="tacolm", parents=[_common(suppress=False)],
                                     description="Gated-attention codec language model toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", parents=[common], help="write a synthetic JSONL corpus")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--min-dur", type=float, default=0.3)
    p.add_argument("--max-dur", type=float, default=1.2)

    for name in ("train-ar", "train-nar"):
        p = sub.add_parser(name, parents=[common], help=f"train the {name[6:].upper()} model")
        p.add_argument("--corpus", type=Path, required=True)
        p.add_argument("--steps", type=int)
        p.add_argument("--variant", choices=("full", "no_gca", "no_gca_no_gpsa"))
        p.add_argument("--trace", type=Path, help="CSV loss trace path")

    p = sub.add_parser("synthesize", parents=[common], help="text to waveform")
    p.add_argument("--ar", type=Path, required=True)
    p.add_argument("--nar", type=Path, required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--wav", type=Path, help="output WAV path")
    p.add_argument("--prompt-corpus", type=Path, help="corpus holding the prompt utterance")
    p.add_argument("--prompt-id", help="utterance id used as acoustic prompt")
    p.add_argument("--prompt-frames", type=int, default=225)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=64)
    p.add_argument("--max-new", type=int, default=1125)

    p = sub.add_parser("ppl", parents=[common], help="AR perplexity over a corpus")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)

    p = sub.add_parser("bench", parents=[common], help="efficiency benchmark")
    p.add_argument("--variants", nargs="+", default=["full", "no_gca", "no_gca_no_gpsa"])
    p.add_argument("--lengths", nargs="+", type=int, default=[512, 1024, 2048, 4096])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--markdown", type=Path, help="also write a markdown table here")

    p = sub.add_parser("ablate", parents=[common], help="train and compare the three variants")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference layer checks")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def _load_yaml(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as f:
        return yaml.safe_load(f) or {}


@contextlib.contextmanager
def _output(path):
    if path is None:
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            yield f


def _emit(args, payload) -> None:
    with _output(args.out) as f:
        f.write(payload if isinstance(payload, str) else json.dumps(payload, indent=2))
        f.write("" if isinstance(payload, str) and payload.endswith("\n") else "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(args) -> int:
    from .codec import generate_corpus

    records = generate_corpus(args.seed, args.n, (args.min_dur, args.max_dur))
    _emit(args, "".join(r.to_json() + "\n" for r in records))
    log.info("wrote %d utterances", len(records))
    return 0


def cmd_train(args) -> int:
    from .codec import read_corpus
    from .model import save_checkpoint
    from .train import TrainConfig, train, write_trace

    if args.out is None:
        raise UsageError("--out <checkpoint> is required for training")
    cfg = TrainConfig.from_dict(_load_yaml(args.config))
    kind = "ar" if args.command == "train-ar" else "nar"
    cfg = replace(cfg, kind=kind, seed=args.seed)
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps)
    if args.variant is not None:
        cfg = replace(cfg, variant=args.variant)
    records = read_corpus(args.corpus)
    every = max(1, cfg.steps // 20)
    res = train(records, cfg, on_step=lambda r: log.info("step %d loss %.4f lr %.2e", r.step, r.loss, r.lr)
                if r.step % every == 0 else None)
    save_checkpoint(res.model, args.out)
    if args.trace:
        write_trace(res.trace, args.trace)
    summary = {"steps": len(res.trace), "final_loss": res.trace[-1].loss if res.trace else None,
               "seconds": res.seconds, "checkpoint": str(args.out)}
    print(json.dumps(summary), file=sys.stderr)
    return 0


def cmd_synthesize(args) -> int:
    from .codec import ToyCodec, default_tokenizer, read_corpus, write_wav
    from .model import N_QUANTIZERS, load_checkpoint
    from .synth import DecodeOptions, SynthesisRequest, synthesize

    ar, nar = load_checkpoint(args.ar), load_checkpoint(args.nar)
    prompt = np.zeros((0, N_QUANTIZERS), dtype=np.int64)
    if args.prompt_corpus is not None:
        if args.prompt_id is None:
            raise UsageError("--prompt-id is required with --prompt-corpus")
        recs = {r.id: r for r in read_corpus(args.prompt_corpus)}
        if args.prompt_id not in recs:
            raise UsageError(f"utterance {args.prompt_id!r} not in corpus")
        prompt = recs[args.prompt_id].codes[:args.prompt_frames]
    opts = DecodeOptions(args.temperature, args.top_k, args.max_new, args.seed)
    res = synthesize(SynthesisRequest(args.text, prompt, opts), ar, nar, ToyCodec(),
                     default_tokenizer(ar.config.text_vocab))
    if args.wav:
        write_wav(args.wav, res.waveform)
    _emit(args, res.report)
    return 0


def cmd_ppl(args) -> int:
    from .codec import read_corpus
    from .model import load_checkpoint
    from .train import eval_ppl

    model = load_checkpoint(args.model)
    if model.kind != "ar":
        raise UsageError("perplexity is defined for AR checkpoints")
    records = read_corpus(args.corpus)
    _emit(args, {"ppl": eval_ppl(model, records), "utterances": len(records)})
    return 0


def cmd_bench(args) -> int:
    from .bench import bench_attention, markdown_table, write_csv
    from .model import ModelConfig

    cfg = _load_yaml(args.config).get("model", {})
    preset = cfg.pop("preset", "desk")
    config = replace(getattr(ModelConfig, preset)(), **cfg)
    reports = bench_attention(args.variants, args.lengths, config, args.repeats, seed=args.seed,
                              log=log.info)
    if args.out is None:
        import csv
        from .bench import CSV_FIELDS

        w = csv.DictWriter(sys.stdout, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())
    else:
        write_csv(reports, args.out)
    table = markdown_table(reports)
    if args.markdown:
        Path(args.markdown).write_text(table + "\n", encoding="utf-8")
    print(table, file=sys.stderr)
    return 0


def cmd_ablate(args) -> int:
    from .bench import ablate, ablation_rows_json, ablation_table
    from .codec import read_corpus
    from .model import ModelConfig

    cfg = _load_yaml(args.config).get("model", {})
    preset = cfg.pop("preset", "tiny")
    config = replace(getattr(ModelConfig, preset)(), **cfg)
    rows = ablate(read_corpus(args.corpus), args.steps, config, tuple(args.seeds), log=log.info)
    print(ablation_table(rows), file=sys.stderr)
    _emit(args, ablation_rows_json(rows))
    return 0


def cmd_gradcheck(args) -> int:
    from .bench import layer_gradcheck

    results = layer_gradcheck(args.trials, args.seed)
    worst = max(e for _, e in results)
    per_op = {}
    for op, e in results:
        per_op[op] = max(per_op.get(op, 0.0), e)
    _emit(args, {"trials": len(results), "max_rel_error": worst, "per_op": per_op, "tol": args.tol})
    return 0 if worst <= args.tol else 1


COMMANDS = {
    "gen-corpus": cmd_gen_corpus, "train-ar": cmd_train, "train-nar": cmd_train,
    "synthesize": cmd_synthesize, "ppl": cmd_ppl, "bench": cmd_bench,
    "ablate": cmd_ablate, "gradcheck": cmd_gradcheck,
}


class UsageError(Exception):
    pass


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(message)s")
    limiter = contextlib.nullcontext()
    if args.deterministic:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=1)
    try:
        with limiter:
            return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"tacolm: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 1
        print(f"tacolm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
