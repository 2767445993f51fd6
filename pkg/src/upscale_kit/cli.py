"""Batch command-line front end: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage error, 2 validation/contract error,
3 runtime error. Summaries go to stdout, logs to stderr, machine reports
to the --report path when given. Surgery commands additionally write a
JSON summary next to the output checkpoint.
"""

from __future__ import annotations

import argparse
import difflib
import json
import logging
import os
import sys

import numpy as np

from . import report as figs
from . import surgery, training
from .config import ModelConfig
from .container import load_config, load_container, save_config
from .errors import TrainingDiverged, UpscaleError
from .model import (build_model, forward, load_model, param_count, save_model,
                    sidecar_paths)
from .tokenizer import (Tokenizer, extend_vocab, read_corpus,
                        tokens_per_character, train_bpe)

logger = logging.getLogger("upscale_kit.cli")

SUBCOMMANDS = ("init", "tokenizer-train", "tokenizer-extend", "tpc",
               "embed-merge", "plan", "dus", "moe-expand", "retheta",
               "train", "param-count", "inspect", "router-load")


class _UsageError(Exception):
    """Flag combination errors that argparse groups cannot express."""


class _Parser(argparse.ArgumentParser):
    """argparse with exit code 1 for usage errors, plus typo suggestions."""

    def error(self, message):
        if "invalid choice" in message:
            bad = message.split("invalid choice: ")[1].split(" ")[0].strip("'\"")
            close = difflib.get_close_matches(bad, SUBCOMMANDS, n=1)
            if close:
                message += f" (did you mean {close[0]!r}?)"
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _read_corpora(paths: list[str]) -> list[str]:
    docs: list[str] = []
    for p in paths:
        docs.extend(read_corpus(p))
    return docs


def _write_report(args, payload: dict) -> None:
    if getattr(args, "report", None):
        with open(args.report, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, default=_json_default)
            f.write("\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _write_surgery_report(out_path: str, payload: dict) -> str:
    base = out_path[:-5] if out_path.endswith(".upsk") else out_path
    path = base + ".report.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, default=_json_default)
        f.write("\n")
    return path


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------

def cmd_init(args) -> dict:
    config = load_config(args.config)
    model = build_model(config, seed=args.seed)
    save_model(model, args.out)
    print(f"initialized model: {model.num_params()} params -> {args.out}")
    return {"params": model.num_params(), "out": args.out}


def cmd_tokenizer_train(args) -> dict:
    docs = _read_corpora(args.corpus)
    tok = train_bpe(docs, args.merges, specials=args.specials.split(","))
    tok.save(args.out)
    print(f"trained tokenizer: vocab {tok.vocab_size} ({len(tok.merges)} merges) -> {args.out}")
    return {"vocab_size": tok.vocab_size, "merges": len(tok.merges), "out": args.out}


def cmd_tokenizer_extend(args) -> dict:
    base = Tokenizer.load(args.base)
    docs = _read_corpora(args.corpus)
    ext = extend_vocab(base, docs, args.target_total)
    ext.save(args.out)
    added = ext.vocab_size - base.vocab_size
    print(f"extended tokenizer: {base.vocab_size} -> {ext.vocab_size} "
          f"(+{added} tokens) -> {args.out}")
    return {"base_size": base.vocab_size, "vocab_size": ext.vocab_size,
            "added": added, "out": args.out}


def cmd_tpc(args) -> dict:
    tok = Tokenizer.load(args.tokenizer)
    docs = _read_corpora(args.corpus)
    rep = tokens_per_character(tok, docs)
    print(f"tpc: {rep.tpc:.4f}")
    print(f"tokens: {rep.total_tokens}  characters: {rep.total_characters}")
    return {"tpc": rep.tpc, "total_tokens": rep.total_tokens,
            "total_characters": rep.total_characters}


def cmd_embed_merge(args) -> dict:
    model = load_model(args.model)
    base = Tokenizer.load(args.base)
    ext = Tokenizer.load(args.extended)
    merged = surgery.merge_token_embeddings(model, base, ext, fallback_seed=args.seed)
    save_model(merged, args.out)
    rep = surgery.surgery_report("embed-merge", model, merged,
                                 vocab_before=model.config.vocab_size,
                                 vocab_after=merged.config.vocab_size)
    rep["report_path"] = _write_surgery_report(args.out, rep)
    print(f"embedding merge: vocab {model.config.vocab_size} -> "
          f"{merged.config.vocab_size} -> {args.out}")
    return rep


def cmd_plan(args) -> dict:
    usage = [int(u) for u in args.usage.split(",")]
    plan = surgery.make_plan(args.layers, args.block_size, usage)
    print(f"depth: {plan.result_depth}")
    if args.out:
        surgery.save_plan(plan, args.out)
        print(f"plan -> {args.out}")
    return {"depth": plan.result_depth, "layout": plan.layout,
            "alpha_count": sum(1 for _, d in plan.layout if d >= 2)}


def cmd_dus(args) -> dict:
    model = load_model(args.model)
    if args.v1:
        if args.k is None:
            raise _UsageError("--v1 requires --k")
        out = surgery.dus_v1(model, args.k)
        extra = {"k": args.k}
    else:
        if args.plan is None:
            raise _UsageError("--v2 requires --plan")
        plan = surgery.load_plan(args.plan)
        out = surgery.dus_v2(model, plan, alpha_init=args.alpha_init)
        extra = {"plan": plan.to_dict(),
                 "first_block_duplicated": plan.usage[0] > 1}
    save_model(out, args.out)
    rep = surgery.surgery_report("dus.v1" if args.v1 else "dus.v2", model, out, **extra)
    rep["report_path"] = _write_surgery_report(args.out, rep)
    print(f"depth: {model.config.n_layers} -> {out.config.n_layers} "
          f"({len(out.alphas)} alphas) -> {args.out}")
    return rep


def cmd_moe_expand(args) -> dict:
    model = load_model(args.model)
    snaps = [surgery.load_ffn_snapshot(p) for p in args.snapshots.split(",") if p]
    out = surgery.expand_moe(model, snaps, args.experts, args.top_k, seed=args.seed)
    save_model(out, args.out)
    rep = surgery.surgery_report("moe-expand", model, out,
                                 n_experts=args.experts, top_k=args.top_k,
                                 snapshot_steps=[s.step for s in snaps])
    rep["report_path"] = _write_surgery_report(args.out, rep)
    print(f"moe expansion: {args.experts} experts (top-{args.top_k}), "
          f"params {rep['params_before']} -> {rep['params_after']} -> {args.out}")
    return rep


def cmd_retheta(args) -> dict:
    config = load_config(args.config)
    updated = surgery.retheta_and_unwindow(config, args.theta)
    save_config(updated, args.out)
    print(f"rope theta: {config.rope_theta:g} -> {updated.rope_theta:g}, "
          f"sliding window: {config.sliding_window} -> None -> {args.out}")
    return {"rope_theta": updated.rope_theta, "sliding_window": None, "out": args.out}


def _load_train_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    defaults = {"warmup": 10, "snapshot_every": 0, "ctx_len": 128,
                "batch": 8, "seed": 0}
    required = {"steps", "lr", "sources"}
    allowed = required | set(defaults)
    unknown = set(doc) - allowed
    if unknown:
        raise UpscaleError(f"{path}: unknown training config field(s) {sorted(unknown)}")
    missing = required - set(doc)
    if missing:
        raise UpscaleError(f"{path}: missing training config field(s) {sorted(missing)}")
    merged = dict(defaults)
    merged.update(doc)
    return merged


def cmd_train(args) -> dict:
    model = load_model(args.model)
    tok = Tokenizer.load(args.tokenizer)
    tcfg = _load_train_config(args.train_config)

    sources = []
    for src in tcfg["sources"]:
        docs = read_corpus(src["path"])
        token_docs = [tok.encode(d) for d in docs]
        sources.append(training.CorpusSource(name=src["path"], docs=token_docs,
                                             weight=float(src["weight"])))
    mixed = training.mix_corpora(sources, seed=tcfg["seed"])
    batches = list(training.pack_sequences(
        mixed, tcfg["ctx_len"], tok.eos_id, tok.pad_id,
        batch_size=tcfg["batch"], vocab_size=model.config.vocab_size))
    if not batches:
        raise UpscaleError("training corpus produced no batches")

    schedule = training.warmup_schedule(tcfg["lr"], tcfg["warmup"])
    rep = training.train(model, batches, tcfg["steps"], schedule,
                         tcfg["snapshot_every"], args.out_dir, pad_id=tok.pad_id)
    curve = figs.render_loss_curve(rep.losses,
                                   os.path.join(args.out_dir, "loss_curve.png"))
    print(f"trained {tcfg['steps']} steps: loss {rep.initial_loss:.4f} -> "
          f"{rep.final_loss:.4f}")
    print(f"checkpoint: {rep.final_checkpoint}")
    if rep.snapshots:
        print(f"snapshots: {', '.join(p for _, p in rep.snapshots)}")
    print(f"report: {os.path.join(args.out_dir, 'report.jsonl')}  figure: {curve}")
    return {"steps": tcfg["steps"], "initial_loss": rep.initial_loss,
            "final_loss": rep.final_loss,
            "snapshots": [{"step": s, "path": p} for s, p in rep.snapshots],
            "checkpoint": rep.final_checkpoint, "loss_curve": curve}


def cmd_param_count(args) -> dict:
    config = load_config(args.config)
    count = param_count(config)
    print(f"params: {count}")
    return {"params": count}


def cmd_inspect(args) -> dict:
    tensors = load_container(args.path)
    total = 0
    for name in sorted(tensors):
        arr = tensors[name]
        total += arr.size
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        print(f"{name:40s} {arr.dtype.name:8s} {shape:>16s} {arr.nbytes:>12d} B")
    print(f"total values: {total}")
    payload = {"tensors": {n: {"dtype": str(t.dtype), "shape": list(t.shape)}
                           for n, t in tensors.items()},
               "total_values": total}
    config_path, _ = sidecar_paths(args.path)
    if os.path.exists(config_path):
        config = load_config(config_path)
        print(f"config: {config}")
        payload["config"] = config.to_dict()
    return payload


def cmd_router_load(args) -> dict:
    model = load_model(args.model)
    tok = Tokenizer.load(args.tokenizer)
    docs = _read_corpora(args.corpus)
    stream: list[int] = []
    for d in docs:
        stream.extend(tok.encode(d))
        stream.append(tok.eos_id)
    n_rows = min(args.batch, len(stream) // args.ctx)
    if n_rows == 0:
        raise UpscaleError(f"corpus too small for even one ctx={args.ctx} row")
    ids = np.asarray(stream[:n_rows * args.ctx], dtype=np.int64).reshape(n_rows, args.ctx)
    fractions = surgery.router_load(model, ids)
    for layer, frac in fractions.items():
        cells = "  ".join(f"{v:.4f}" for v in frac)
        print(f"layer {layer}: {cells}  (sum {frac.sum():.4f})")
    payload = {"tokens": int(ids.size),
               "fractions": {str(layer): frac for layer, frac in fractions.items()}}
    if args.report:
        base, _ = os.path.splitext(args.report)
        payload["csv"] = figs.write_router_csv(fractions, base + ".csv")
        payload["figure"] = figs.render_router_load(fractions, model.config.top_k,
                                                    base + ".png")
        print(f"router load table: {payload['csv']}  figure: {payload['figure']}")
    return payload


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="upscale-kit",
                     description="Mechanically up-scale a small decoder-only "
                                 "transformer: tokenizer extension, depth "
                                 "up-scaling, MoE expansion.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--report", help="write a machine-readable JSON report here")
        return p

    p = add("init", cmd_init, "build a fresh model from a config JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("tokenizer-train", cmd_tokenizer_train, "train a byte-level BPE tokenizer")
    p.add_argument("--corpus", required=True, nargs="+")
    p.add_argument("--merges", required=True, type=int)
    p.add_argument("--specials", default="pad,eos")
    p.add_argument("--out", required=True)

    p = add("tokenizer-extend", cmd_tokenizer_extend,
            "extend a tokenizer's vocabulary on a new corpus")
    p.add_argument("--base", required=True)
    p.add_argument("--corpus", required=True, nargs="+")
    p.add_argument("--target-total", required=True, type=int)
    p.add_argument("--out", required=True)

    p = add("tpc", cmd_tpc, "tokens-per-character efficiency of a tokenizer")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--corpus", required=True, nargs="+")

    p = add("embed-merge", cmd_embed_merge,
            "grow embeddings to an extended vocabulary by origin-token averaging")
    p.add_argument("--model", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--extended", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("plan", cmd_plan, "validate a block-duplication plan and report depth")
    p.add_argument("--layers", required=True, type=int)
    p.add_argument("--block-size", required=True, type=int)
    p.add_argument("--usage", required=True,
                   help="comma-separated per-block duplication counts")
    p.add_argument("--out")

    p = add("dus", cmd_dus, "depth-up-scale a model (--v1 spans or --v2 blocks)")
    p.add_argument("--model", required=True)
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--v1", action="store_true")
    mode.add_argument("--v2", action="store_true")
    p.add_argument("--k", type=int, help="span size for --v1")
    p.add_argument("--plan", help="plan JSON for --v2")
    p.add_argument("--alpha-init", type=float, default=1.0)
    p.add_argument("--out", required=True)

    p = add("moe-expand", cmd_moe_expand,
            "turn dense FFNs into snapshot-initialized MoE layers")
    p.add_argument("--model", required=True)
    p.add_argument("--snapshots", required=True,
                   help="comma-separated FFN snapshot containers")
    p.add_argument("--experts", required=True, type=int)
    p.add_argument("--top-k", required=True, type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("retheta", cmd_retheta, "drop the sliding window and raise RoPE theta")
    p.add_argument("--config", required=True)
    p.add_argument("--theta", required=True, type=float)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "next-token training with packing and snapshots")
    p.add_argument("--model", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--train-config", required=True)
    p.add_argument("--out-dir", required=True)

    p = add("param-count", cmd_param_count, "closed-form parameter count of a config")
    p.add_argument("--config", required=True)

    p = add("inspect", cmd_inspect, "list the tensors of a checkpoint container")
    p.add_argument("--path", required=True)

    p = add("router-load", cmd_router_load, "measure per-layer expert selection")
    p.add_argument("--model", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--corpus", required=True, nargs="+")
    p.add_argument("--ctx", type=int, default=64)
    p.add_argument("--batch", type=int, default=16)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        payload = args.fn(args)
        _write_report(args, payload)
        return 0
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except UpscaleError as exc:
        if isinstance(exc, TrainingDiverged):
            print(f"error: {exc}", file=sys.stderr)
            return 3
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # pragma: no cover - defensive
        logger.exception("unexpected failure")
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
