"""Command-line entry point: prepare, train, eval, explain, bench.

Exit status is 0 on success, 2 on usage or input-format errors and 1 on
runtime failures.  Training options resolve as flags, then ``--config``
(``key = value`` lines), then built-in defaults; the seed additionally falls
back to the SSMKT_SEED environment variable before its default.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bench as B
from . import interpret as I
from .checkpoint import CheckpointError
from .data import DataFormatError, load_interactions, load_prepared, split, window, write_split
from .metrics import fmt_metric
from .model import ModelConfig
from .train import TrainConfig, evaluate, load_run, train

log = logging.getLogger("ssmkt")


class UsageError(Exception):
    """Bad arguments that argparse cannot see (ranges, missing students)."""


TRAIN_DEFAULTS = {
    "d_model": 128, "layers": 5, "lr": 1e-3, "batch": 64, "epochs": 100, "patience": 10,
    "lambda": 1e-5, "no_ffn": False, "no_rasch": False, "seed": 0, "freeze_A": False,
    "ffn_placement": "block", "head_concat_question": False, "dtype": "float64", "dropout": 0.0,
    "n_state": 16, "expand": 2, "conv_kernel": 4, "clip_norm": 5.0,
}
_BOOL_KEYS = {k for k, v in TRAIN_DEFAULTS.items() if isinstance(v, bool)}


def env_seed(default: int = 0) -> int:
    raw = os.environ.get("SSMKT_SEED")
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"SSMKT_SEED must be an integer, got {raw!r}") from None


def read_config_file(path) -> dict:
    """``key = value`` lines; keys are the long flag names with '-' or '_'."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in TRAIN_DEFAULTS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        default = TRAIN_DEFAULTS[key]
        try:
            if key in _BOOL_KEYS:
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                out[key] = value.lower() in ("true", "1")
            else:
                out[key] = type(default)(value)
        except ValueError:
            raise UsageError(f"{path}:{lineno}: bad value {value!r} for {key}") from None
    return out


def resolve_train_options(args) -> dict:
    opts = dict(TRAIN_DEFAULTS)
    opts["seed"] = env_seed(TRAIN_DEFAULTS["seed"])
    if args.config:
        opts.update(read_config_file(args.config))
    for key in TRAIN_DEFAULTS:
        value = getattr(args, key if key != "lambda" else "lam", None)
        if value is not None:
            opts[key] = value
    return opts


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    seed = args.seed if args.seed is not None else env_seed()
    seqs, vocab = load_interactions(args.input)
    windows = window(seqs, args.max_len)
    parts = split(windows, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab.write(out / "vocab.csv")
    for name, part in zip(("train", "val", "test"), parts):
        write_split(part, out / f"{name}.csv")
    (out / "meta.txt").write_text(
        f"n_questions = {vocab.n_questions}\nn_concepts = {vocab.n_concepts}\nmax_len = {args.max_len}\n"
        f"seed = {seed}\nn_students = {len(seqs)}\nn_windows = {len(windows)}\n"
        + "".join(f"n_{name} = {len(p)}\n" for name, p in zip(("train", "val", "test"), parts)))
    print(f"{len(seqs)} students, {len(windows)} windows, {vocab.n_questions} questions, "
          f"{vocab.n_concepts} concepts -> {out}")
    return 0


def cmd_train(args) -> int:
    opts = resolve_train_options(args)
    data = load_prepared(args.data)
    meta = data["meta"]
    mcfg = ModelConfig(
        n_questions=int(meta["n_questions"]), n_concepts=int(meta["n_concepts"]),
        d_model=opts["d_model"], n_layers=opts["layers"], expand=opts["expand"], n_state=opts["n_state"],
        conv_kernel=opts["conv_kernel"], use_ffn=not opts["no_ffn"], use_rasch=not opts["no_rasch"],
        ffn_placement=opts["ffn_placement"], lam=opts["lambda"], max_seq_len=int(meta.get("max_len", 200)),
        freeze_A=opts["freeze_A"], head_concat_question=opts["head_concat_question"],
        dropout=opts["dropout"], dtype=opts["dtype"])
    tcfg = TrainConfig(lr=opts["lr"], batch_size=opts["batch"], epochs=opts["epochs"],
                       patience=opts["patience"], seed=opts["seed"], clip_norm=opts["clip_norm"])
    result = train(data["train"], data["val"], mcfg, tcfg, args.out)
    print(f"best epoch {result.best_epoch}: val AUC {fmt_metric(result.best_auc)}; "
          f"{result.model.num_parameters()} parameters -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    model, mcfg, tcfg = load_run(args.run)
    seqs = load_prepared(args.data)[args.split]
    m = evaluate(model, seqs, tcfg.batch_size)
    auc_text = "undefined AUC (single-class labels)" if m["auc"] is None else f"AUC {m['auc']:.6f}"
    acc_text = "undefined ACC (no positions)" if m["acc"] is None else f"ACC {m['acc']:.6f}"
    print(f"{args.split}: {auc_text}  {acc_text}  n={m['n']}")
    out = Path(args.run) / f"eval_{args.split}.txt"
    out.write_text(f"split = {args.split}\nauc = {fmt_metric(m['auc'])}\nacc = {fmt_metric(m['acc'])}\n"
                   f"n = {m['n']}\n")
    return 0


def _find_student(data: dict, student: str, window_index: int):
    for name in ("train", "val", "test"):
        for s in data[name]:
            if s.student_id == student and s.window == window_index:
                return s
    raise UsageError(f"student {student!r} (window {window_index}) not found in any split")


def _parse_channels(text: str) -> list[int]:
    try:
        return [int(c) for c in text.split(",") if c.strip()]
    except ValueError:
        raise UsageError(f"--channels must be comma-separated integers, got {text!r}") from None


def cmd_explain(args) -> int:
    model, mcfg, _ = load_run(args.run)
    if mcfg.arch != "mamba":
        raise UsageError("explain needs a Mamba run; attention runs have no state-space trace")
    if not -mcfg.n_layers <= args.layer < mcfg.n_layers:
        raise UsageError(f"--layer must be in [0, {mcfg.n_layers}), got {args.layer}")
    data = load_prepared(args.data)
    seq = _find_student(data, args.student, args.window)
    if len(seq) < 2:
        raise UsageError("sequence has fewer than 2 steps; nothing precedes any step")
    trace = I.layer_trace(model, seq.questions, seq.concepts, seq.responses, args.layer)
    d_inner = trace["Abar"].shape[1]
    out = Path(args.run) / "explain"
    out.mkdir(parents=True, exist_ok=True)
    raw_concept = {dense: raw for raw, dense in data["vocab"].concepts.items()}
    labels = I.exercise_labels([raw_concept[int(c)] for c in seq.concepts], seq.responses)
    tag = f"s{args.student}_w{args.window}_l{args.layer}"
    note = [f"student {args.student}, window {args.window}, layer {args.layer}, T = {len(seq)}",
            "labels are concept(response): 59(1) is a correct answer on concept 59",
            "row i = 0 is absent: no earlier step exists to normalise over"]

    if args.level == "sequence":
        channels = _parse_channels(args.channels)
        bad = [c for c in channels if not 0 <= c < d_inner]
        if bad:
            raise UsageError(f"channel(s) {bad} out of range [0, {d_inner})")
        alpha = I.materialize_alpha(trace["Abar"][:, channels], trace["Bbar"][:, channels], trace["C"],
                                    skip=None if trace["D"] is None else trace["D"][channels], force=args.force)
        weights = I.sequence_weights(alpha)
        for k, ch in enumerate(channels):
            I.write_grid_csv(weights, k, out / f"{tag}_c{ch}.csv")
            grid = np.where(weights.defined[k][:, None] & np.tri(len(seq), k=-1, dtype=bool),
                            weights.gamma[k], np.nan)
            I.write_heatmap_svg(grid, labels, out / f"{tag}_c{ch}.svg", title=f"channel {ch}")
            undefined = [i for i in range(1, len(seq)) if not weights.defined[k, i]]
            if undefined:
                note.append(f"channel {ch}: rows {undefined} undefined (|sum of past influence| < "
                            f"{I.UNDEFINED_EPS:g}); left blank")
        diag = ["step," + ",".join(f"c{ch}" for ch in channels)]
        diag += [f"{i}," + ",".join(f"{weights.self_influence[k, i]:.6g}" for k in range(len(channels)))
                 for i in range(len(seq))]
        (out / f"{tag}_self_influence.csv").write_text("\n".join(diag) + "\n")
        print(f"wrote {len(channels)} grid(s) to {out}")
    else:
        target = args.target if args.target is not None else len(seq) - 1
        if not 1 <= target < len(seq):
            raise UsageError(f"--target must be in [1, {len(seq) - 1}], got {target}")
        alpha = I.materialize_alpha(trace["Abar"], trace["Bbar"], trace["C"], skip=trace["D"], force=args.force)
        weights = I.exercise_weights(alpha, target)
        I.write_exercise_table(weights, labels, out / f"{tag}_t{target}_top{args.top_k}.csv", k=args.top_k)
        I.write_exercise_svg(weights, labels, out / f"{tag}_t{target}.svg")
        for rank, (j, g) in enumerate(weights.top_k(args.top_k), start=1):
            print(f"{rank}. step {j} {labels[j]} weight {g:.4f}")
    (out / f"{tag}_{args.level}_note.txt").write_text("\n".join(note) + "\n")
    return 0


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None
    return parse


def cmd_bench(args) -> int:
    unknown = [m for m in args.models if m not in ("mamba", "attention")]
    if unknown:
        raise UsageError(f"unknown model(s) {unknown}; choose from mamba, attention")
    if args.repeats < 1 or any(t < 1 for t in args.seqlens):
        raise UsageError("--repeats and --seqlens must be positive")
    records = B.run_bench(args.models, args.seqlens, args.d_model, args.layers, args.repeats,
                          args.warmup, timing=not args.no_timing, dtype=args.dtype)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = B.format_table(records)
    B.write_csv(records, out / "bench.csv")
    (out / "bench.txt").write_text(table + "\n")
    print(table)
    for m in args.models:
        ts = sorted(r.T for r in records if r.model == m)
        if len(ts) > 1:
            print(f"{m}: tape scalar ratio T={ts[-2]}->{ts[-1]} = {B.scalar_ratio(records, m, ts[-2], ts[-1]):.3f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssmkt", description="Selective state-space knowledge tracing.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="window, split and index an interaction CSV")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--max-len", type=int, default=200)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="fit a model on a prepared dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", help="key = value file; flags override it")
    sp.add_argument("--d-model", type=int)
    sp.add_argument("--layers", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--patience", type=int)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--no-ffn", action="store_const", const=True)
    sp.add_argument("--no-rasch", action="store_const", const=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--freeze-A", dest="freeze_A", action="store_const", const=True,
                    help="keep the state matrix at its initialisation")
    sp.add_argument("--ffn-placement", choices=("block", "final"))
    sp.add_argument("--head-concat-question", action="store_const", const=True,
                    help="feed [features, question embedding] to the head")
    sp.add_argument("--dtype", choices=("float64", "float32"))
    sp.add_argument("--dropout", type=float)
    sp.add_argument("--n-state", type=int)
    sp.add_argument("--expand", type=int)
    sp.add_argument("--conv-kernel", type=int)
    sp.add_argument("--clip-norm", type=float)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="AUC/ACC of a trained run on one split")
    sp.add_argument("--run", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("explain", help="hidden-attention grids for one student")
    sp.add_argument("--run", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--student", required=True)
    sp.add_argument("--window", type=int, default=0)
    sp.add_argument("--layer", type=int, required=True, help="0-based block index; negatives count from the end")
    sp.add_argument("--channels", default="14,145,241")
    sp.add_argument("--level", choices=("sequence", "exercise"), default="sequence")
    sp.add_argument("--target", type=int, help="exercise level: step to explain (default: last)")
    sp.add_argument("--top-k", type=int, default=5)
    sp.add_argument("--force", action="store_true", help="materialise alpha even when it is very large")
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("bench", help="sequence-length scaling benchmark")
    sp.add_argument("--models", type=_csv_list(str), default=["mamba", "attention"])
    sp.add_argument("--seqlens", type=_csv_list(int), default=[128, 256, 512])
    sp.add_argument("--d-model", type=int, default=128)
    sp.add_argument("--layers", type=int, default=5)
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--warmup", type=int, default=2)
    sp.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    sp.add_argument("--no-timing", action="store_true", help="report scalar counts only")
    sp.add_argument("--out", default=".")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, DataFormatError, CheckpointError, FileNotFoundError, IndexError, ValueError) as exc:
        print(f"ssmkt {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FloatingPointError, MemoryError, RuntimeError, OSError) as exc:
        print(f"ssmkt {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
