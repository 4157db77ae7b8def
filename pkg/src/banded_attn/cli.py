"""``banded-attn``: one entry point for every workflow.

Each subcommand resolves its options as ``defaults | --config JSON | flags`` and
echoes the resolved config before any output. Exit codes: 0 success, 1 failure
(failed suite, diverged run, unreadable corpus), 2 invalid arguments.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import lm
from .errors import CorpusError, InvalidArgumentError, StateError, TrainingDivergedError
from .kernels import flops_count
from .partition import (
    MaskVariant,
    build_mask,
    compute_partition,
    render_mask,
    variant_bands,
)
from .verify import run_all

THREADS_ENV = "BANDED_ATTN_THREADS"
DEFAULT_CORPUS = Path(__file__).resolve().parents[2] / "data" / "tragedies.txt"

log = logging.getLogger("banded_attn")


class UsageError(Exception):
    """Bad CLI input; reported with usage and exit code 2."""


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _int_list(text: str) -> list[int]:
    try:
        values = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return values


def _str_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


# name -> (default, type used to coerce values read from --config)
COMMON = {"json": (False, bool), "seed": (0, int), "threads": (None, int)}

DEFAULTS = {
    "partition": {"seq_len": (1024, int), "heads": (8, int), "variant": ("SPA", str)},
    "mask": {
        "seq_len": (32, int), "heads": (8, int), "variant": ("SPA", str),
        "head": (None, int), "format": ("ascii", str), "out": (None, str),
    },
    "verify": {
        "seq_len": (64, int), "heads": (8, int), "trials": (20, int), "variant": ("SPA", str),
    },
    "train": {
        "layers": (4, int), "heads": (8, int), "d_model": (128, int), "seq_len": (256, int),
        "variant": ("SPA", str), "learning_rate": (3e-4, float), "batch_size": (16, int),
        "steps": (300, int), "vocab_size": (0, int),
        "corpus": (str(DEFAULT_CORPUS), str), "out_dir": ("runs/train", str),
        "checkpoint_every": (100, int), "resume": (None, str),
    },
    "eval": {"checkpoint": (None, str), "corpus": (str(DEFAULT_CORPUS), str)},
    "metrics": {
        "checkpoint": (None, str), "corpus": (str(DEFAULT_CORPUS), str), "batch_size": (4, int),
        "layers": (4, int), "heads": (8, int), "d_model": (128, int), "seq_len": (256, int),
        "variant": ("SPA", str), "csv": (None, str),
    },
    "bench": {
        "grid": (list(bench_mod.DEFAULT_GRID_N), list), "variants": (["Standard", "SPA"], list),
        "heads": (8, int), "d_k": (128, int), "batch": (1, int), "repeats": (5, int),
        "warmup": (2, int), "out": (None, str),
    },
    "flops": {"seq_len": (4096, int), "heads": (8, int), "d_k": (128, int), "variant": ("SPA", str)},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="banded-attn", description="Band-partitioned multi-head attention toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    S = argparse.SUPPRESS
    parser.subcommands = {}

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, argument_default=S)
        parser.subcommands[name] = p
        p.add_argument("--json", action="store_true", help="machine-readable output")
        p.add_argument("--seed", type=int, help="random seed (default 0)")
        p.add_argument("--threads", type=_positive, help=f"kernel threads (fallback: ${THREADS_ENV})")
        p.add_argument("--config", type=str, help="JSON file of options; flags override it")
        return p

    p = add("partition", "print the band table")
    p.add_argument("--seq-len", type=_positive)
    p.add_argument("--heads", type=_positive)
    p.add_argument("--variant", type=str)

    p = add("mask", "render per-head masks as ASCII or PGM")
    p.add_argument("--seq-len", type=_positive)
    p.add_argument("--heads", type=_positive)
    p.add_argument("--variant", type=str)
    p.add_argument("--head", type=int, help="single head index (default: all heads)")
    p.add_argument("--format", choices=("ascii", "pgm"))
    p.add_argument("--out", type=str, help="output file; with several heads, '{h}' is replaced by the index")

    p = add("verify", "run the self-check suites")
    p.add_argument("--seq-len", type=_positive)
    p.add_argument("--heads", type=_positive)
    p.add_argument("--trials", type=_positive)
    p.add_argument("--variant", type=str, help="mask variant for the coverage suite")

    p = add("train", "train the character-level model")
    p.add_argument("--layers", type=_positive)
    p.add_argument("--heads", type=_positive)
    p.add_argument("--d-model", type=_positive)
    p.add_argument("--seq-len", type=_positive)
    p.add_argument("--variant", type=str)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=_positive)
    p.add_argument("--steps", type=_nonneg)
    p.add_argument("--corpus", type=str)
    p.add_argument("--out-dir", type=str)
    p.add_argument("--checkpoint-every", type=_nonneg)
    p.add_argument("--resume", type=str, help="continue from a checkpoint")

    p = add("eval", "validation loss and perplexity of a checkpoint")
    p.add_argument("--checkpoint", type=str)
    p.add_argument("--corpus", type=str)

    p = add("metrics", "attention entropy, diversity and overlap")
    p.add_argument("--checkpoint", type=str, help="trained checkpoint (default: fresh init)")
    p.add_argument("--corpus", type=str)
    p.add_argument("--batch-size", type=_positive)
    p.add_argument("--layers", type=_positive)
    p.add_argument("--heads", type=_positive)
    p.add_argument("--d-model", type=_positive)
    p.add_argument("--seq-len", type=_positive)
    p.add_argument("--variant", type=str)
    p.add_argument("--csv", type=str, help="write the per-head table here")

    p = add("bench", "time forward+backward per variant and length")
    p.add_argument("--grid", type=_int_list, help="comma-separated sequence lengths")
    p.add_argument("--variants", type=_str_list)
    p.add_argument("--heads", type=_positive)
    p.add_argument("--d-k", type=_positive)
    p.add_argument("--batch", type=_positive)
    p.add_argument("--repeats", type=_positive)
    p.add_argument("--warmup", type=_nonneg)
    p.add_argument("--out", type=str, help="CSV output path")

    p = add("flops", "exact multiply-add counts vs Standard")
    p.add_argument("--seq-len", type=_positive)
    p.add_argument("--heads", type=_positive)
    p.add_argument("--d-k", type=_positive)
    p.add_argument("--variant", type=str)
    return parser


def _coerce(name: str, value, kind):
    if value is None:
        return None
    if kind is bool:
        if not isinstance(value, bool):
            raise UsageError(f"config field {name!r} must be a boolean")
        return value
    if kind is list:
        if isinstance(value, str):
            value = value.split(",")
        if not isinstance(value, list):
            raise UsageError(f"config field {name!r} must be a list")
        return value
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise UsageError(f"config field {name!r}: cannot convert {value!r}") from None


def resolve_config(command: str, ns: argparse.Namespace) -> dict:
    """``defaults | file | flags`` for ``command``; unknown file fields are rejected."""
    fields = COMMON | DEFAULTS[command]
    cfg = {k: d for k, (d, _) in fields.items()}
    flags = vars(ns).copy()
    flags.pop("command", None)
    path = flags.pop("config", None)
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        unknown = sorted(set(data) - set(fields))
        if unknown:
            raise UsageError(f"unknown config fields for {command}: {unknown}")
        for k, v in data.items():
            cfg[k] = _coerce(k, v, fields[k][1])
    cfg.update(flags)
    if cfg["threads"] is None and os.environ.get(THREADS_ENV):
        try:
            cfg["threads"] = int(os.environ[THREADS_ENV])
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer") from None
    if cfg["threads"] is not None and cfg["threads"] < 1:
        raise UsageError("threads must be >= 1")
    if "variant" in cfg:
        try:
            cfg["variant"] = str(MaskVariant.parse(cfg["variant"]))
        except (InvalidArgumentError, ValueError) as exc:
            raise UsageError(str(exc)) from None
    if "variants" in cfg:
        try:
            cfg["variants"] = [str(MaskVariant.parse(v)) for v in cfg["variants"]]
        except (InvalidArgumentError, ValueError) as exc:
            raise UsageError(str(exc)) from None
    for key in ("seq_len", "heads", "trials", "layers", "d_model", "batch_size", "d_k", "batch"):
        if key in cfg and (not isinstance(cfg[key], int) or cfg[key] < 1):
            raise UsageError(f"{key} must be a positive integer")
    if "heads" in cfg and "seq_len" in cfg and cfg["heads"] > cfg["seq_len"]:
        raise UsageError(f"heads={cfg['heads']} exceeds seq_len={cfg['seq_len']}")
    return {"command": command} | cfg


def _threads(n: int | None):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


class Emitter:
    """Writes the config echo and results in text or JSON mode."""

    def __init__(self, cfg: dict, stream=None):
        self.cfg = cfg
        self.stream = stream if stream is not None else sys.stdout

    def echo(self) -> None:
        if not self.cfg["json"]:
            print(f"# config: {_dump(self.cfg)}", file=self.stream)

    def result(self, payload: dict, text_lines: list[str] | None = None) -> None:
        if self.cfg["json"]:
            print(_dump({"config": self.cfg} | payload), file=self.stream)
        else:
            for line in text_lines or []:
                print(line, file=self.stream)


def cmd_partition(cfg: dict, out: Emitter) -> int:
    n, h = cfg["seq_len"], cfg["heads"]
    variant = MaskVariant.parse(cfg["variant"])
    p = compute_partition(n, h)
    bands = variant_bands(p, variant)
    rows = [{"head": i, "start": b.start, "width": b.width} for i, b in enumerate(bands)]
    out.echo()
    out.result(
        {"base_width": p.base_width, "remainder": p.remainder, "bands": rows},
        ["h\tS_h\tW_h"] + [f"{r['head']}\t{r['start']}\t{r['width']}" for r in rows],
    )
    return 0


def cmd_mask(cfg: dict, out: Emitter) -> int:
    n, h = cfg["seq_len"], cfg["heads"]
    head = cfg["head"]
    if head is not None and not 0 <= head < h:
        raise UsageError(f"--head {head} out of range [0, {h})")
    masks = build_mask(compute_partition(n, h), cfg["variant"])
    streams = render_mask(masks, cfg["format"])
    selected = [head] if head is not None else list(range(h))
    target = cfg["out"]
    if target is None:
        if cfg["format"] == "pgm" and len(selected) > 1:
            raise UsageError("PGM output for several heads needs --out with a '{h}' placeholder")
        # payload goes to stdout, so the echo goes to stderr
        print(f"# config: {_dump(cfg)}", file=sys.stderr)
        buf = sys.stdout.buffer
        for i in selected:
            if cfg["format"] == "ascii" and len(selected) > 1:
                buf.write(f"# head {i}\n".encode())
            buf.write(streams[i])
        buf.flush()
        return 0
    if len(selected) > 1 and "{h}" not in target:
        raise UsageError("--out must contain '{h}' when rendering several heads")
    written = []
    for i in selected:
        path = Path(target.replace("{h}", str(i)))
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(streams[i])
        written.append(str(path))
    out.echo()
    out.result({"files": written}, [f"wrote {p}" for p in written])
    return 0


def cmd_verify(cfg: dict, out: Emitter) -> int:
    results = run_all(cfg["seq_len"], cfg["heads"], cfg["trials"], cfg["seed"], cfg["variant"])
    ok = all(r.passed for r in results)
    lines = [f"{'suite':<20} {'result':<6} checked"]
    lines += [f"{r.name:<20} {'PASS' if r.passed else 'FAIL':<6} {r.checked}" for r in results]
    first = next((r for r in results if not r.passed), None)
    if first is not None:
        lines.append(f"counterexample ({first.name}): {_dump(first.counterexample)}")
    out.echo()
    out.result({"passed": ok, "suites": [r.to_json() for r in results]}, lines)
    return 0 if ok else 1


def _model_config(cfg: dict, vocab_size: int) -> lm.ModelConfig:
    try:
        return lm.ModelConfig(
            layers=cfg["layers"], heads=cfg["heads"], d_model=cfg["d_model"], seq_len=cfg["seq_len"],
            vocab_size=vocab_size, variant=cfg["variant"], seed=cfg["seed"],
            learning_rate=cfg.get("learning_rate", 3e-4), batch_size=cfg["batch_size"],
            steps=cfg.get("steps", 0),
        )
    except InvalidArgumentError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(cfg: dict, out: Emitter) -> int:
    out_dir = Path(cfg["out_dir"])
    state = None
    if cfg["resume"]:
        state = lm.load_checkpoint(cfg["resume"])
        if state.config.vocab_size < 1:
            raise UsageError("checkpoint has no vocabulary size")
    corpus = lm.load_corpus(cfg["corpus"], cfg["seq_len"])
    if cfg["vocab_size"] not in (0, corpus.vocab_size):
        raise UsageError(f"vocab_size={cfg['vocab_size']} but the corpus has {corpus.vocab_size} symbols")
    mc = _model_config(cfg, corpus.vocab_size)
    if state is not None:
        old = state.config.to_json()
        new = mc.to_json()
        diff = [k for k in old if k not in ("steps", "learning_rate") and old[k] != new[k]]
        if diff:
            raise UsageError(f"--resume: config differs from checkpoint in {diff}")
    out.echo()
    state, curve = lm.train(mc, corpus, state=state, checkpoint_dir=out_dir / "checkpoints",
                            checkpoint_every=cfg["checkpoint_every"])
    lm.write_curve_csv(curve, out_dir / "curve.csv")
    final_ckpt = out_dir / "checkpoints" / f"step_{state.step:06d}.ckpt"
    payload = {
        "model": mc.to_json(),
        "initial_loss": curve[0].loss,
        "final_loss": curve[-1].loss,
        "steps": state.step,
        "params_hash": lm.params_hash(state.params),
        "curve_csv": str(out_dir / "curve.csv"),
        "checkpoint": str(final_ckpt),
    }
    lines = [
        f"steps {state.step}  loss {curve[0].loss:.4f} -> {curve[-1].loss:.4f}",
        f"curve {payload['curve_csv']}",
        f"checkpoint {final_ckpt}",
    ]
    out.result(payload, lines)
    return 0


def cmd_eval(cfg: dict, out: Emitter) -> int:
    if not cfg["checkpoint"]:
        raise UsageError("--checkpoint is required")
    state = lm.load_checkpoint(cfg["checkpoint"])
    corpus = lm.load_corpus(cfg["corpus"], state.config.seq_len)
    if corpus.vocab_size != state.config.vocab_size:
        raise UsageError(
            f"corpus vocabulary ({corpus.vocab_size}) does not match checkpoint ({state.config.vocab_size})"
        )
    out.echo()
    res = lm.evaluate(state, corpus)
    out.result(res.to_json() | {"step": state.step},
               [f"loss {res.loss:.6f}  perplexity {res.perplexity:.4f}  tokens {res.tokens}"])
    return 0


def cmd_metrics(cfg: dict, out: Emitter) -> int:
    if cfg["checkpoint"]:
        state = lm.load_checkpoint(cfg["checkpoint"])
        seq_len = state.config.seq_len
    else:
        seq_len = cfg["seq_len"]
        state = None
    corpus = lm.load_corpus(cfg["corpus"], seq_len)
    if state is None:
        state = lm.new_state(_model_config(cfg, corpus.vocab_size))
    xs, _ = lm.validation_windows(corpus.val, state.config.seq_len)
    rng = np.random.default_rng(cfg["seed"])
    pick = np.sort(rng.choice(len(xs), size=min(cfg["batch_size"], len(xs)), replace=False))
    out.echo()
    stats = lm.collect_attention_stats(state, xs[pick])
    agg = stats["aggregate"]
    if cfg["csv"]:
        Path(cfg["csv"]).write_text(agg.to_csv())
    payload = {
        "aggregate": agg.to_json(),
        "layers": [r.to_json() for r in stats["layers"]],
    }
    lines = ["head\tentropy\tbound"]
    lines += [f"{h}\t{e:.6f}\t{b:.6f}" for h, (e, b) in enumerate(zip(agg.per_head_entropy, agg.entropy_bound))]
    lines.append(f"mean_entropy {agg.mean_entropy:.6f}  diversity_sigma {agg.diversity_sigma:.6f}")
    out.result(payload, lines)
    return 0


def cmd_bench(cfg: dict, out: Emitter) -> int:
    if cfg["repeats"] < 5:
        raise UsageError("--repeats must be >= 5")
    grid = [int(n) for n in cfg["grid"]]
    for n in grid:
        if n < cfg["heads"]:
            raise UsageError(f"grid length {n} is smaller than heads={cfg['heads']}")
    out.echo()
    results = bench_mod.run_bench(
        bench_mod.default_grid(cfg["variants"], grid), heads=cfg["heads"], d_k=cfg["d_k"],
        batch=cfg["batch"], repeats=cfg["repeats"], warmup=cfg["warmup"], seed=cfg["seed"],
    )
    text = bench_mod.to_csv(results)
    if cfg["out"]:
        Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg["out"]).write_text(text)
    rows = [dict(zip(bench_mod.CSV_COLUMNS, r.row())) | {"checksum": r.checksum} for r in results]
    out.result({"rows": rows}, text.rstrip("\n").split("\n"))
    return 0


def _ratio(a: int, b: int):
    if b == 0:
        return None
    r = Fraction(a, b)
    return int(r) if r.denominator == 1 else float(r)


def cmd_flops(cfg: dict, out: Emitter) -> int:
    n, h, d_k = cfg["seq_len"], cfg["heads"], cfg["d_k"]
    std = flops_count("Standard", n, h, d_k)
    other = flops_count(cfg["variant"], n, h, d_k)
    ratio = _ratio(std.total, other.total)
    out.echo()
    out.result(
        {"standard": std.to_json(), "variant": cfg["variant"], "variant_flops": other.to_json(), "ratio": ratio},
        [
            f"Standard\tscore_madds {std.score_madds}\tweighted_sum_madds {std.weighted_sum_madds}\ttotal {std.total}",
            f"{cfg['variant']}\tscore_madds {other.score_madds}\tweighted_sum_madds {other.weighted_sum_madds}\ttotal {other.total}",
            f"ratio {ratio}",
        ],
    )
    return 0


COMMANDS = {
    "partition": cmd_partition,
    "mask": cmd_mask,
    "verify": cmd_verify,
    "train": cmd_train,
    "eval": cmd_eval,
    "metrics": cmd_metrics,
    "bench": cmd_bench,
    "flops": cmd_flops,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(ns.command, ns)
        with _threads(cfg["threads"]):
            return COMMANDS[ns.command](cfg, Emitter(cfg))
    except (UsageError, InvalidArgumentError) as exc:
        parser.subcommands[ns.command].print_usage(sys.stderr)
        print(f"banded-attn {ns.command}: error: {exc}", file=sys.stderr)
        return 2
    except (CorpusError, TrainingDivergedError, StateError, ValueError, OSError) as exc:
        print(f"banded-attn {ns.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
