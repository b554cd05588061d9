"""Operator entry points: corpus generation, staged training, evaluation,
and the attention benchmark harness.

Every subcommand writes a run manifest (resolved config snapshot plus
content hashes of its inputs) beside its outputs. Exit codes: 0 ok,
1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import statistics
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .attention import AttentionSpec, dense_mha, flops_estimate, restricted_mha_blocked, track_score_alloc
from .data import SynthSpec, generate_corpus
from .evaluate import evaluate_checkpoint
from .model import ModelConfig, desk_config
from .tensor import Tensor
from .training import TrainConfig, load_checkpoint, run_stage, save_checkpoint


class UserError(Exception):
    """Bad arguments or inputs; reported without a traceback."""


TASK_ALIASES = {"asr": "asr", "summ": "summarization", "concepts": "concepts"}


def _sha256(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def _write_run_manifest(out_dir, subcommand, config, inputs, outputs) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {
        "tool": f"speechsum {__version__}",
        "subcommand": subcommand,
        "config": config,
        "input_hashes": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
    }
    with open(out_dir / "run_manifest.json", "w", encoding="utf-8") as f:
        json.dump(snapshot, f, indent=2, sort_keys=True)


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise UserError(f"no such file: {path}") from e
    except json.JSONDecodeError as e:
        raise UserError(f"invalid JSON in {path}: {e}") from e


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    fields = _load_json(args.spec) if args.spec else {}
    if args.seed is not None:
        fields["seed"] = args.seed
    try:
        spec = SynthSpec.from_json(fields)
    except TypeError as e:
        raise UserError(f"bad synth spec: {e}") from e
    try:
        manifests = generate_corpus(spec, args.train, args.test, args.out)
    except OSError as e:
        raise UserError(f"cannot write corpus under {args.out}: {e}") from e
    _write_run_manifest(
        args.out,
        "gen-data",
        {"spec": spec.__dict__, "train": args.train, "test": args.test},
        [args.spec] if args.spec else [],
        list(manifests.values()),
    )
    print(f"wrote {args.train} train / {args.test} test records to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _metrics_csv(path, log: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss", "lr", "val_metric"])
        for entry in log:
            writer.writerow(
                [entry["step"], f"{entry['loss']:.6f}", f"{entry['lr']:.8f}",
                 entry["val_metric"] if entry["val_metric"] != "" else ""]
            )


def cmd_train(args) -> int:
    task = TASK_ALIASES[args.task]
    cfg_raw = _load_json(args.config)
    if "manifest" not in cfg_raw:
        raise UserError("config must name a 'manifest' to train on")
    train_fields = dict(cfg_raw.get("train", {}))
    train_fields["task"] = task
    try:
        if "joint" in train_fields or "specaugment" in train_fields:
            train_cfg = TrainConfig.from_json(train_fields)
        else:
            train_cfg = TrainConfig(**train_fields)
    except (TypeError, ValueError) as e:
        raise UserError(f"bad train config: {e}") from e

    init = None
    model_cfg = None
    if args.init:
        try:
            init = load_checkpoint(args.init)
        except (OSError, ValueError) as e:
            raise UserError(f"cannot load init checkpoint {args.init}: {e}") from e
    else:
        model_fields = dict(cfg_raw.get("model", {}))
        model_fields.setdefault("vocab_size", 6)  # resized to the real vocab
        if "attention" in model_fields:
            model_fields["attention"] = AttentionSpec(**model_fields["attention"])
        try:
            model_cfg = desk_config(**model_fields)
        except (TypeError, ValueError) as e:
            raise UserError(f"bad model config: {e}") from e

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        ckpt, log = run_stage(
            task,
            init,
            train_cfg,
            cfg_raw["manifest"],
            model_config=model_cfg,
            val_manifest_path=cfg_raw.get("val_manifest"),
        )
    except ValueError as e:
        raise UserError(str(e)) from e
    ckpt_path = out / "model.ckpt"
    save_checkpoint(ckpt, ckpt_path)
    _metrics_csv(out / "metrics.csv", log)
    inputs = [cfg_raw["manifest"]] + (
        [cfg_raw["val_manifest"]] if cfg_raw.get("val_manifest") else []
    ) + ([args.init] if args.init else [])
    _write_run_manifest(
        out,
        "train",
        {
            "task": task,
            "train": train_cfg.to_json(),
            "model": ckpt.config.to_json(),
            "init": args.init,
        },
        inputs,
        [ckpt_path, out / "metrics.csv"],
    )
    last = log[-1] if log else {}
    print(f"trained {task} for {ckpt.step} steps -> {ckpt_path}")
    if last.get("val_metric", "") != "":
        print(f"final validation metric: {last['val_metric']:.2f}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _report_table(reports) -> str:
    rows = [(r.name, f"{r.value:.2f}", f"{r.numerator:g}", f"{r.denominator:g}")
            for r in reports.values()]
    widths = [max(len(r[i]) for r in rows + [("metric", "value", "num", "den")])
              for i in range(4)]
    lines = []
    header = ("metric", "value", "num", "den")
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(lines)


def cmd_eval(args) -> int:
    task = TASK_ALIASES[args.task]
    try:
        ckpt = load_checkpoint(args.ckpt)
    except (OSError, ValueError) as e:
        raise UserError(f"cannot load checkpoint {args.ckpt}: {e}") from e
    try:
        reports, hyps = evaluate_checkpoint(
            ckpt, args.manifest, task, beam=args.beam, oracle=args.oracle
        )
    except (OSError, ValueError) as e:
        raise UserError(str(e)) from e
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_json = {name: rep.as_dict() for name, rep in reports.items()}
    with open(out / "metrics.json", "w", encoding="utf-8") as f:
        json.dump(report_json, f, indent=2, sort_keys=True)
    table = _report_table(reports)
    (out / "metrics.txt").write_text(table + "\n", encoding="utf-8")
    with open(out / "hypotheses.jsonl", "w", encoding="utf-8") as f:
        for hyp in hyps:
            f.write(json.dumps({"tokens": hyp}) + "\n")
    _write_run_manifest(
        out,
        "eval",
        {"task": task, "beam": args.beam, "oracle": args.oracle, "ckpt": args.ckpt},
        [args.ckpt, args.manifest],
        [out / "metrics.json", out / "metrics.txt", out / "hypotheses.jsonl"],
    )
    print(table)
    return 0


# ---------------------------------------------------------------------------
# bench-attention
# ---------------------------------------------------------------------------


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise UserError(f"{flag} wants comma-separated integers, got {text!r}") from e
    if not values:
        raise UserError(f"{flag} list is empty")
    return values


def _bench_kernel(kernel, n, d_model, repeat, seed=0):
    r = np.random.default_rng(seed)
    q = Tensor(r.normal(size=(n, d_model)).astype(np.float32))
    k = Tensor(r.normal(size=(n, d_model)).astype(np.float32))
    v = Tensor(r.normal(size=(n, d_model)).astype(np.float32))
    kernel(q, k, v)  # warm up
    times = []
    with track_score_alloc() as alloc:
        for _ in range(repeat):
            t0 = time.perf_counter()
            kernel(q, k, v)
            times.append((time.perf_counter() - t0) * 1000.0)
    return statistics.median(times), alloc.entries // repeat


def cmd_bench_attention(args) -> int:
    ns = _parse_int_list(args.N, "--N")
    ws = _parse_int_list(args.W, "--W")
    ds = _parse_int_list(args.D, "--D")
    if not args.parallel:
        try:
            from threadpoolctl import threadpool_limits

            limits = threadpool_limits(1)  # noqa: F841 - single-thread pin
        except ImportError:
            pass
    rows = []
    for n in ns:
        if n <= args.dense_ceiling:
            spec = AttentionSpec(mode="dense", heads=1)
            med, entries = _bench_kernel(
                lambda q, k, v: dense_mha(q, k, v, spec), n, args.d_model, args.repeat
            )
            est = flops_estimate(n, 1, spec, args.d_model, 1, 0)["enc_self"]
            rows.append((n, 0, 0, est, entries, med))
        for w in ws:
            for d in ds:
                spec = AttentionSpec(mode="windowed", window=w, dilation=d, heads=1)
                med, entries = _bench_kernel(
                    lambda q, k, v: restricted_mha_blocked(q, k, v, spec),
                    n, args.d_model, args.repeat,
                )
                est = flops_estimate(n, 1, spec, args.d_model, 1, 0)["enc_self"]
                rows.append((n, w, d, est, entries, med))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "bench.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["N", "W", "D", "flops_est", "peak_score_mem", "wall_ms"])
        for row in rows:
            writer.writerow([row[0], row[1], row[2], row[3], row[4], f"{row[5]:.3f}"])
    _write_run_manifest(
        out,
        "bench-attention",
        {"N": ns, "W": ws, "D": ds, "d_model": args.d_model, "repeat": args.repeat,
         "dense_ceiling": args.dense_ceiling, "parallel": args.parallel},
        [],
        [csv_path],
    )
    print(f"N,W,D,flops_est,peak_score_mem,wall_ms  ({len(rows)} rows) -> {csv_path}")
    for row in rows:
        print(f"{row[0]},{row[1]},{row[2]},{row[3]},{row[4]},{row[5]:.3f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speechsum",
        description="Long-input speech summarization toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--spec", help="JSON file of synthesis knobs")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=200)
    g.add_argument("--test", type=int, default=20)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--task", choices=sorted(TASK_ALIASES), required=True)
    t.add_argument("--config", required=True, help="JSON train/model config")
    t.add_argument("--init", help="checkpoint to fine-tune or resume from")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="decode a manifest and score it")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--task", choices=sorted(TASK_ALIASES), required=True)
    e.add_argument("--beam", type=int, default=1)
    e.add_argument("--oracle", action="store_true",
                   help="score gold targets against themselves")
    e.add_argument("--out", default="eval-out")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench-attention", help="attention cost comparison")
    b.add_argument("--N", required=True, help="comma-separated sequence lengths")
    b.add_argument("--W", required=True, help="comma-separated window sizes")
    b.add_argument("--D", required=True, help="comma-separated dilations")
    b.add_argument("--d-model", type=int, default=64)
    b.add_argument("--repeat", type=int, default=3)
    b.add_argument("--dense-ceiling", type=int, default=8192,
                   help="skip the dense kernel above this length")
    b.add_argument("--parallel", action="store_true",
                   help="leave BLAS thread pools unpinned")
    b.add_argument("--out", default="bench-out")
    b.set_defaults(func=cmd_bench_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse reports usage problems with code 2; those are user errors
        return 1 if e.code else 0
    try:
        return args.func(args)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
