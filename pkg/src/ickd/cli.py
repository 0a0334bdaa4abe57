"""Command-line front end: ``ickd <command> [--config PATH] [--set k=v ...]``.

Exit codes: 0 success, 1 failed verification or other run failure,
2 configuration / malformed input, 3 numeric instability (including an
all-zero feature row in a bank), 4 missing input.
"""
from __future__ import annotations

import argparse
import hashlib
import io
import json
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, config, verify
from .data import gen_blobs, gen_spirals, load_dataset, stratified_split
from .errors import ConfigError, DegenerateVectorError, FormatError, IckdError, InvalidArgumentError, NumericInstabilityError
from .net import MlpArchitecture, load_checkpoint, save_checkpoint
from .train import (
    METRICS_HEADER,
    distill_offline,
    distill_online,
    distill_teacher_free,
    train_teacher,
    write_metrics,
)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 1, 2, 3, 4

SERIES = ("ce", "kd", "picd", "nicd", "total", "train_acc", "test_acc", "wall_ms")
REFERENCE_OPTIMA = {"k_positive": 100, "beta1": 1.0, "beta2": 4.0, "gamma_picd": 2.0, "gamma_nicd": 10.0}
SWEEP_AXES = tuple(REFERENCE_OPTIMA)


class MissingInput(Exception):
    pass


class _Ctx:
    def __init__(self, args, cfg):
        self.args = args
        self.cfg = cfg
        self.out = Path(args.out)
        self.quiet = args.quiet

    def say(self, msg):
        if not self.quiet:
            print(msg, file=sys.stderr)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(path, what):
    if not path or not Path(path).is_file():
        raise MissingInput(f"{what} not found: {path}")
    return Path(path)


def load_data(cfg: config.RunConfig):
    """Build (train, test, input checksums) from the data section."""
    d = cfg.data
    inputs = {}
    if d.source == "file":
        path = _require(d.path, "dataset")
        ds = load_dataset(path)
        inputs["dataset"] = {"path": str(path), "sha256": _sha256(path)}
    elif d.source == "spirals":
        ds = gen_spirals(d.classes, d.per_class, d.noise, d.seed)
    else:
        ds = gen_blobs(d.classes, d.per_class, d.dim, d.spread, d.seed)
    if d.source != "file":
        inputs["dataset"] = {"generated": d.source, "sha256": ds.checksum()}
    train, test = stratified_split(ds, d.test_fraction, d.seed)
    return train, test, inputs


def _arch(ds, hidden):
    return MlpArchitecture((ds.dim, *hidden, ds.class_count))


def _manifest(ctx: _Ctx, command, inputs, outputs):
    ctx.out.mkdir(parents=True, exist_ok=True)
    doc = {
        "tool": "ickd",
        "version": __version__,
        "command": command,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config": config.snapshot(ctx.cfg),
        "inputs": inputs,
        "outputs": sorted(str(o) for o in outputs),
    }
    with open(ctx.out / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _teacher(ctx: _Ctx, train, test, inputs, cfg=None):
    """Load the configured teacher checkpoint or train one; returns (model, metrics or None)."""
    cfg = cfg or ctx.cfg
    ckpt = cfg.model.teacher_checkpoint
    if ckpt:
        path = _require(ckpt, "teacher checkpoint")
        inputs.setdefault("teacher_checkpoint", {"path": str(path), "sha256": _sha256(path)})
        model = load_checkpoint(path)
        w = model.architecture.layer_widths
        if w[0] != train.dim or w[-1] != train.class_count:
            raise InvalidArgumentError(f"teacher checkpoint widths {w} do not fit the data")
        return model, None
    return train_teacher(_arch(train, cfg.model.teacher_hidden), train, test, cfg.train)


def _teacher_inputs(cfg, inputs):
    ckpt = cfg.model.teacher_checkpoint
    if ckpt:
        path = _require(ckpt, "teacher checkpoint")
        inputs["teacher_checkpoint"] = {"path": str(path), "sha256": _sha256(path)}


def cmd_train_teacher(ctx: _Ctx) -> int:
    ctx.cfg = config.with_train(ctx.cfg, mode="ce_only")
    train, test, inputs = load_data(ctx.cfg)
    _manifest(ctx, "train-teacher", inputs, ["teacher.ckpt", "metrics.csv"])
    model, metrics = train_teacher(_arch(train, ctx.cfg.model.teacher_hidden), train, test, ctx.cfg.train)
    save_checkpoint(model, ctx.out / "teacher.ckpt")
    write_metrics(metrics, ctx.out / "metrics.csv")
    ctx.say(f"teacher test_acc={metrics.final_test_acc:.4f}")
    return EXIT_OK


def cmd_distill(ctx: _Ctx) -> int:
    ctx.cfg = config.with_train(ctx.cfg, mode="offline")
    train, test, inputs = load_data(ctx.cfg)
    _teacher_inputs(ctx.cfg, inputs)
    outputs = ["student.ckpt", "metrics.csv"]
    if not ctx.cfg.model.teacher_checkpoint:
        outputs += ["teacher.ckpt", "teacher_metrics.csv"]
    _manifest(ctx, "distill", inputs, outputs)
    teacher, tmetrics = _teacher(ctx, train, test, inputs)
    if tmetrics is not None:
        save_checkpoint(teacher, ctx.out / "teacher.ckpt")
        write_metrics(tmetrics, ctx.out / "teacher_metrics.csv")
    student, metrics = distill_offline(teacher, _arch(train, ctx.cfg.model.student_hidden), train, test,
                                       ctx.cfg.train)
    save_checkpoint(student, ctx.out / "student.ckpt")
    write_metrics(metrics, ctx.out / "metrics.csv")
    ctx.say(f"student ({ctx.cfg.train.ablation}) test_acc={metrics.final_test_acc:.4f}")
    return EXIT_OK


def cmd_online(ctx: _Ctx) -> int:
    ctx.cfg = config.with_train(ctx.cfg, mode="online")
    train, test, inputs = load_data(ctx.cfg)
    outputs = ["student1.ckpt", "student2.ckpt", "metrics_student1.csv", "metrics_student2.csv"]
    _manifest(ctx, "online", inputs, outputs)
    m = ctx.cfg.model
    res = distill_online(_arch(train, m.student_hidden), _arch(train, m.peer_hidden), train, test, ctx.cfg.train)
    save_checkpoint(res.student1, ctx.out / "student1.ckpt")
    save_checkpoint(res.student2, ctx.out / "student2.ckpt")
    write_metrics(res.metrics1, ctx.out / "metrics_student1.csv")
    write_metrics(res.metrics2, ctx.out / "metrics_student2.csv")
    ctx.say(f"student1 test_acc={res.metrics1.final_test_acc:.4f} student2 test_acc={res.metrics2.final_test_acc:.4f}")
    return EXIT_OK


def cmd_teacher_free(ctx: _Ctx) -> int:
    ctx.cfg = config.with_train(ctx.cfg, mode="teacher_free")
    train, test, inputs = load_data(ctx.cfg)
    outputs = ["baseline.ckpt", "baseline_metrics.csv", "student.ckpt", "metrics.csv", "summary.csv"]
    _manifest(ctx, "teacher-free", inputs, outputs)
    res = distill_teacher_free(_arch(train, ctx.cfg.model.student_hidden), train, test, ctx.cfg.train)
    save_checkpoint(res.baseline, ctx.out / "baseline.ckpt")
    save_checkpoint(res.student, ctx.out / "student.ckpt")
    write_metrics(res.baseline_metrics, ctx.out / "baseline_metrics.csv")
    write_metrics(res.metrics, ctx.out / "metrics.csv")
    b, s = res.baseline_metrics.final_test_acc, res.metrics.final_test_acc
    with open(ctx.out / "summary.csv", "w", newline="\n") as fh:
        fh.write("model,test_acc\n")
        fh.write(f"baseline,{b!r}\nteacher_free,{s!r}\n")
    ctx.say(f"baseline test_acc={b:.4f} teacher-free test_acc={s:.4f}")
    return EXIT_OK


def _weighting(loss, code):
    return replace(loss, use_a_weights=code in ("ab", "a"), use_b_weights=code in ("ab", "b"))


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def cmd_ablate(ctx: _Ctx) -> int:
    ctx.cfg = config.with_train(ctx.cfg, mode="offline")
    cfg = ctx.cfg
    train, test, inputs = load_data(cfg)
    _teacher_inputs(cfg, inputs)
    seeds = [cfg.train.seed + i for i in range(cfg.ablate.seeds)]
    cells = [(r, w) for r in cfg.ablate.rows for w in cfg.ablate.weightings]
    outputs = ["summary.csv"] + [f"cells/{r}-{w}/seed{s}.csv" for r, w in cells for s in seeds]
    _manifest(ctx, "ablate", inputs, outputs)
    student_arch = _arch(train, cfg.model.student_hidden)
    accs = {c: [] for c in cells}
    for seed in seeds:
        tcfg = replace(cfg.train, seed=seed)
        teacher, _ = _teacher(ctx, train, test, inputs, replace(cfg, train=tcfg))
        for row, w in cells:
            run_cfg = replace(tcfg, ablation=row, loss=_weighting(tcfg.loss, w))
            _, metrics = distill_offline(teacher, student_arch, train, test, run_cfg)
            cell_dir = ctx.out / "cells" / f"{row}-{w}"
            cell_dir.mkdir(parents=True, exist_ok=True)
            write_metrics(metrics, cell_dir / f"seed{seed}.csv")
            accs[(row, w)].append(metrics.final_test_acc)
            ctx.say(f"seed {seed} {row:8s} weights={w:4s} test_acc={metrics.final_test_acc:.4f}")
    text = ablation_summary(accs)
    (ctx.out / "summary.csv").write_text(text)
    if not ctx.quiet:
        print(text, end="")
    return EXIT_OK


def ablation_summary(accs: dict) -> str:
    """CSV of mean/std per (ablation, weighting) cell plus the signed delta to kd_only."""
    out = io.StringIO()
    out.write("ablation,weighting,seeds,mean_test_acc,std_test_acc,delta_vs_kd_only\n")
    for (row, w), values in accs.items():
        mean, std = mean_std(values)
        base = accs.get(("kd_only", w))
        delta = f"{mean - mean_std(base)[0]:+.6f}" if base else ""
        out.write(f"{row},{w},{len(values)},{mean:.6f},{std:.6f},{delta}\n")
    return out.getvalue()


def cmd_verify(ctx: _Ctx) -> int:
    results, measured = verify.run_all(ctx.args.seed or 0)
    print(verify.format_table(results))
    print(f"lsr_kd constant={measured['lsr_kd_constant']!r} spread={measured['lsr_kd_spread']:.3e}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("FAILED: " + ", ".join(failed), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def read_metrics(path) -> list[list[str]]:
    """Rows of a metrics CSV (excluding header and trailer), validated."""
    path = Path(path)
    if not path.is_file():
        raise MissingInput(f"metrics file not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise FormatError(f"{path}: unexpected header", 0)
    n_cols = len(METRICS_HEADER.split(","))
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != n_cols:
            raise FormatError(f"{path}:{lineno}: expected {n_cols} fields, got {len(parts)}", lineno)
        try:
            int(parts[0])
            [float(v) for i, v in enumerate(parts[1:], start=1) if i != 8]
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric field", lineno) from None
        rows.append(parts)
    return rows


def plot_rows(paths) -> str:
    """Long-format ``run,epoch,series,value`` table for the given metrics files."""
    cols = METRICS_HEADER.split(",")
    out = io.StringIO()
    out.write("run,epoch,series,value\n")
    for p in paths:
        run = Path(p).with_suffix("").as_posix()
        for parts in read_metrics(p):
            rec = dict(zip(cols, parts))
            for s in SERIES:
                out.write(f"{run},{rec['epoch']},{s},{rec[s]}\n")
    return out.getvalue()


def _sweep_value_cfg(train_cfg, axis, value):
    if axis in ("k_positive", "beta1", "beta2"):
        return replace(train_cfg, retrieval=replace(train_cfg.retrieval, **{axis: value}))
    return replace(train_cfg, loss=replace(train_cfg.loss, **{axis: value}))


def run_sweep(cfg: config.RunConfig, train, test, say=lambda m: None):
    """One-axis-at-a-time sweep around the base config.

    Returns ``(curve rows (axis, value, seed, test_acc), summary rows)``;
    ties in the argmax go to the first grid value.
    """
    base = replace(cfg.train, ablation="full")
    seeds = [base.seed + i for i in range(cfg.sweep.seeds)]
    student_arch = _arch(train, cfg.model.student_hidden)
    teachers = {s: train_teacher(_arch(train, cfg.model.teacher_hidden), train, test, replace(base, seed=s))[0]
                for s in seeds}
    curve, summary = [], []
    for axis in SWEEP_AXES:
        means = []
        for value in getattr(cfg.sweep, axis):
            accs = []
            for s in seeds:
                run_cfg = _sweep_value_cfg(replace(base, seed=s), axis, value)
                _, m = distill_offline(teachers[s], student_arch, train, test, run_cfg)
                accs.append(m.final_test_acc)
                curve.append((axis, value, s, m.final_test_acc))
            means.append(float(np.mean(accs)))
            say(f"sweep {axis}={config._fmt(value)} mean test_acc={means[-1]:.4f}")
        best = int(np.argmax(means))
        summary.append((axis, getattr(cfg.sweep, axis)[best], means[best], REFERENCE_OPTIMA[axis]))
    return curve, summary


def _sweep_text(curve, summary):
    c = io.StringIO()
    c.write("axis,value,seed,test_acc\n")
    for axis, value, seed, acc in curve:
        c.write(f"{axis},{config._fmt(value)},{seed},{acc!r}\n")
    s = io.StringIO()
    s.write("axis,argmax,mean_test_acc,reference_optimum\n")
    for axis, value, acc, ref in summary:
        s.write(f"{axis},{config._fmt(value)},{acc:.6f},{config._fmt(ref)}\n")
    return c.getvalue(), s.getvalue()


def cmd_sweep(ctx: _Ctx) -> int:
    ctx.cfg = config.with_train(ctx.cfg, mode="offline")
    train, test, inputs = load_data(ctx.cfg)
    _manifest(ctx, "sweep", inputs, ["sweep.csv", "sweep_summary.csv"])
    curve, summary = run_sweep(ctx.cfg, train, test, ctx.say)
    curve_text, summary_text = _sweep_text(curve, summary)
    (ctx.out / "sweep.csv").write_text(curve_text)
    (ctx.out / "sweep_summary.csv").write_text(summary_text)
    if not ctx.quiet:
        print(summary_text, end="")
    return EXIT_OK


def cmd_plotdata(ctx: _Ctx) -> int:
    if ctx.args.sweep:
        return cmd_sweep(ctx)
    if not ctx.args.metrics:
        raise ConfigError("plotdata needs at least one metrics file (or --sweep)")
    text = plot_rows(ctx.args.metrics)
    if ctx.args.out_given:
        ctx.out.mkdir(parents=True, exist_ok=True)
        (ctx.out / "plotdata.csv").write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "train-teacher": (cmd_train_teacher, "train a teacher with plain cross-entropy"),
    "distill": (cmd_distill, "offline distillation from a (trained or loaded) teacher"),
    "online": (cmd_online, "two peers trained jointly with a per-epoch bank"),
    "teacher-free": (cmd_teacher_free, "distil a CE baseline into a fresh copy of itself"),
    "ablate": (cmd_ablate, "loss-term and weighting ablation grid over seeds"),
    "verify": (cmd_verify, "run the invariant self-check battery"),
    "plotdata": (cmd_plotdata, "long-format plot data from metrics files, or --sweep"),
    "sweep": (cmd_sweep, "one-axis hyperparameter sweep with argmax report"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="run configuration file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--seed", type=int, help="override train.seed")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")
    parser = argparse.ArgumentParser(prog="ickd", description="In-context knowledge distillation toolkit.")
    parser.add_argument("--version", action="version", version=f"ickd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "plotdata":
            p.add_argument("metrics", nargs="*", help="metrics CSV files")
            p.add_argument("--sweep", action="store_true", help="run the hyperparameter sweep instead")
    return parser


def _load_config(args):
    text = ""
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise MissingInput(f"config file not found: {path}")
        text = path.read_text()
    return config.load(text, args.overrides, args.seed)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    args.out_given = args.out is not None
    if args.out is None:
        args.out = str(Path("ickd-out") / args.command)
    handler = COMMANDS[args.command][0]
    try:
        cfg, _ = _load_config(args)
        return handler(_Ctx(args, cfg))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingInput as e:
        print(f"missing input: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericInstabilityError, DegenerateVectorError) as e:
        print(f"numeric instability: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FormatError as e:
        print(f"malformed input: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InvalidArgumentError as e:
        print(f"invalid argument: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except IckdError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
