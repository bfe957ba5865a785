"""Command line entry point.

Exit codes: 0 pass, 1 check failure, 2 usage error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import selfcheck as sc
from . import tensor as T
from .attention import AttentionConfig, AttnParams, Axis, build_erpe, eg_msa, flop_formula
from .data import generate_dataset, load_dataset
from .fileio import atomic_write_text, write_pgm
from .geometry import build_grid
from .metrics import METRIC_NAMES, report_csv
from .model import VARIANTS, DepthModel, ModelConfig
from .oracle import gradcheck_tensors
from .tensor import Tensor
from .training import evaluate_model, load_model, save_model, train, write_log

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("panoattn")


class UsageError(Exception):
    pass


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _csv_words(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


# -- commands ---------------------------------------------------------------


def cmd_selfcheck(args) -> int:
    results = sc.run(args.suite)
    print(sc.format_table(results))
    failed = [r for r in results if not r.ok]
    if failed:
        f = failed[0]
        print(f"first failure: {f.suite}/{f.name}: {f.detail}")
        return EXIT_FAIL
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = ModelConfig(height=args.h, width=args.w, base_channels=args.c, heads=args.heads,
                      arch=args.arch, seed=args.seed, variant=args.variant)
    model = DepthModel.create(cfg)
    rng = np.random.default_rng(args.seed)
    image = rng.uniform(size=(args.h, args.w, 3))
    target = rng.uniform(1.0, 3.0, size=(args.h, args.w, 1))
    weight = rng.normal(size=(args.h, args.w, 1))
    rep = gradcheck_tensors(lambda: T.sum(T.mul(T.sub(model(image), target), weight)), model.parameters(), h=args.step)
    groups: dict[str, list] = {}
    for r in rep:
        g = groups.setdefault(r["name"].split(".")[0], [0.0, 0, 0, 0])
        g[0] = max(g[0], r["max_rel"])
        g[1] += r["one_sided"]
        g[2] += r["kinks"]
        g[3] += r["size"]
    print("group,max_rel,one_sided,kinks,entries")
    for key, (err, one_sided, kinks, size) in groups.items():
        print(f"{key},{err:.3e},{one_sided},{kinks},{size}")
    worst = max(g[0] for g in groups.values())
    one_sided = sum(g[1] for g in groups.values())
    skipped = sum(g[2] for g in groups.values())
    verdict = "PASS" if worst < args.tol else "FAIL"
    print(f"{verdict}: max relative error {worst:.3e} (tolerance {args.tol:g}); "
          f"{one_sided} entries near an abs/clamp/max kink used a one-sided difference, "
          f"{skipped} with a kink on both sides were not compared")
    return EXIT_OK if worst < args.tol else EXIT_FAIL


def _flops_one(h, w, c, heads, axis) -> tuple[int, int]:
    cfg = AttentionConfig(heads, c // heads)
    params = AttnParams.init(c, np.random.default_rng(0))
    z = Tensor(np.random.default_rng(1).normal(size=(h, w, c)))
    with T.MacCounter() as mc:
        eg_msa(z, axis, build_grid(h, w), params, cfg)
    return flop_formula(h, w, c, axis), mc.by_label.get("attention", 0)


def cmd_flops(args) -> int:
    if args.arch:
        cfg = ModelConfig(height=args.h, width=args.w, base_channels=args.c, heads=args.heads, arch=args.arch)
        model = DepthModel.create(cfg)
        with T.MacCounter() as mc:
            model(np.zeros((args.h, args.w, 3)))
        formula, counted = model.attention_flops(), mc.by_label.get("attention", 0)
        print(f"arch={args.arch} h={args.h} w={args.w} c0={args.c}")
        for label, macs in sorted(mc.by_label.items()):
            print(f"  {label}: {macs}")
    else:
        if args.c % args.heads:
            raise UsageError(f"--c {args.c} is not divisible by --heads {args.heads}")
        formula, counted = _flops_one(args.h, args.w, args.c, args.heads, Axis.parse(args.axis))
        print(f"axis={args.axis} h={args.h} w={args.w} c={args.c}")
    ok = formula == counted
    print(f"formula={formula} counted={counted} {'MATCH' if ok else 'MISMATCH'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_gen_data(args) -> int:
    root = generate_dataset(args.out, args.scenes, args.h, args.w, args.seed, n_test=args.test)
    print(f"wrote {args.scenes} scenes to {root}")
    return EXIT_OK


def _split(samples, name):
    picked = [s for s in samples if name == "all" or s.split == name]
    if not picked:
        raise UsageError(f"dataset has no {name!r} samples")
    return picked


def _train_config(args, samples, **override) -> ModelConfig:
    h, w = samples[0].image.shape[:2]
    kw = dict(height=h, width=w, base_channels=args.c, heads=args.heads, arch=args.arch,
              seed=args.seed, rho=args.rho, variant=args.variant)
    kw.update(override)
    return ModelConfig(**kw)


def _fit(args, samples, **override):
    cfg = _train_config(args, samples, **override)
    return train(cfg, _split(samples, "train"), args.steps, lr=args.lr, batch_size=args.batch,
                 clip=args.clip if args.clip > 0 else None, log_every=args.log_every,
                 decay=args.decay)


def cmd_train_toy(args) -> int:
    samples = load_dataset(args.data)
    result = _fit(args, samples)
    save_model(result.model, args.ckpt)
    log_path = args.log or f"{args.ckpt}.log.csv"
    write_log(log_path, result.log_csv)
    print(f"step0_loss={result.losses[0]:.6f} final_loss={result.losses[-1]:.6f}")
    print(f"checkpoint {args.ckpt}, log {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.ckpt)
    rows, agg = evaluate_model(model, _split(load_dataset(args.data), args.split))
    atomic_write_text(args.report, report_csv(rows))
    print(",".join(["mean", *(f"{agg[k]:.6f}" for k in METRIC_NAMES)]))
    return EXIT_OK


def _norm01(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    return np.zeros_like(m) if hi == lo else (m - lo) / (hi - lo)


def _matrix_csv(m: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in m:
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def cmd_dump_bias(args) -> int:
    grid = build_grid(args.h, args.w)
    cfg = AttentionConfig(1, 1, rho=args.rho)
    out = Path(args.out)
    n = 0
    for axis in Axis:
        mats = build_erpe(grid, axis, cfg).matrices
        for i, m in enumerate(mats):
            stem = f"erpe_h_row{i:03d}" if axis is Axis.HORIZONTAL else "erpe_v"
            write_pgm(out / f"{stem}.pgm", _norm01(m))
            atomic_write_text(out / f"{stem}.csv", _matrix_csv(m))
            n += 1
    print(f"wrote {n} bias matrices to {out}")
    return EXIT_OK


def _comparison(args, runs) -> tuple[str, list[dict]]:
    samples = load_dataset(args.data)
    test = _split(samples, "test")
    out = []
    for label, override in runs:
        result = _fit(args, samples, **override)
        _, agg = evaluate_model(result.model, test)
        out.append({"label": label, "final_loss": result.losses[-1], **agg})
        log.info("%s abs_rel %.4f", label, agg["abs_rel"])
    return test, out


def _write_table(path, key, rows, ref_label, comment=None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([key, "final_loss", *METRIC_NAMES, "delta_abs_rel"])
    ref = next(r for r in rows if r["label"] == ref_label)
    for r in rows:
        w.writerow([r["label"], repr(r["final_loss"]), *(repr(r[k]) for k in METRIC_NAMES),
                    repr(r["abs_rel"] - ref["abs_rel"])])
    text = buf.getvalue()
    if path:
        atomic_write_text(path, text)
    return text


def cmd_sweep_rho(args) -> int:
    if not args.values:
        raise UsageError("--values must list at least one rho")
    _, rows = _comparison(args, [(repr(r), {"rho": r}) for r in args.values])
    ref = repr(0.1) if 0.1 in args.values else rows[0]["label"]
    print(_write_table(args.out, "rho", rows, ref), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    bad = [v for v in args.variants if v not in VARIANTS]
    if bad or not args.variants:
        raise UsageError(f"unknown variant(s) {bad}; choose from {', '.join(VARIANTS)}")
    _, rows = _comparison(args, [(v, {"variant": v}) for v in args.variants])
    ref = "full" if "full" in args.variants else rows[0]["label"]
    comment = ("softmax baseline is plain softmax window attention with no positional term "
               "(LePE substituted); deltas are abs_rel minus the " + ref + " row")
    print(_write_table(args.out, "variant", rows, ref, comment), end="")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def _model_flags(p, arch="EE-E-EE"):
    p.add_argument("--arch", default=arch)
    p.add_argument("--c", type=int, default=16, help="base channel count C_0")
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)


def _train_flags(p):
    _model_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--decay", action=argparse.BooleanOptionalAction, default=True,
                   help="anneal lr linearly to zero over the run")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--clip", type=float, default=1.0, help="global gradient-norm clip; 0 disables")
    p.add_argument("--rho", type=float, default=0.1)
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--log-every", type=int, default=100)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="panoattn", description="Geometry-biased panorama attention toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("selfcheck", help="run built-in property suites")
    p.add_argument("--suite", action="append", choices=sc.SUITES)
    p.set_defaults(fn=cmd_selfcheck)

    p = sub.add_parser("gradcheck", help="end-to-end finite-difference gradient audit")
    _model_flags(p, arch="E-E-E")
    p.set_defaults(c=4)
    p.add_argument("--h", type=int, default=8)
    p.add_argument("--w", type=int, default=16)
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("flops", help="attention MAC count against the closed form")
    p.add_argument("--h", type=int, required=True)
    p.add_argument("--w", type=int, required=True)
    p.add_argument("--c", type=int, default=16)
    p.add_argument("--heads", type=int, default=4)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--axis", choices=["h", "v"])
    g.add_argument("--arch")
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("gen-data", help="render a synthetic panorama dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--h", type=int, default=32)
    p.add_argument("--w", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test", type=int, default=None, help="test scenes (default: one fifth)")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-toy", help="train the toy depth model")
    _train_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--log", default=None, help="loss log CSV (default: <ckpt>.log.csv)")
    p.set_defaults(fn=cmd_train_toy)

    p = sub.add_parser("eval", help="aligned depth metrics for a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("dump-bias", help="write every position-bias matrix as PGM and CSV")
    p.add_argument("--h", type=int, required=True)
    p.add_argument("--w", type=int, required=True)
    p.add_argument("--rho", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_dump_bias)

    p = sub.add_parser("sweep-rho", help="train one model per bias level")
    _train_flags(p)
    p.add_argument("--values", type=_csv_floats, required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_sweep_rho)

    p = sub.add_parser("ablate", help="train one model per attention variant")
    _train_flags(p)
    p.add_argument("--variants", type=_csv_words, default=list(VARIANTS))
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_ablate)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
