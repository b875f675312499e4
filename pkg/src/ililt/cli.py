"""Command-line entry point: ``ililt <subcommand> [--config cfg.json] [--seed N] ...``.

Every subcommand writes its fully resolved configuration next to its
outputs, holds a lock file on its output directory while running and
removes whatever it created if it fails. Failures print one JSON line
prefixed with ``error:`` on stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict
from typing import List, Optional

import numpy as np

log = logging.getLogger("ililt")

LOCK_NAME = ".ililt.lock"


class CliError(Exception):
    pass


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise CliError(f"{path}: config must be a JSON object")
    return cfg


def _write_config(out_dir: str, command: str, resolved: dict) -> None:
    with open(os.path.join(out_dir, f"{command}.config.json"), "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True, default=str)


@contextmanager
def _guarded(out_dir: str):
    """Lock ``out_dir`` for the duration; on failure delete everything new in it."""
    created = not os.path.isdir(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    before = set(os.listdir(out_dir))
    lock = os.path.join(out_dir, LOCK_NAME)
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"{out_dir} is locked by another ililt process ({LOCK_NAME} exists)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    ok = False
    try:
        yield
        ok = True
    finally:
        if not ok:
            for name in set(os.listdir(out_dir)) - before - {LOCK_NAME}:
                path = os.path.join(out_dir, name)
                shutil.rmtree(path) if os.path.isdir(path) and not os.path.islink(path) else os.unlink(path)
        os.unlink(lock)
        if not ok and created and not os.listdir(out_dir):
            os.rmdir(out_dir)


def _pick(args, cfg: dict, key: str, default):
    """CLI flag beats config file beats default."""
    val = getattr(args, key, None)
    if val is not None:
        return val
    return cfg.get(key, default)


# -------------------------------------------------------------- subcommands


def cmd_gen_kernels(args, cfg):
    from .litho import save_kernels, synth_kernels

    resolved = {
        "seed": args.seed if args.seed is not None else cfg.get("seed", 0),
        "n": _pick(args, cfg, "n", 4),
        "size": _pick(args, cfg, "size", 35),
        "sigma_nm": _pick(args, cfg, "sigma_nm", 32.0),
        "pixel_size": _pick(args, cfg, "pixel_size", 8.0),
    }
    out_dir = os.path.dirname(os.path.abspath(args.out))
    with _guarded(out_dir):
        ks = synth_kernels(**resolved)
        save_kernels(ks, args.out)
        _write_config(out_dir, "gen-kernels", resolved)
    print(json.dumps({"kernels": args.out, "count": ks.count, "size": ks.size}))


def cmd_gen_dataset(args, cfg):
    from .dataset import TileBounds, build_dataset
    from .ilt import IltConfig
    from .litho import load_kernels, synth_kernels

    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    n = _pick(args, cfg, "n", 200)
    bounds = TileBounds(**cfg.get("bounds", {}))
    ilt_cfg = IltConfig.from_dict(cfg.get("ilt", {"stop_rel_tol": 1e-3}))
    with _guarded(args.out):
        ks = load_kernels(args.kernels) if args.kernels else synth_kernels(seed=seed)
        man = build_dataset(n, seed, ks, ilt_cfg, args.out, bounds, n_jobs=_pick(args, cfg, "jobs", 1))
        _write_config(
            args.out,
            "gen-dataset",
            {"seed": seed, "n": n, "bounds": asdict(bounds), "ilt": ilt_cfg.to_dict(), "kernels": args.kernels},
        )
    print(json.dumps({"dataset": args.out, "tiles": len(man.entries), "flagged": sum(e.flagged for e in man.entries)}))


def cmd_simulate(args, cfg):
    from .litho import ProcessCondition, load_kernels, resist_threshold, simulate_intensity
    from .raster import GrayImage, load_png, save_png

    ks = load_kernels(args.kernels)
    pc = ProcessCondition(i_th=_pick(args, cfg, "i_th", 0.225), dose_scale=_pick(args, cfg, "dose", 1.0))
    mask = load_png(args.mask, ks.pixel_size)
    with _guarded(args.out):
        inten = simulate_intensity(mask.data, ks)
        save_png(GrayImage(np.clip(inten, 0.0, 1.0), ks.pixel_size), os.path.join(args.out, "intensity.png"))
        save_png(GrayImage(resist_threshold(inten, pc), ks.pixel_size), os.path.join(args.out, "wafer.png"))
        _write_config(args.out, "simulate", {"mask": args.mask, "kernels": args.kernels, **asdict(pc)})
    print(json.dumps({"intensity": os.path.join(args.out, "intensity.png"), "max_intensity": float(inten.max())}))


def cmd_ilt(args, cfg):
    from .ilt import IltConfig, ilt_optimize
    from .litho import load_kernels
    from .raster import BinaryImage, load_png, save_png

    ks = load_kernels(args.kernels)
    d = dict(cfg)
    d.pop("seed", None)
    if args.iters is not None:
        d["max_iters"] = args.iters
    ilt_cfg = IltConfig.from_dict(d)
    design = load_png(args.design, ks.pixel_size)
    design = BinaryImage((design.data > 0.5).astype(np.float64), ks.pixel_size)
    with _guarded(args.out):
        mask, trace = ilt_optimize(design, ks, ilt_cfg)
        save_png(mask, os.path.join(args.out, "mask.png"))
        trace.to_csv(os.path.join(args.out, "trace.csv"))
        for it, snap in trace.snapshots:
            save_png(snap, os.path.join(args.out, f"snapshot_{it:05d}.png"))
        _write_config(args.out, "ilt", ilt_cfg.to_dict())
    print(json.dumps({"mask": os.path.join(args.out, "mask.png"), "best_iter": trace.best_iter, "best_loss": trace.best_loss}))


def _train_config(args, cfg):
    from .trainer import TrainConfig

    d = dict(cfg)
    for key in ("T", "epochs", "batch_size", "lr"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    if args.seed is not None:
        d["seed"] = args.seed
    if args.untied:
        d["weight_tying"] = False
    return TrainConfig.from_dict(d)


def cmd_train(args, cfg):
    from .dataset import load_dataset
    from .model import save_operator
    from .trainer import train

    tcfg = _train_config(args, cfg)
    ds = load_dataset(args.dataset)
    with _guarded(args.out):
        tcfg = type(tcfg).from_dict({**tcfg.to_dict(), "checkpoint_dir": os.path.join(args.out, "checkpoints")})
        train_ds, val_ds = ds.split(_pick(args, cfg, "val_fraction", 0.1), seed=tcfg.seed) if args.validate else (ds, None)
        op, report = train(train_ds, tcfg, val=val_ds)
        final = os.path.join(args.out, "model.bin")
        save_operator(final, op, {"T": tcfg.T, "train_config": json.loads(json.dumps(tcfg.to_dict(), default=str))})
        report.to_json(os.path.join(args.out, "report.json"))
        _write_config(args.out, "train", tcfg.to_dict())
    print(json.dumps({"model": final, "epoch_loss": report.epoch_loss, "params": report.n_params}))


def _infer_config(args, cfg, kernels, header):
    from .litho import ProcessCondition
    from .model import InferConfig, LithoContext

    t_max = _pick(args, cfg, "t_max", header.get("T", 4))
    tol = _pick(args, cfg, "residual_tol", 0.0)
    return InferConfig(int(t_max), float(tol), LithoContext(kernels, ProcessCondition(i_th=_pick(args, cfg, "i_th", 0.225))))


def cmd_infer(args, cfg):
    from .dataset import load_dataset
    from .litho import load_kernels
    from .model import infer, load_operator
    from .raster import BinaryImage, load_png, save_png

    op, header = load_operator(args.ckpt)
    if args.design:
        if not args.kernels:
            raise CliError("--design needs --kernels")
        ks = load_kernels(args.kernels)
        designs = [(os.path.splitext(os.path.basename(args.design))[0], load_png(args.design, ks.pixel_size))]
    elif args.dataset:
        ds = load_dataset(args.dataset)
        ks = ds.kernels
        designs = [
            (os.path.splitext(os.path.basename(e.design))[0], BinaryImage(ds.designs[i], ds.pixel_size))
            for i, e in enumerate(ds.manifest.entries)
        ]
    else:
        raise CliError("one of --design or --dataset is required")
    icfg = _infer_config(args, cfg, ks, header)
    residuals = {}
    with _guarded(args.out):
        for name, design in designs:
            mask, res = infer(BinaryImage((design.data > 0.5).astype(np.float64), design.pixel_size), op, icfg)
            save_png(mask, os.path.join(args.out, f"{name}_mask.png"))
            residuals[name] = res
        with open(os.path.join(args.out, "residuals.json"), "w") as fh:
            json.dump(residuals, fh, indent=1)
        _write_config(args.out, "infer", {"ckpt": args.ckpt, "t_max": icfg.t_max, "residual_tol": icfg.residual_tol})
    print(json.dumps({"masks": len(designs), "out": args.out}))


def cmd_eval(args, cfg):
    from .dataset import load_dataset
    from .metrics import EpeConfig
    from .model import load_operator
    from .trainer import evaluate, write_metrics_csv

    op, header = load_operator(args.ckpt)
    ds = load_dataset(args.dataset)
    icfg = _infer_config(args, cfg, ds.kernels, header)
    epe_cfg = EpeConfig(**cfg.get("epe", {}))
    out_dir = os.path.dirname(os.path.abspath(args.out))
    with _guarded(out_dir):
        summary = evaluate(ds, op, icfg, epe_cfg, dose_delta=_pick(args, cfg, "dose_delta", 0.02))
        write_metrics_csv(summary, args.out)
        base = os.path.splitext(args.out)[0]
        with open(base + ".summary.json", "w") as fh:
            json.dump({k: v for k, v in summary.items() if k != "rows"}, fh, indent=2)
    print(json.dumps({k: summary[k] for k in ("EPE", "PVB", "Throughput")}))


def cmd_gradcheck(args, cfg):
    from .checks import run_gradcheck

    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    tol = _pick(args, cfg, "tol", 1e-5)
    errs = run_gradcheck(seed=seed)
    worst = 0.0
    for name, err in errs.items():
        status = "ok" if err < tol else "FAIL"
        print(f"{name:24s} {err:.3e} {status}")
        worst = max(worst, err)
    print(f"max {worst:.3e} tol {tol:.1e}")
    if worst >= tol:
        raise CliError(f"gradcheck failed: max relative error {worst:.3e} >= {tol:.1e}")


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ililt", description="Lithography simulation, ILT and learned fixed-point mask optimisation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.set_defaults(fn=fn)
        return p

    p = add("gen-kernels", cmd_gen_kernels, "write a synthetic SOCS kernel set")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--sigma-nm", dest="sigma_nm", type=float)
    p.add_argument("--pixel-size", dest="pixel_size", type=float)

    p = add("gen-dataset", cmd_gen_dataset, "generate tiles and golden ILT masks")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--kernels")
    p.add_argument("--jobs", type=int)

    p = add("simulate", cmd_simulate, "simulate a mask: intensity.png and wafer.png")
    p.add_argument("--mask", required=True)
    p.add_argument("--kernels", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--dose", type=float)
    p.add_argument("--i-th", dest="i_th", type=float)

    p = add("ilt", cmd_ilt, "numerical ILT on one design")
    p.add_argument("--design", required=True)
    p.add_argument("--kernels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int)

    p = add("train", cmd_train, "train the update operator")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--T", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--untied", action="store_true", help="L2O mode: one parameter set per step")
    p.add_argument("--validate", action="store_true", help="hold out a seeded validation split")

    for name, fn, help_ in (("infer", cmd_infer, "optimise masks with a trained operator"), ("eval", cmd_eval, "score a trained operator")):
        p = add(name, fn, help_)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--dataset", required=(name == "eval"))
        p.add_argument("--out", required=True)
        p.add_argument("--t-max", dest="t_max", type=int)
        p.add_argument("--residual-tol", dest="residual_tol", type=float)
        if name == "infer":
            p.add_argument("--design")
            p.add_argument("--kernels")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every autodiff primitive")
    p.add_argument("--tol", type=float)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        cfg = _load_config(args.config)
        args.fn(args, cfg)
    except Exception as err:  # noqa: BLE001 - every failure becomes one parseable line
        line = {"command": args.command, "type": type(err).__name__, "message": str(err)}
        print("error: " + json.dumps(line), file=sys.stderr)
        return 1
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
    return 0


if __name__ == "__main__":
    sys.exit(main())
