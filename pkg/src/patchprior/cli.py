"""Command-line entry point: ``patchprior <subcommand> [options]``.

Progress goes to stderr; data goes to files.  Failures print one line
``error: <kind>: <message>`` to stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pt1
from .baselines import METHODS as BASELINE_METHODS
from .baselines import preset, run_baseline
from .config import ConfigError, RunConfig, write_resolved
from .harness import ExperimentPlan, image_seed, replay, run_experiment, run_memorization, run_overfitting, write_pgm
from .metrics import psnr, ssim
from .model import Architecture, build_model, load_checkpoint, save_checkpoint
from .operators import (
    TASKS,
    Measurement,
    NoiseModel,
    load_measurement,
    make_task_operator,
    save_measurement,
    simulate,
)
from .phantoms import FAMILIES, OOD_SPEC_DEFAULTS, load_dataset, make_dataset, save_dataset
from .solvers import reconstruct_fixed_prior, reconstruct_self_supervised, sample_unconditional, task_config
from .training import finetune, train

RESOLVED_NAME = "resolved_config.json"


class ReplayMismatch(RuntimeError):
    """A replayed run produced files whose hashes differ from the manifest."""


def _resolved(out: Path, cfg: RunConfig, args, **sections) -> None:
    """Write the effective configuration plus the subcommand and its arguments (see ``rerun``)."""
    doc = cfg.resolved(**sections)
    for name, raw in cfg.sections.items():
        doc.setdefault(name, raw)
    doc["command"] = args.command
    doc["args"] = {k: v for k, v in vars(args).items() if k not in ("func", "config", "command")}
    write_resolved(out / RESOLVED_NAME, doc)


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, cfg: RunConfig) -> int:
    return cfg.seed if args.seed is None else args.seed


def _image(path: str, index: int | None) -> np.ndarray:
    """A (C, N, N) image from a PT1 image file or one entry of a dataset file."""
    arr = pt1.read(path)
    if arr.ndim == 4:
        return arr[index or 0]
    if arr.ndim == 2:
        return arr[None]
    if arr.ndim == 3:
        return arr
    raise ValueError(f"{path}: expected an image or dataset tensor, got rank {arr.ndim}")


def _measurement(args, seed: int) -> tuple[Measurement, np.ndarray | None]:
    """Load ``--measurement`` or simulate one from ``--simulate-from``; returns (m, ground truth)."""
    if args.measurement:
        return load_measurement(args.measurement), None
    if not args.simulate_from:
        raise ValueError("give --measurement or --simulate-from")
    x = _image(args.simulate_from, args.index)
    op = make_task_operator(args.task, x.shape[-1], x.shape[0])
    sigma = args.sigma_meas if args.sigma_meas is not None else (0.0 if args.task.startswith("ct") else 0.01)
    return simulate(x, op, NoiseModel(sigma, seed)), x


def _save_image(out: Path, name: str, img: np.ndarray) -> None:
    pt1.write(out / f"{name}.pt1", img)
    write_pgm(out / (f"{name}.pgm" if img.shape[0] == 1 else f"{name}.ppm"), img)


def _metrics(out: Path, img: np.ndarray, truth: np.ndarray | None) -> None:
    if truth is not None:
        (out / "metrics.json").write_text(json.dumps({"psnr": psnr(img, truth), "ssim": ssim(img, truth)}, indent=2))


# ------------------------------------------------------------- subcommands


def cmd_gen_data(args, cfg: RunConfig) -> None:
    spec_kw = dict(OOD_SPEC_DEFAULTS) if args.family == "ood" else {}
    spec_kw.update(cfg.sections.get("phantoms", {}))
    if args.image_size:
        spec_kw["image_size"] = args.image_size
    cfg.sections["phantoms"] = spec_kw
    spec = cfg.section("phantoms", seed=_seed(args, cfg))
    ds = make_dataset(args.family, spec, args.n, args.start)
    out = _out_dir(args, cfg)
    save_dataset(ds, out / f"{args.family}.pt1")
    _resolved(out, cfg, args, phantoms=spec)


def cmd_train(args, cfg: RunConfig) -> None:
    seed = _seed(args, cfg)
    tcfg = cfg.section("train", steps=args.steps, seed=seed, checkpoint_every=args.checkpoint_every)
    images = load_dataset(args.data).images
    if args.resume:
        model = load_checkpoint(args.resume)
    else:
        size = images.shape[-1] if args.kind == "whole" else tcfg.inference_patch
        model = build_model(Architecture(kind=args.kind, image_channels=images.shape[1], input_size=size, seed=seed))
    out = _out_dir(args, cfg)
    _resolved(out, cfg, args, train=tcfg)
    train(model, images, tcfg, out)
    save_checkpoint(model, out / "final.ckpt")


def cmd_finetune(args, cfg: RunConfig) -> None:
    seed = _seed(args, cfg)
    base = cfg.sections.get("train", {})
    tcfg = cfg.section("train", **{k: v for k, v in {"patch_sizes": (16, 12, 8), "patch_probs": (0.5, 0.3, 0.2), "lr": 1e-4}.items() if k not in base},
                       steps=args.steps, seed=seed, checkpoint_every=args.checkpoint_every)
    out = _out_dir(args, cfg)
    _resolved(out, cfg, args, train=tcfg)
    series = finetune(args.checkpoint, load_dataset(args.data).images, tcfg, out)
    save_checkpoint(series[-1], out / "final.ckpt")


def cmd_reconstruct(args, cfg: RunConfig) -> None:
    seed = _seed(args, cfg)
    m, truth = _measurement(args, image_seed(seed, 1))
    task_over = {k: v for k, v in cfg.sections.get("solver", {}).items()}
    for k in ("T", "K", "eps", "gamma", "refine_iters", "refine_lr", "noise_convention"):
        v = getattr(args, k)
        if v is not None:
            task_over[k] = v
    scfg = task_config(args.task, naive=args.method == "naive", **{**task_over, "seed": seed})
    model = load_checkpoint(args.checkpoint)
    fn = reconstruct_self_supervised if args.method == "ss" else reconstruct_fixed_prior
    out = _out_dir(args, cfg)
    _resolved(out, cfg, args, solver=scfg)
    save_measurement(m, out / "measurement.pt1")
    res = fn(m.y, m.op, model, scfg)
    _save_image(out, "reconstruction", res.image)
    res.write_diagnostics(out / "diagnostics.csv")
    _metrics(out, res.image, truth)


def cmd_baseline(args, cfg: RunConfig) -> None:
    seed = _seed(args, cfg)
    m, truth = _measurement(args, image_seed(seed, 1))
    bcfg = preset(args.task, args.method, **cfg.sections.get("baseline", {}))
    out = _out_dir(args, cfg)
    _resolved(out, cfg, args, baseline=bcfg)
    img = run_baseline(m.y, m.op, bcfg)
    _save_image(out, "reconstruction", img)
    _metrics(out, img, truth)


def cmd_sample(args, cfg: RunConfig) -> None:
    from .plotting import sample_grid

    seed = _seed(args, cfg)
    over = dict(cfg.sections.get("solver", {}))
    over.update(sigma_max=args.sigma_max, sigma_min=args.sigma_min, seed=seed)
    if args.T:
        over["T"] = args.T
    scfg = task_config("ct60", **over)
    model = load_checkpoint(args.checkpoint)
    out = _out_dir(args, cfg)
    _resolved(out, cfg, args, solver=scfg)
    samples = sample_unconditional(model, scfg, args.n, args.image_size)
    pt1.write(out / "samples.pt1", samples)
    sample_grid(samples, out / "samples.png")


def cmd_evaluate(args, cfg: RunConfig) -> None:
    """Run an experiment plan or a study spec, or replay a manifest."""
    from .plotting import method_bars, overfitting_curves

    out = _out_dir(args, cfg)
    if args.replay:
        subset = {k: getattr(args, k) for k in ("images", "budgets", "samples") if getattr(args, k) is not None}
        result = replay(args.replay, out, subset)
        _resolved(out, cfg, args)
        (out / "replay.json").write_text(json.dumps(result, indent=2))
        if not result["match"]:
            raise ReplayMismatch(f"{len(result['mismatched'])} of {result['compared']} files differ")
        return
    if args.plan:
        doc = json.loads(Path(args.plan).read_text())
        doc.setdefault("base_dir", str(Path(args.plan).resolve().parent))
    elif "plan" in cfg.sections:
        doc = {"kind": "experiment", **cfg.sections["plan"]}
    else:
        raise ValueError("give --plan, --replay or a config with a 'plan' section")
    kind = doc.pop("kind", "experiment")
    if args.seed is not None:
        doc["seed"] = args.seed
    _resolved(out, cfg, args)
    if kind == "overfitting":
        curve = run_overfitting(doc, out, images=args.images)
        overfitting_curves(curve, out / "curve.png")
    elif kind == "memorization":
        dist = run_memorization(doc, out)
        _memorization_figure(dist, out / "distances.png")
    elif kind == "experiment":
        plan = ExperimentPlan.from_dict(doc)
        table = run_experiment(plan, out, images=args.images)
        method_bars(table.summary(), out / "summary.png", title=plan.name)
    else:
        raise ValueError(f"unknown plan kind {kind!r}; expected experiment, overfitting or memorization")


def _memorization_figure(dist: dict, path) -> None:
    from .plotting import _save, plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.boxplot(list(dist.values()), labels=list(dist))
    ax.set_ylabel("RMS distance to nearest training image")
    _save(fig, path)


def cmd_sweep(args, cfg: RunConfig) -> None:
    """Grid over one solver knob (eps or gamma) with the fixed prior; writes sweep.csv and sweep.png."""
    import csv

    from .plotting import _save, plt

    seed = _seed(args, cfg)
    model = load_checkpoint(args.checkpoint)
    images = load_dataset(args.data).images[: args.n_images]
    op = make_task_operator(args.task, images.shape[-1], images.shape[1])
    out = _out_dir(args, cfg)
    values = args.values
    if not values:
        # default eps grid: [1e-6, 1e-2] in units of sigma_min^2 (alpha = eps' sigma^2 / sigma_min^2)
        if args.param != "eps":
            raise ValueError("--values is required for gamma sweeps")
        smin = task_config(args.task, naive=args.naive, **cfg.sections.get("solver", {})).sigma_min
        values = list(np.geomspace(1e-6, 1e-2, 5) / smin**2)
    _resolved(out, cfg, args)
    rows = []
    for v in values:
        ps = []
        for idx, x in enumerate(images):
            scfg = task_config(args.task, naive=args.naive, **{**cfg.sections.get("solver", {}), args.param: v, "seed": image_seed(seed, idx)})
            try:
                ps.append(psnr(reconstruct_fixed_prior(op.apply(x), op, model, scfg).image, x))
            except FloatingPointError:
                ps.append(float("nan"))
        rows.append({"value": v, "mean_psnr": float(np.mean(ps))})
        print(f"[sweep] {args.param}={v:.3g}: {rows[-1]['mean_psnr']:.2f} dB", file=sys.stderr, flush=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["value", "mean_psnr"])
        w.writeheader()
        w.writerows(rows)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.semilogx([r["value"] for r in rows], [r["mean_psnr"] for r in rows], marker="o")
    ax.set_xlabel(args.param)
    ax.set_ylabel("mean PSNR (dB)")
    _save(fig, out / "sweep.png")


# ------------------------------------------------------------------ parser


def cmd_rerun(args, cfg: RunConfig) -> None:
    """Repeat the run recorded in a resolved_config.json, optionally into another directory."""
    doc = json.loads(Path(args.resolved).read_text())
    if "command" not in doc or "args" not in doc:
        raise ValueError(f"{args.resolved} does not record a subcommand")
    recorded = argparse.Namespace(**doc["args"], command=doc["command"])
    if args.out:
        recorded.out = args.out
    recorded.func = COMMANDS[doc["command"]]
    inner = RunConfig.from_dict({k: v for k, v in doc.items() if k not in ("command", "args")})
    recorded.func(recorded, inner)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "reconstruct": cmd_reconstruct,
    "baseline": cmd_baseline,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="patchprior", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", help="output directory (default: config 'output')")
        return sp

    def measurement_args(sp):
        sp.add_argument("--task", choices=TASKS, required=True)
        sp.add_argument("--measurement", help="PT1 measurement with JSON sidecar")
        sp.add_argument("--simulate-from", help="PT1 image or dataset to simulate a measurement from")
        sp.add_argument("--index", type=int, default=None, help="dataset entry for --simulate-from")
        sp.add_argument("--sigma-meas", type=float, default=None)

    g = common(sub.add_parser("gen-data", help="generate a phantom dataset"))
    g.add_argument("--family", choices=FAMILIES, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--start", type=int, default=0)
    g.add_argument("--image-size", type=int, default=None)
    g.set_defaults(func=cmd_gen_data)

    t = common(sub.add_parser("train", help="train a denoiser with denoising score matching"))
    t.add_argument("--data", required=True)
    t.add_argument("--kind", choices=("patch", "whole"), default="patch")
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--checkpoint-every", type=int, default=None)
    t.add_argument("--resume", default=None)
    t.set_defaults(func=cmd_train)

    f = common(sub.add_parser("finetune", help="fine-tune a checkpoint on a small dataset"))
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--steps", type=int, default=None)
    f.add_argument("--checkpoint-every", type=int, default=None)
    f.set_defaults(func=cmd_finetune)

    r = common(sub.add_parser("reconstruct", help="diffusion-prior reconstruction"))
    measurement_args(r)
    r.add_argument("--method", choices=("naive", "ss", "fixed"), default="ss")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--T", type=int, default=None)
    r.add_argument("--K", type=int, default=None)
    r.add_argument("--eps", type=float, default=None)
    r.add_argument("--gamma", type=float, default=None)
    r.add_argument("--refine-iters", dest="refine_iters", type=int, default=None)
    r.add_argument("--refine-lr", dest="refine_lr", type=float, default=None)
    r.add_argument("--noise-convention", dest="noise_convention", default=None)
    r.set_defaults(func=cmd_reconstruct)

    b = common(sub.add_parser("baseline", help="classical baseline reconstruction"))
    measurement_args(b)
    b.add_argument("--method", choices=BASELINE_METHODS, required=True)
    b.set_defaults(func=cmd_baseline)

    s = common(sub.add_parser("sample", help="unconditional samples from a prior"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--T", type=int, default=None)
    s.add_argument("--sigma-max", type=float, default=40.0)
    s.add_argument("--sigma-min", type=float, default=0.005)
    s.set_defaults(func=cmd_sample)

    e = common(sub.add_parser("evaluate", help="run an experiment plan or study, or replay a manifest"))
    e.add_argument("--plan", default=None)
    e.add_argument("--replay", default=None, help="manifest.json to re-run and compare")
    e.add_argument("--images", type=int, nargs="*", default=None, help="subset of test indices")
    e.add_argument("--budgets", type=int, nargs="*", default=None, help="replay: subset of fine-tune budgets")
    e.add_argument("--samples", type=int, nargs="*", default=None, help="replay: subset of sample indices")
    e.set_defaults(func=cmd_evaluate)

    w = common(sub.add_parser("sweep", help="calibration grid over eps or gamma"))
    w.add_argument("--task", choices=TASKS, required=True)
    w.add_argument("--checkpoint", required=True)
    w.add_argument("--data", required=True, help="validation dataset")
    w.add_argument("--n-images", type=int, default=1)
    w.add_argument("--param", choices=("eps", "gamma"), default="eps")
    w.add_argument("--values", type=float, nargs="*", default=None)
    w.add_argument("--naive", action="store_true")
    w.set_defaults(func=cmd_sweep)

    r = sub.add_parser("rerun", help="repeat a run from its resolved_config.json")
    r.add_argument("resolved")
    r.add_argument("--out", default=None)
    r.add_argument("--config", default=None, help=argparse.SUPPRESS)
    r.set_defaults(func=cmd_rerun)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config)
        args.func(args, cfg)
    except ConfigError as e:
        print(f"error: config: {' | '.join(e.problems)}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: missing-file: {e}", file=sys.stderr)
        return 2
    except pt1.CorruptFileError as e:
        print(f"error: corrupt-file: {e}", file=sys.stderr)
        return 2
    except (ValueError, FloatingPointError, RuntimeError) as e:
        msg = str(e).replace("\n", " ")
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
