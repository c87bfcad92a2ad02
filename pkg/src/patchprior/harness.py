"""Experiment orchestration: method suites over test sets, fine-tuning studies, manifests.

Every run writes a ``manifest.json`` holding the plan, config hashes, seeds,
the package version and the sha256 of every emitted file, so a run can be
replayed and checked for bit-exact agreement with :func:`replay`.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, pt1
from .baselines import METHODS as BASELINE_METHODS
from .baselines import preset, run_baseline
from .metrics import psnr, ssim
from .model import ModelParams, load_checkpoint
from .operators import TASKS, NoiseModel, make_task_operator, simulate
from .phantoms import OOD_SPEC_DEFAULTS, PhantomSpec, load_dataset, make_dataset
from .solvers import SolverConfig, reconstruct_fixed_prior, reconstruct_self_supervised, sample_unconditional, task_config
from .training import TrainConfig, start_finetune, train

log = logging.getLogger(__name__)

SOLVER_METHODS = ("naive", "fixed", "ss")
RESULT_COLUMNS = ("image", "method", "psnr", "ssim", "seconds")
DEFAULT_SIGMA_MEAS = {"ct20": 0.0, "ct60": 0.0, "deblur": 0.01, "sr4": 0.01}


def config_hash(obj) -> str:
    """sha256 of the canonical JSON form of ``obj``."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def file_hash(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def image_seed(seed: int, index: int) -> int:
    """Per-image solver seed; shared by every method so comparisons are paired."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# ------------------------------------------------------------------- plans


@dataclass
class MethodSpec:
    """One row of a comparison: ``kind`` is a baseline method or naive/fixed/ss."""

    name: str
    kind: str
    checkpoint: str | None = None
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in BASELINE_METHODS + SOLVER_METHODS:
            raise ValueError(f"method {self.name!r}: unknown kind {self.kind!r}")
        if self.kind in SOLVER_METHODS and not self.checkpoint:
            raise ValueError(f"method {self.name!r}: kind {self.kind!r} needs a checkpoint")


@dataclass
class ExperimentPlan:
    """A task, a list of methods and a test set.

    ``dataset`` is either ``{"path": ...}`` or a generator reference
    ``{"family", "seed", "n", "start", "spec"}``.  Relative checkpoint and
    dataset paths resolve against ``base_dir``.
    """

    task: str
    methods: list[MethodSpec]
    dataset: dict
    seed: int = 0
    sigma_meas: float | None = None
    noise_seed: int = 0
    base_dir: str = "."
    name: str = "experiment"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        self.methods = [m if isinstance(m, MethodSpec) else MethodSpec(**m) for m in self.methods]
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ValueError("method names must be unique")
        if "path" not in self.dataset and "family" not in self.dataset:
            raise ValueError("dataset needs a 'path' or a 'family'")

    @property
    def measurement_sigma(self) -> float:
        return DEFAULT_SIGMA_MEAS[self.task] if self.sigma_meas is None else float(self.sigma_meas)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ValueError(f"unknown plan keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentPlan":
        d = json.loads(Path(path).read_text())
        d.setdefault("base_dir", str(Path(path).resolve().parent))
        return cls.from_dict(d)

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q


def load_images(ref: dict, base_dir: str | os.PathLike = ".") -> np.ndarray:
    """Images from ``{"path": ...}`` or a generator reference ``{"family", "seed", "n", "start", "spec"}``."""
    if "path" in ref:
        path = Path(ref["path"])
        path = path if path.is_absolute() else Path(base_dir) / path
        if not path.exists():
            raise FileNotFoundError(f"dataset not found: {path}")
        return load_dataset(path).images
    spec_kw = dict(OOD_SPEC_DEFAULTS) if ref["family"] == "ood" else {}
    spec_kw.update(ref.get("spec", {}))
    spec_kw = {k: tuple(v) if isinstance(v, list) else v for k, v in spec_kw.items()}
    spec = PhantomSpec(seed=ref.get("seed", 0), **spec_kw)
    return make_dataset(ref["family"], spec, ref["n"], ref.get("start", 0)).images


def load_test_images(plan: ExperimentPlan) -> np.ndarray:
    return load_images(plan.dataset, plan.base_dir)


def solver_config(task: str, method: MethodSpec, seed: int) -> SolverConfig:
    return task_config(task, naive=method.kind == "naive", **{**method.overrides, "seed": seed})


# ------------------------------------------------------------------ export


def write_pgm(path: str | os.PathLike, img: np.ndarray) -> None:
    """8-bit PGM (one channel) or PPM (three channels) of a (C, H, W) image clamped to [0, 1]."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise ValueError("PGM/PPM export needs 1 or 3 channels")
    data = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode())
        fh.write(np.moveaxis(data, 0, -1).tobytes())


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ------------------------------------------------------------- experiments


@dataclass
class ResultsTable:
    rows: list[dict]

    def methods(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            if r["method"] not in seen:
                seen.append(r["method"])
        return seen

    def values(self, method: str, metric: str = "psnr") -> np.ndarray:
        return np.array([r[metric] for r in self.rows if r["method"] == method])

    def mean(self, method: str, metric: str = "psnr") -> float:
        return float(np.mean(self.values(method, metric)))

    def summary(self) -> list[dict]:
        return [
            {"method": m, "n": len(self.values(m)), "mean_psnr": self.mean(m), "mean_ssim": self.mean(m, "ssim")}
            for m in self.methods()
        ]


def _load_models(plan: ExperimentPlan) -> dict[str, ModelParams]:
    models = {}
    for m in plan.methods:
        if m.checkpoint and m.checkpoint not in models:
            path = plan.resolve(m.checkpoint)
            if not path.exists():
                raise FileNotFoundError(f"checkpoint not found: {path}")
            models[m.checkpoint] = load_checkpoint(path)
    return models


def reconstruct_one(plan: ExperimentPlan, method: MethodSpec, y, op, model: ModelParams | None, index: int):
    """Reconstruction of test image ``index``; returns (image, ReconResult or None)."""
    if method.kind in BASELINE_METHODS:
        cfg = preset(plan.task, method.kind, **method.overrides)
        return run_baseline(y, op, cfg), None
    cfg = solver_config(plan.task, method, image_seed(plan.seed, index))
    fn = reconstruct_self_supervised if method.kind == "ss" else reconstruct_fixed_prior
    res = fn(y, op, model, cfg)
    return res.image, res


def run_experiment(
    plan: ExperimentPlan,
    out_dir: str | os.PathLike | None = None,
    images: list[int] | None = None,
    models: dict[str, ModelParams] | None = None,
) -> ResultsTable:
    """Run every method on every test image; per-image and mean PSNR/SSIM.

    With ``out_dir`` the run emits ``results.csv``, ``summary.csv``,
    reconstructions as PT1 and PGM/PPM, solver diagnostics and a manifest.
    ``images`` restricts the run to a subset of test indices.
    """
    clean = load_test_images(plan)
    op = make_task_operator(plan.task, clean.shape[-1], clean.shape[1])
    models = models if models is not None else _load_models(plan)
    indices = list(range(len(clean))) if images is None else list(images)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows = []
    files: dict[str, str] = {}
    for idx in indices:
        meas = simulate(clean[idx], op, NoiseModel(plan.measurement_sigma, image_seed(plan.noise_seed, idx)))
        for m in plan.methods:
            t0 = time.perf_counter()
            rec, res = reconstruct_one(plan, m, meas.y, op, models.get(m.checkpoint), idx)
            dt = time.perf_counter() - t0
            row = {"image": idx, "method": m.name, "psnr": psnr(rec, clean[idx]), "ssim": ssim(rec, clean[idx]), "seconds": dt}
            rows.append(row)
            _progress(f"[{plan.name}] image {idx} {m.name}: {row['psnr']:.2f} dB ({dt:.1f}s)")
            if out is not None:
                stem = out / "images" / m.name / f"{idx:03d}"
                stem.parent.mkdir(parents=True, exist_ok=True)
                pt1.write(str(stem) + ".pt1", rec)
                write_pgm(str(stem) + (".pgm" if rec.shape[0] == 1 else ".ppm"), rec)
                files[f"images/{m.name}/{idx:03d}.pt1"] = file_hash(str(stem) + ".pt1")
                if res is not None:
                    diag = out / "diagnostics" / m.name / f"{idx:03d}.csv"
                    res.write_diagnostics(diag)
                    files[f"diagnostics/{m.name}/{idx:03d}.csv"] = file_hash(diag)
    table = ResultsTable(rows)
    if out is not None:
        _write_rows(out / "results.csv", RESULT_COLUMNS, rows)
        _write_rows(out / "summary.csv", ("method", "n", "mean_psnr", "mean_ssim"), table.summary())
        files["results_metrics"] = config_hash([[r["image"], r["method"], r["psnr"], r["ssim"]] for r in rows])
        write_manifest(out / "manifest.json", plan, indices, files, models)
    return table


def _write_rows(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})


def write_manifest(path: Path, plan: ExperimentPlan, indices, files: dict, models: dict) -> None:
    configs = {}
    for m in plan.methods:
        if m.kind in BASELINE_METHODS:
            configs[m.name] = preset(plan.task, m.kind, **m.overrides).to_dict()
        else:
            configs[m.name] = solver_config(plan.task, m, plan.seed).to_dict()
    manifest = {
        "kind": "experiment",
        "plan": plan.to_dict(),
        "images": indices,
        "config_hashes": {k: config_hash(v) for k, v in configs.items()},
        "configs": configs,
        "seeds": {"plan": plan.seed, "noise": plan.noise_seed,
                  "per_image": {str(i): image_seed(plan.seed, i) for i in indices}},
        "checkpoint_hashes": {k: file_hash(plan.resolve(k)) for k in models},
        "code_version": __version__,
        "files": files,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


# ------------------------------------------------------ fine-tuning study


def finetune_series(
    base: ModelParams,
    small: np.ndarray,
    budgets: list[int],
    cfg: TrainConfig,
    out_dir: str | os.PathLike | None = None,
) -> dict[int, ModelParams]:
    """Fine-tune once and snapshot the model at each budget (in optimizer steps).

    Training draws one random stream per step, so segmenting the run at the
    budgets gives the same weights as one uninterrupted run.
    """
    budgets = sorted(set(int(b) for b in budgets))
    if budgets[0] < 0:
        raise ValueError("budgets must be non-negative")
    model = start_finetune(base, cfg)
    series = {}
    done = 0
    for b in budgets:
        seg = TrainConfig(**{**cfg.to_dict(), "steps": b - done, "batch_sizes": cfg.batch_sizes, "checkpoint_every": 0})
        if b > done:
            train(model, small, seg, out_dir, log_name="finetune_log.csv")
            done = b
        snap = model.copy()
        series[b] = snap
        if out_dir is not None:
            from .model import save_checkpoint

            save_checkpoint(snap, Path(out_dir) / f"budget_{b:06d}.ckpt")
    return series


def overfitting_study(
    bases: dict[str, ModelParams],
    small: np.ndarray,
    test_images: np.ndarray,
    budgets: list[int],
    cfg: TrainConfig,
    out_dir: str | os.PathLike,
    task: str = "ct60",
    solver_overrides: dict | None = None,
    seed: int = 0,
    images: list[int] | None = None,
) -> list[dict]:
    """Fine-tune each base model over a budget grid and reconstruct the test set with the fixed prior.

    Writes ``curve.csv`` (model, budget, mean_psnr, mean_ssim), per-image rows
    in ``curve_images.csv`` and every reconstruction under ``recon/``;
    returns the curve rows.  ``images`` restricts the test indices.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    op = make_task_operator(task, test_images.shape[-1], test_images.shape[1])
    solver_overrides = solver_overrides or {}
    indices = list(range(len(test_images))) if images is None else list(images)
    curve, per_image = [], []
    for name, base in bases.items():
        series = finetune_series(base, small, budgets, cfg, out / name)
        for b, model in series.items():
            ps, ss = [], []
            for idx in indices:
                x = test_images[idx]
                scfg = task_config(task, naive=True, **{**solver_overrides, "seed": image_seed(seed, idx)})
                rec = reconstruct_fixed_prior(op.apply(x), op, model, scfg).image
                (out / "recon" / name).mkdir(parents=True, exist_ok=True)
                pt1.write(out / "recon" / name / f"b{b:06d}_{idx:03d}.pt1", rec)
                ps.append(psnr(rec, x))
                ss.append(ssim(rec, x))
                per_image.append({"model": name, "budget": b, "image": idx, "psnr": ps[-1], "ssim": ss[-1]})
            curve.append({"model": name, "budget": b, "mean_psnr": float(np.mean(ps)), "mean_ssim": float(np.mean(ss))})
            _progress(f"[overfitting] {name} budget {b}: {curve[-1]['mean_psnr']:.2f} dB")
    _write_rows(out / "curve.csv", ("model", "budget", "mean_psnr", "mean_ssim"), curve)
    _write_rows(out / "curve_images.csv", ("model", "budget", "image", "psnr", "ssim"), per_image)
    return curve


def best_to_final_drop(curve: list[dict], model: str) -> float:
    rows = sorted((r for r in curve if r["model"] == model), key=lambda r: r["budget"])
    vals = [r["mean_psnr"] for r in rows]
    return max(vals) - vals[-1]


def _hash_tree(root: Path, patterns: tuple[str, ...]) -> dict[str, str]:
    return {str(p.relative_to(root)): file_hash(p) for pat in patterns for p in sorted(root.glob(pat))}


def _study_manifest(path: Path, kind: str, spec: dict, checkpoints: dict[str, Path], files: dict, **extra) -> None:
    manifest = {
        "kind": kind,
        "spec": spec,
        "config_hash": config_hash(spec),
        "checkpoint_hashes": {k: file_hash(v) for k, v in checkpoints.items()},
        "code_version": __version__,
        "files": files,
        **extra,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _spec_paths(spec: dict, key: str) -> dict[str, Path]:
    base = Path(spec.get("base_dir", "."))
    return {k: (Path(v) if Path(v).is_absolute() else base / v) for k, v in spec[key].items()}


def run_overfitting(spec: dict, out_dir: str | os.PathLike, budgets: list[int] | None = None,
                    images: list[int] | None = None) -> list[dict]:
    """Overfitting study from a JSON-able spec, with a replayable manifest.

    ``spec`` holds ``bases`` (name -> checkpoint path), ``small`` and ``test``
    dataset references, ``budgets``, ``train`` (TrainConfig fields for
    fine-tuning), ``task``, ``solver`` (overrides) and ``seed``.
    ``budgets``/``images`` restrict the run (budgets must be a prefix of the
    grid, since fine-tuning is sequential).
    """
    out = Path(out_dir)
    paths = _spec_paths(spec, "bases")
    bases = {k: load_checkpoint(p) for k, p in paths.items()}
    base_dir = spec.get("base_dir", ".")
    small = load_images(spec["small"], base_dir)
    test = load_images(spec["test"], base_dir)
    cfg = TrainConfig.finetune_defaults(**spec.get("train", {}))
    grid = spec["budgets"] if budgets is None else budgets
    curve = overfitting_study(bases, small, test, grid, cfg, out, spec.get("task", "ct60"),
                              spec.get("solver"), spec.get("seed", 0), images)
    files = _hash_tree(out, ("*/budget_*.ckpt", "recon/*/*.pt1"))
    files["curve_metrics"] = config_hash([[r["model"], r["budget"], r["mean_psnr"]] for r in curve])
    _study_manifest(out / "manifest.json", "overfitting", spec, paths, files,
                    budgets=sorted(set(grid)), images=images)
    return curve


# ----------------------------------------------------------- memorization


def min_train_distance(samples: np.ndarray, train_images: np.ndarray) -> np.ndarray:
    """Per-sample RMS pixel distance to the nearest training image."""
    s = samples.reshape(len(samples), -1).astype(np.float64)
    t = train_images.reshape(len(train_images), -1).astype(np.float64)
    d2 = (s**2).sum(1)[:, None] + (t**2).sum(1)[None, :] - 2 * s @ t.T
    return np.sqrt(np.maximum(d2, 0.0).min(axis=1) / s.shape[1])


def memorization_study(models: dict[str, ModelParams], train_images: np.ndarray, cfg: SolverConfig, n: int = 16,
                       indices: list[int] | None = None) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Unconditional samples from each model and their nearest-training-image distances."""
    out = {}
    for name, m in models.items():
        samples = sample_unconditional(m, cfg, n, train_images.shape[-1], indices)
        out[name] = (samples, min_train_distance(samples, train_images))
    return out


def run_memorization(spec: dict, out_dir: str | os.PathLike, indices: list[int] | None = None) -> dict[str, np.ndarray]:
    """Memorization study from a spec: ``models`` (name -> checkpoint), ``train`` dataset reference,
    ``n`` samples and ``solver`` (SolverConfig fields).  Returns per-model distances.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = _spec_paths(spec, "models")
    models = {k: load_checkpoint(p) for k, p in paths.items()}
    train_images = load_images(spec["train"], spec.get("base_dir", "."))
    cfg = SolverConfig(**spec.get("solver", {}))
    n = spec.get("n", 16)
    idx = list(range(n)) if indices is None else list(indices)
    result = memorization_study(models, train_images, cfg, n, idx)
    rows = []
    for name, (samples, dist) in result.items():
        (out / "samples" / name).mkdir(parents=True, exist_ok=True)
        for k, smp, d in zip(idx, samples, dist):
            pt1.write(out / "samples" / name / f"{k:03d}.pt1", smp)
            rows.append({"model": name, "sample": k, "min_distance": float(d)})
    _write_rows(out / "distances.csv", ("model", "sample", "min_distance"), rows)
    files = _hash_tree(out, ("samples/*/*.pt1",))
    _study_manifest(out / "manifest.json", "memorization", spec, paths, files, samples=idx)
    return {name: dist for name, (_, dist) in result.items()}


def replay(manifest_path: str | os.PathLike, out_dir: str | os.PathLike, subset: dict | None = None) -> dict:
    """Re-run a manifest (optionally a subset) and compare the hashes of the files both runs emit.

    ``subset`` keys: ``images`` for experiments, ``budgets``/``images`` for
    overfitting studies and ``samples`` for memorization studies.
    Returns ``{"match": bool, "compared": n, "mismatched": [names]}``.
    """
    manifest = json.loads(Path(manifest_path).read_text())
    subset = subset or {}
    kind = manifest.get("kind")
    if kind == "experiment":
        plan = ExperimentPlan.from_dict(manifest["plan"])
        for ckpt, digest in manifest["checkpoint_hashes"].items():
            if file_hash(plan.resolve(ckpt)) != digest:
                raise ValueError(f"checkpoint {ckpt} changed since the manifest was written")
        run_experiment(plan, out_dir, images=subset.get("images", manifest["images"]))
    elif kind in ("overfitting", "memorization"):
        key = "bases" if kind == "overfitting" else "models"
        for name, path in _spec_paths(manifest["spec"], key).items():
            if file_hash(path) != manifest["checkpoint_hashes"][name]:
                raise ValueError(f"checkpoint {path} changed since the manifest was written")
        if kind == "overfitting":
            run_overfitting(manifest["spec"], out_dir, subset.get("budgets"), subset.get("images", manifest.get("images")))
        else:
            run_memorization(manifest["spec"], out_dir, subset.get("samples", manifest.get("samples")))
    else:
        raise ValueError(f"cannot replay a manifest of kind {kind!r}")
    fresh = json.loads((Path(out_dir) / "manifest.json").read_text())["files"]
    compared = [k for k in fresh if k in manifest["files"]]
    if subset:
        # aggregate tables cover only the replayed subset
        compared = [k for k in compared if not k.endswith("_metrics")]
    bad = [k for k in compared if fresh[k] != manifest["files"][k]]
    return {"match": not bad and bool(compared), "compared": len(compared), "mismatched": bad}


# ------------------------------------------------------- paired scatter


def paired_scatter(table: ResultsTable, with_method: str, without_method: str, path: str | os.PathLike | None = None) -> list[dict]:
    """Per-image (PSNR without, PSNR with) pairs; optionally written as CSV."""
    a = {r["image"]: r["psnr"] for r in table.rows if r["method"] == without_method}
    b = {r["image"]: r["psnr"] for r in table.rows if r["method"] == with_method}
    rows = [{"image": i, "psnr_without": a[i], "psnr_with": b[i], "delta": b[i] - a[i]} for i in sorted(a) if i in b]
    if path is not None:
        _write_rows(Path(path), ("image", "psnr_without", "psnr_with", "delta"), rows)
    return rows


def ablation_plan(plan: ExperimentPlan, method: str, values=(0, 1, 2, 5, 10)) -> ExperimentPlan:
    """Copy of ``plan`` with ``method`` expanded over refine_iters values."""
    base = next(m for m in plan.methods if m.name == method)
    methods = [MethodSpec(f"{method}_r{v}", base.kind, base.checkpoint, {**base.overrides, "refine_iters": v}) for v in values]
    return ExperimentPlan(**{**plan.to_dict(), "methods": methods, "name": f"{plan.name}_ablation"})
