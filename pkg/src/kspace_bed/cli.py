"""Command-line entry point: ``ksbed {run,sweep,compare-random,train-prior,eval-metrics}``.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
Set ``KSBED_NUM_THREADS`` to bound torch threads and parallel sweep workers.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .bed import BedResult, NumericalAbort, OptimizerConfig, run_sequential_bed
from .core import TargetState, image_block, segmentation_block
from .forward import NoiseModel
from .io import ConfigError, RunConfig, load_config, read_pgm, write_metrics, write_pgm, write_table
from .masks import MaskSettings, accumulate_masks
from .metrics import evaluate
from .priors import (
    GaussianMixturePrior,
    fit_gaussian_mixture,
    generate_phantom,
    isotropic_kspace_prior,
    power_law_spectrum,
    random_phantom_spec,
)
from .schedule import NoiseSchedule

log = logging.getLogger("kspace_bed")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
THREADS_ENV = "KSBED_NUM_THREADS"
DEFAULT_SITES = ((0.3, 0.5), (0.5, 0.3), (0.7, 0.6))


def num_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    return n


# builders


def _build(cls, options: dict, what: str):
    names = {f.name for f in fields(cls)}
    bad = set(options) - names
    if bad:
        raise ConfigError(f"unknown {what} option(s): {', '.join(sorted(bad))}")
    try:
        return cls(**options)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {what}: {e}") from None


def build_schedule(cfg: RunConfig) -> NoiseSchedule:
    return _build(NoiseSchedule, cfg.schedule, "schedule")


def build_mask_settings(cfg: RunConfig) -> MaskSettings:
    return _build(MaskSettings, cfg.mask, "mask")


def build_optimizer(cfg: RunConfig, steps=None, particles=None, **overrides) -> OptimizerConfig:
    opts = dict(cfg.optimizer)
    if steps is not None:
        opts["steps"] = steps
    if particles is not None:
        opts["particles"] = particles
        opts["contrastive_particles"] = particles
    opts.update(overrides)
    return _build(OptimizerConfig, opts, "optimizer")


def phantom_training_set(shape, n: int, rng, sites=DEFAULT_SITES, jitter=0.05, texture=0.1):
    states, labels = [], []
    for _ in range(n):
        spec, label = random_phantom_spec(*shape, rng, anomaly_sites=sites, jitter=jitter, texture=texture)
        states.append(generate_phantom(spec, int(rng.integers(2**31))).to_vector())
        labels.append(label)
    return np.array(states), np.array(labels)


def build_prior(cfg: RunConfig, schedule: NoiseSchedule):
    p = dict(cfg.prior)
    src = p.pop("source", "analytic")
    shape = tuple(cfg.shape)
    if src == "file":
        d = json.loads(Path(p["path"]).read_text())
        prior = GaussianMixturePrior.from_dict(d)
        return GaussianMixturePrior(
            prior.weights, prior.means, prior.covariances, prior.domain, prior.shape, schedule
        )
    if src == "trained":
        from .denoiser import TrainedScoreModel

        model = TrainedScoreModel.load(p["path"])
        if model.schedule != schedule:
            raise ConfigError("schedule differs from the one the network was trained with")
        return model
    kind = p.pop("kind", "power_law")
    if kind == "power_law":
        spec = {k: p.pop(k) for k in ("amplitude", "scale", "power", "floor") if k in p}
        seg_mean, seg_var = p.pop("seg_mean", 0.0), p.pop("seg_variance", 1.0)
        if p:
            raise ConfigError(f"unknown prior option(s): {', '.join(sorted(p))}")
        return isotropic_kspace_prior(
            shape, power_law_spectrum(shape, **spec), seg_mean=seg_mean, seg_variance=seg_var, schedule=schedule
        )
    if kind == "phantom":
        rng = np.random.default_rng(p.pop("seed", 0))
        n = p.pop("n_train", 400)
        sites = [tuple(s) for s in p.pop("sites", DEFAULT_SITES)]
        jitter, texture = p.pop("jitter", 0.05), p.pop("texture", 0.1)
        if p:
            raise ConfigError(f"unknown prior option(s): {', '.join(sorted(p))}")
        states, labels = phantom_training_set(shape, n, rng, sites, jitter, texture)
        return fit_gaussian_mixture(states, domain="kspace", shape=shape, labels=labels, schedule=schedule)
    raise ConfigError(f"unknown prior kind {kind!r}")


def build_truth(cfg: RunConfig, prior, seed: int) -> TargetState:
    t = dict(cfg.truth)
    src = t.pop("source", "prior")
    rng = np.random.default_rng([seed, 1])
    rows, cols = cfg.shape
    if src == "prior":
        if not hasattr(prior, "sample"):
            raise ConfigError("truth source 'prior' needs an analytic prior")
        return TargetState.from_vector(prior.sample(1, rng)[0], rows, cols, clip=True)
    if src == "phantom":
        sites = [tuple(s) for s in t.pop("sites", DEFAULT_SITES)]
        jitter, texture = t.pop("jitter", 0.05), t.pop("texture", 0.1)
        if t:
            raise ConfigError(f"unknown truth option(s): {', '.join(sorted(t))}")
        spec, _ = random_phantom_spec(rows, cols, rng, anomaly_sites=sites, jitter=jitter, texture=texture)
        return generate_phantom(spec, int(rng.integers(2**31)))
    raise ConfigError(f"unknown truth source {src!r}")


# verbs


def execute(cfg: RunConfig, out: Path, seed: int, opt: OptimizerConfig, figures: bool = True) -> BedResult:
    """One sequential design run with all artifacts written under ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    schedule = build_schedule(cfg)
    prior = build_prior(cfg, schedule)
    truth = build_truth(cfg, prior, seed)
    settings = build_mask_settings(cfg)
    noise = NoiseModel(cfg.noise_sigma)
    try:
        res = run_sequential_bed(truth, prior, opt, schedule, np.random.default_rng(seed), noise, settings)
    except NumericalAbort as e:
        (out / "abort_trace.json").write_text(json.dumps(e.trace, indent=2, default=float))
        raise
    (out / "trace.json").write_text(res.trace.to_json())
    write_metrics(out / "metrics.csv", res.trace)
    masks_dir = out / "masks"
    masks_dir.mkdir(exist_ok=True)
    for k, m in enumerate(res.masks, 1):
        write_pgm(masks_dir / f"mask_{k:03d}.pgm", np.fft.fftshift(m.weights), 0.0, 1.0)
    rows, cols = truth.shape
    mean_img = np.abs(image_block(res.posterior_mean, rows, cols)[0])
    write_pgm(out / "posterior_mean.pgm", mean_img)
    write_pgm(out / "segmentation_mean.pgm", segmentation_block(res.posterior_mean, rows, cols)[0], 0.0, 1.0)
    if figures and cfg.figures:
        from .plotting import plot_run

        e = res.trace.entries
        plot_run(
            out / "run.png",
            truth.image.magnitude(),
            mean_img,
            accumulate_masks(res.masks).weights,
            [x.sampled_fraction for x in e],
            [x.ssim for x in e],
            [x.psnr for x in e],
        )
    return res


def _cmd_run(cfg: RunConfig, out: Path, args) -> int:
    opt = build_optimizer(cfg, args.steps, args.particles)
    res = execute(cfg, out, cfg.seed, opt)
    last = res.trace.entries[-1]
    print(f"experiments={len(res.trace.entries)} fraction={last.sampled_fraction:.4f} ssim={last.ssim:.4f} psnr={last.psnr:.2f}")
    return EXIT_OK


def _sweep_job(job):
    cfg, out, seed, opt = job
    res = execute(cfg, Path(out), seed, opt, figures=False)
    e = res.trace.entries[-1]
    return {"seed": seed, "sampled_fraction": e.sampled_fraction, "psnr": e.psnr, "ssim": e.ssim, "dice": e.dice}


def _seeds(cfg: RunConfig) -> List[int]:
    seeds = cfg.sweep.get("seeds", [cfg.seed])
    if isinstance(seeds, int):
        seeds = list(range(cfg.seed, cfg.seed + seeds))
    return [int(s) for s in seeds]


def _map(jobs, fn):
    workers = min(num_threads(), len(jobs))
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(fn, jobs))


def sweep_rows(results, fractions):
    rows = []
    for f in fractions:
        rs = [r for r in results if r["budget"] == f]
        dice = [r["dice"] for r in rs if r["dice"] is not None]
        rows.append(
            {
                "fraction": f,
                "acceleration": 1.0 / f,
                "runs": len(rs),
                "median_fraction": float(np.median([r["sampled_fraction"] for r in rs])),
                "median_ssim": float(np.median([r["ssim"] for r in rs])),
                "median_psnr": float(np.median([r["psnr"] for r in rs])),
                "median_dice": float(np.median(dice)) if dice else None,
            }
        )
    return rows


def run_sweep(cfg: RunConfig, out: Path, steps=None, particles=None, figures=True):
    fractions = cfg.sweep.get("fractions")
    if not fractions:
        raise ConfigError("sweep needs a non-empty 'fractions' list")
    fractions = sorted(float(f) for f in fractions)
    jobs, meta = [], []
    for f in fractions:
        for s in _seeds(cfg):
            opt = build_optimizer(cfg, steps, particles, budget_fraction=f)
            jobs.append((cfg, str(out / f"fraction_{f:g}" / f"seed_{s}"), s, opt))
            meta.append(f)
    results = _map(jobs, _sweep_job)
    for r, f in zip(results, meta):
        r["budget"] = f
    write_table(out / "runs.csv", results, ("budget", "seed", "sampled_fraction", "psnr", "ssim", "dice"))
    rows = sweep_rows(results, fractions)
    write_table(
        out / "sweep.csv",
        rows,
        ("fraction", "acceleration", "runs", "median_fraction", "median_ssim", "median_psnr", "median_dice"),
    )
    if figures and cfg.figures:
        from .plotting import plot_sweep

        plot_sweep(out / "sweep.png", rows)
    return rows


def _cmd_sweep(cfg, out, args) -> int:
    for r in run_sweep(cfg, out, args.steps, args.particles):
        print(f"fraction={r['fraction']:g} acceleration={r['acceleration']:g} median_ssim={r['median_ssim']:.4f}")
    return EXIT_OK


def run_comparison(cfg: RunConfig, out: Path, steps=None, particles=None, figures=True):
    jobs = []
    for s in _seeds(cfg):
        for strategy in ("optimized", "random"):
            opt = build_optimizer(cfg, steps, particles, strategy=strategy)
            jobs.append((cfg, str(out / strategy / f"seed_{s}"), s, opt))
    results = _map(jobs, _sweep_job)
    rows = []
    for o, r in zip(results[::2], results[1::2]):
        rows.append(
            {
                "seed": o["seed"],
                "fraction_optimized": o["sampled_fraction"],
                "fraction_random": r["sampled_fraction"],
                "ssim_optimized": o["ssim"],
                "ssim_random": r["ssim"],
                "delta_ssim": o["ssim"] - r["ssim"],
                "psnr_optimized": o["psnr"],
                "psnr_random": r["psnr"],
                "delta_psnr": o["psnr"] - r["psnr"],
            }
        )
    write_table(out / "compare.csv", rows, tuple(rows[0]))
    if figures and cfg.figures:
        from .plotting import plot_comparison

        plot_comparison(out / "compare.png", [r["delta_ssim"] for r in rows], [str(r["seed"]) for r in rows])
    return rows


def _cmd_compare(cfg, out, args) -> int:
    rows = run_comparison(cfg, out, args.steps, args.particles)
    med = float(np.median([r["delta_ssim"] for r in rows]))
    print(f"seeds={len(rows)} median_delta_ssim={med:+.5f}")
    return EXIT_OK


def _cmd_train(cfg: RunConfig, out: Path, args) -> int:
    """Fit a mixture (``kind: gmm``) or train a network (``kind: network``) on phantoms."""
    from .denoiser import TrainingConfig, smooth_losses, train_denoiser

    out.mkdir(parents=True, exist_ok=True)
    t = dict(cfg.training)
    kind = t.pop("kind", "network")
    n = t.pop("n_train", 400)
    arch = t.pop("arch", "conv")
    sites = [tuple(s) for s in t.pop("sites", DEFAULT_SITES)]
    shape = tuple(cfg.shape)
    rng = np.random.default_rng(cfg.seed)
    states, labels = phantom_training_set(shape, n, rng, sites)
    schedule = build_schedule(cfg)
    if kind == "gmm":
        if t:
            raise ConfigError(f"unknown training option(s): {', '.join(sorted(t))}")
        prior = fit_gaussian_mixture(states, domain="kspace", shape=shape, labels=labels, schedule=schedule)
        (out / "prior.json").write_text(json.dumps(prior.to_dict()))
        print(f"wrote {out / 'prior.json'}")
        return EXIT_OK
    if kind != "network":
        raise ConfigError(f"unknown training kind {kind!r}")
    if args.steps is not None:
        t["steps"] = args.steps
    t.setdefault("seed", cfg.seed)
    tc = _build(TrainingConfig, t, "training")
    model, losses = train_denoiser(states, schedule, tc, arch=arch, shape=shape)
    model.save(out / "score_model.ksnet")
    write_table(out / "losses.csv", [{"step": i, "loss": l} for i, l in enumerate(losses)], ("step", "loss"))
    if cfg.figures:
        from .plotting import plot_losses

        plot_losses(out / "losses.png", losses, smooth_losses(losses, max(1, len(losses) // 20)))
    print(f"wrote {out / 'score_model.ksnet'} final_loss={losses[-20:].mean():.4f}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    if args.reference is None or args.estimate is None:
        raise ConfigError("eval-metrics needs --reference and --estimate PGM files")
    for p in (args.reference, args.estimate, args.reference_seg, args.estimate_seg):
        if p is not None and not Path(p).is_file():
            raise ConfigError(f"file not found: {p}")
    ref = read_pgm(args.reference) / 255.0
    est = read_pgm(args.estimate) / 255.0
    rs = read_pgm(args.reference_seg) / 255.0 if args.reference_seg else None
    es = read_pgm(args.estimate_seg) / 255.0 if args.estimate_seg else None
    rep = evaluate(ref, est, rs, es)
    print("psnr,ssim,dice")
    print(f"{rep.psnr!r},{rep.ssim!r},{'' if rep.dice is None else repr(rep.dice)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ksbed", description="Sequential k-space design with diffusion posteriors.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in ("run", "sweep", "compare-random", "train-prior"):
        s = sub.add_parser(verb)
        s.add_argument("--config", required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.add_argument("--steps", type=int)
        s.add_argument("--particles", type=int)
    s = sub.add_parser("eval-metrics")
    s.add_argument("--reference")
    s.add_argument("--estimate")
    s.add_argument("--reference-seg")
    s.add_argument("--estimate-seg")
    return p


VERBS = {"run": _cmd_run, "sweep": _cmd_sweep, "compare-random": _cmd_compare, "train-prior": _cmd_train}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        threads = num_threads()
        if args.verb == "eval-metrics":
            return _cmd_eval(args)
        try:
            import torch

            torch.set_num_threads(threads)
        except ImportError:
            pass
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg = replace(cfg, seed=args.seed)
        for name in ("steps", "particles"):
            v = getattr(args, name)
            if v is not None and v < 1:
                raise ConfigError(f"--{name} must be >= 1")
        out = Path(args.out or cfg.output or "ksbed_out")
        return VERBS[args.verb](cfg, out, args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalAbort, FloatingPointError) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
