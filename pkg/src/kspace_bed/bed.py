"""Expected information gain: Gaussian oracle, gradient estimator and design loops.

``codiff_optimize`` interleaves one reverse-diffusion step of the posterior
ensemble, one step of the pooled ensemble and one design update per
iteration. ``run_sequential_bed`` repeats it greedily over experiments,
measuring each chosen design with its hard mask.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from .core import (
    ComplexField,
    ExperimentDataset,
    MeasurementRecord,
    TargetState,
    image_block,
    segmentation_block,
)
from .diffusion import (
    ParticleEnsemble,
    PooledWeights,
    conditional_score,
    initial_states,
    reverse_step,
    run_reverse,
    tweedie,
)
from .forward import (
    ForwardOperator,
    KspaceEvidence,
    NoiseModel,
    fft2c,
    pairwise_design_scores,
    pairwise_log_likelihood,
    pooled_evidence,
    sample_measurement,
)
from .masks import (
    DesignParameter,
    MaskField,
    MaskSettings,
    accumulate_masks,
    empty_mask,
    make_mask,
    random_design,
    sampled_fraction,
    wrap_design,
)
from .metrics import evaluate
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    """Raised when an optimization produces non-finite values."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


# Gaussian oracle


def eig_gaussian_oracle(prior_cov, mask, sigma, components: int = 2) -> float:
    """EIG ``1/2 log det(I + A S A^H / s^2)`` for a prior diagonal in k-space.

    Args:
        prior_cov: variance of each real component of ``F x``, broadcast
            against the mask weights (a leading axis of size 2 may hold the
            real and imaginary variances separately).
        mask: ``MaskField`` or array of mask weights.
        sigma: noise standard deviation per real component.
        components: real components per k-space coefficient (2 for complex
            data, 1 for a scalar toy problem).
    """
    w = mask.weights if isinstance(mask, MaskField) else np.asarray(mask, dtype=float)
    cov = np.asarray(prior_cov, dtype=float)
    if np.any(cov <= 0):
        raise ValueError("prior covariance must be positive")
    return float(components * 0.5 * np.sum(np.log1p(w**2 * cov / sigma**2)))


def posterior_kspace_variance(prior_cov, precision):
    """Per-component posterior variance ``1 / (1 / c + P)``."""
    prior_cov = np.asarray(prior_cov, dtype=float)
    return 1.0 / (1.0 / prior_cov + precision)


def gaussian_entropy(variances) -> float:
    v = np.asarray(variances, dtype=float)
    return float(0.5 * np.sum(np.log(2 * np.pi * np.e * v)))


# Gradient estimator


@dataclass
class EigGradientEstimate:
    gradient: np.ndarray
    effective_sample_size: float
    diagnostics: dict = field(default_factory=dict)


def estimate_eig_gradient(
    theta0: np.ndarray,
    ys: np.ndarray,
    theta_pooled: np.ndarray,
    xi: DesignParameter,
    nu,
    noise: NoiseModel,
    shape,
    settings: MaskSettings = MaskSettings(),
    soft_mask=None,
) -> EigGradientEstimate:
    """Importance-sampling estimate of ``grad_xi I(xi)`` with a pooled proposal.

    ``theta0`` ``(N, D)`` are joint samples whose observations are ``ys``
    ``(N, r, c)`` (taken through the soft mask with noise on every pixel);
    ``theta_pooled`` ``(M, D)`` are draws from the pooled posterior. Weights
    ``w_ij`` are proportional to ``p(y_i | theta'_j) / prod_l p(y_l | theta'_j)^nu_l``
    and are self-normalized over ``j``.

    ``soft_mask`` may pass a precomputed ``(weights, jacobian)`` pair.
    """
    theta0 = np.atleast_2d(theta0)
    theta_pooled = np.atleast_2d(theta_pooled)
    rows, cols = shape
    N, M = theta0.shape[0], theta_pooled.shape[0]
    nu = PooledWeights(nu).nu if not isinstance(nu, PooledWeights) else nu.nu
    if nu.size != N:
        raise ValueError("nu must have one weight per joint sample")
    if soft_mask is None:
        mask, dm = make_mask(xi, shape, settings, mode="soft", with_grad=True)
        m = mask.weights
    else:
        m, dm = soft_mask
    sigma = noise.sigma
    a = fft2c(image_block(theta0, rows, cols))
    b = fft2c(image_block(theta_pooled, rows, cols))
    ys = np.asarray(ys).reshape(N, rows, cols)
    eps = (ys - m * a) / sigma

    logl = pairwise_log_likelihood(ys, b, m, sigma)  # (N, M)
    logw = logl - (nu @ logl)[None, :]
    if not np.any(np.isfinite(logw)):
        raise FloatingPointError("importance weights are all non-finite")
    w = softmax(logw, axis=1)
    if not np.all(np.isfinite(w)):
        raise FloatingPointError("importance weights are degenerate")
    ess = 1.0 / np.sum(w**2, axis=1)

    g_self = pairwise_design_scores(a, a, eps, m, dm, sigma)
    g_self = g_self[np.arange(N), np.arange(N)]  # (N, d)
    g_pair = pairwise_design_scores(a, b, eps, m, dm, sigma)  # (N, M, d)
    contrast = np.einsum("ij,ijd->id", w, g_pair)
    per_i = g_self - contrast
    grad = per_i.mean(axis=0)
    diagnostics = {
        "self_term": g_self.mean(axis=0),
        "contrastive_term": contrast.mean(axis=0),
        "ess_per_sample": ess,
    }
    return EigGradientEstimate(grad, float(ess.mean()), diagnostics)


def spce_lower_bound(theta0: np.ndarray, ys: np.ndarray, m, sigma, shape) -> float:
    """Prior-contrastive lower bound on the EIG using the joint samples themselves."""
    rows, cols = shape
    a = fft2c(image_block(theta0, rows, cols))
    L = pairwise_log_likelihood(np.asarray(ys), a, m, sigma)
    n = L.shape[0]
    return float(np.mean(np.diag(L) - (logsumexp(L, axis=1) - np.log(n))))


# Design updates


@dataclass
class OptimizerConfig:
    """Settings of the inner (design) and outer (experiment) loops.

    ``steps`` is the number of joint sampling-optimization iterations, equal
    to the number of reverse-diffusion steps.
    """

    experiments: int = 20
    steps: int = 200
    particles: int = 16
    contrastive_particles: int = 16
    step_size: float = 0.05
    step_decay: str = "constant"
    final_step_fraction: float = 0.01
    optimizer: str = "adam"
    momentum: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    budget_fraction: Optional[float] = None
    ssim_threshold: Optional[float] = None
    ess_skip_fraction: float = 0.1
    pattern: str = "radial"
    lines_per_experiment: int = 15
    guidance: str = "dps"
    exact_init: bool = False
    strategy: str = "optimized"
    eval_particles: Optional[int] = None

    def __post_init__(self):
        for name in ("experiments", "steps", "particles", "contrastive_particles", "lines_per_experiment"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.step_size < 0:
            raise ValueError("step_size must be non-negative")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.step_decay not in ("constant", "cosine"):
            raise ValueError(f"unknown step_decay {self.step_decay!r}")
        if self.strategy not in ("optimized", "random"):
            raise ValueError(f"unknown strategy {self.strategy!r}")


def step_size_at(config: OptimizerConfig, progress: float) -> float:
    """Step size after a fraction ``progress`` in [0, 1] of the inner loop."""
    if config.step_decay == "constant":
        return config.step_size
    lo = config.final_step_fraction
    return config.step_size * (lo + (1 - lo) * 0.5 * (1 + np.cos(np.pi * progress)))


def design_step(
    xi: DesignParameter, gradient, state: dict, config: OptimizerConfig, step_size=None
):
    """Gradient-ascent update; returns ``(new_xi, new_state)``.

    ``sgd`` takes ``xi + step_size * grad``; ``momentum`` keeps a velocity;
    ``adam`` scales by running first and second moments. Radial angles are
    re-wrapped into ``[0, pi)``. ``step_size`` overrides ``config.step_size``.
    """
    g = np.asarray(gradient, dtype=float).reshape(-1)
    if g.shape != xi.values.shape:
        raise ValueError("gradient and design differ in dimension")
    state = dict(state)
    lr = config.step_size if step_size is None else step_size
    if config.optimizer == "sgd":
        delta = lr * g
    elif config.optimizer == "momentum":
        v = config.momentum * state.get("v", np.zeros_like(g)) + g
        state["v"] = v
        delta = lr * v
    else:
        k = state.get("k", 0) + 1
        m1 = config.momentum * state.get("m", np.zeros_like(g)) + (1 - config.momentum) * g
        m2 = config.beta2 * state.get("s", np.zeros_like(g)) + (1 - config.beta2) * g**2
        state.update(k=k, m=m1, s=m2)
        mhat = m1 / (1 - config.momentum**k)
        shat = m2 / (1 - config.beta2**k)
        delta = lr * mhat / (np.sqrt(shat) + config.adam_eps)
    return wrap_design(xi.with_values(xi.values + delta)), state


# Joint sampling-optimization


@dataclass
class CodiffResult:
    design: DesignParameter
    ensemble: ParticleEnsemble
    history: List[dict]
    eig_proxy: float
    skipped_steps: int


def codiff_optimize(
    score_model,
    dataset: Optional[ExperimentDataset],
    config: OptimizerConfig,
    schedule: NoiseSchedule,
    rng,
    noise: NoiseModel,
    shape,
    settings: MaskSettings = MaskSettings(),
    xi0: Optional[DesignParameter] = None,
    evidence: Optional[KspaceEvidence] = None,
) -> CodiffResult:
    """Jointly sample ``p(theta | D_{k-1})`` and ascend the EIG in ``xi``.

    Each iteration: conditional score and Tweedie prediction for the posterior
    ensemble; synthetic observations of the predictions through the current
    soft mask; the same for the pooled ensemble conditioned on those
    observations; gradient estimate; one reverse step for both ensembles;
    design update. Returns the final design and the posterior ensemble.
    """
    if schedule != score_model.schedule:
        raise ValueError("schedule differs from the score model's schedule")
    rng = np.random.default_rng(rng)
    rng_theta, rng_pool, rng_design = rng.spawn(3)
    rows, cols = shape
    dim = 3 * rows * cols
    sigma = noise.sigma
    if evidence is None:
        evidence = KspaceEvidence.from_records(dataset or ExperimentDataset(), shape)
    if xi0 is None:
        xi0 = random_design(config.pattern, config.lines_per_experiment, shape, rng_design)
    xi = wrap_design(xi0)
    optimize = config.strategy == "optimized" and config.step_size > 0

    N, M = config.particles, config.contrastive_particles
    nu = PooledWeights.uniform(N)
    ts = schedule.time_grid(config.steps)
    theta = initial_states(score_model, N, schedule, rng_theta, config.exact_init, dim)
    pooled = initial_states(score_model, M, schedule, rng_pool, config.exact_init, dim)
    opt_state: dict = {}
    history = []
    skipped = 0
    eig_proxy = float("nan")
    for i in range(config.steps, 0, -1):
        t, dt = ts[i], ts[i] - ts[i - 1]
        s_theta = conditional_score(score_model, theta, t, evidence, config.guidance)
        if optimize:
            x0 = tweedie(theta, t, schedule=schedule, score=s_theta)
            m, dm = (lambda r: (r[0].weights, r[1]))(
                make_mask(xi, shape, settings, mode="soft", with_grad=True)
            )
            eps = rng_pool.standard_normal((N, rows, cols)) + 1j * rng_pool.standard_normal(
                (N, rows, cols)
            )
            ys = m * fft2c(image_block(x0, rows, cols)) + sigma * eps
            ev_pool = evidence + pooled_evidence(ys, m, sigma, nu.nu)
            s_pool = conditional_score(score_model, pooled, t, ev_pool, config.guidance)
            x0_pool = tweedie(pooled, t, schedule=schedule, score=s_pool)
            try:
                est = estimate_eig_gradient(
                    x0, ys, x0_pool, xi, nu, noise, shape, settings, soft_mask=(m, dm)
                )
            except FloatingPointError as e:
                raise NumericalAbort(
                    f"{e} at t={t:.4f}", trace={"history": history, "design": xi.values.tolist()}
                ) from e
            if not np.all(np.isfinite(est.gradient)):
                raise NumericalAbort(
                    f"non-finite EIG gradient at t={t:.4f}",
                    trace={"history": history, "design": xi.values.tolist()},
                )
            skip = est.effective_sample_size < config.ess_skip_fraction * M
            skipped += int(skip)
            if not skip:
                lr = step_size_at(config, (config.steps - i) / max(config.steps - 1, 1))
                xi, opt_state = design_step(xi, est.gradient, opt_state, config, lr)
            history.append(
                {
                    "t": float(t),
                    "ess": est.effective_sample_size,
                    "grad_norm": float(np.linalg.norm(est.gradient)),
                    "skipped": bool(skip),
                }
            )
            if i == 1:
                eig_proxy = spce_lower_bound(x0, ys, m, sigma, shape)
            pooled = reverse_step(pooled, t, dt, s_pool, schedule, rng_pool)
        theta = reverse_step(theta, t, dt, s_theta, schedule, rng_theta)
        if not np.all(np.isfinite(theta)) or not np.all(np.isfinite(pooled)):
            raise NumericalAbort(
                f"non-finite particles at t={t:.4f}",
                trace={"history": history, "design": xi.values.tolist()},
            )
    return CodiffResult(xi, ParticleEnsemble(theta, 0), history, eig_proxy, skipped)


# Sequential design


@dataclass
class TraceEntry:
    k: int
    design: List[float]
    sampled_fraction: float
    new_coverage: float
    eig_proxy: float
    oracle_eig: Optional[float]
    analytic_entropy: Optional[float]
    psnr: Optional[float]
    ssim: Optional[float]
    dice: Optional[float]
    skipped_steps: int
    wall_time: float


@dataclass
class BedTrace:
    entries: List[TraceEntry] = field(default_factory=list)
    pattern: str = "radial"
    stopped_early: bool = False

    def to_json(self) -> str:
        return json.dumps(
            {
                "pattern": self.pattern,
                "stopped_early": self.stopped_early,
                "entries": [asdict(e) for e in self.entries],
            },
            indent=2,
            default=_json_default,
        )

    @classmethod
    def from_json(cls, text: str) -> "BedTrace":
        d = json.loads(text)
        return cls([TraceEntry(**e) for e in d["entries"]], d["pattern"], d["stopped_early"])

    def fractions(self) -> np.ndarray:
        return np.array([e.sampled_fraction for e in self.entries])


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _gaussian_kspace_variance(score_model):
    if getattr(score_model, "domain", None) == "kspace" and score_model.image_block_is_gaussian:
        return score_model.kspace_variance()
    return None


@dataclass
class BedResult:
    trace: BedTrace
    dataset: ExperimentDataset
    masks: List[MaskField]
    posterior: ParticleEnsemble
    posterior_mean: np.ndarray


def run_sequential_bed(
    truth,
    score_model,
    config: OptimizerConfig,
    schedule: NoiseSchedule,
    rng,
    noise: NoiseModel,
    settings: MaskSettings = MaskSettings(),
    shape=None,
    on_experiment: Optional[Callable] = None,
) -> BedResult:
    """Greedy sequential design over ``config.experiments`` experiments.

    ``truth`` is a ``TargetState`` or a callable ``(hard_mask, rng) -> ComplexField``
    returning a measurement on demand. Stops once the cumulative sampled
    fraction reaches ``config.budget_fraction`` or the reconstruction SSIM
    reaches ``config.ssim_threshold``.
    """
    rng = np.random.default_rng(rng)
    rng_opt, rng_meas, rng_eval = rng.spawn(3)
    if shape is None:
        if not isinstance(truth, TargetState):
            raise ValueError("shape is required when truth is a callable")
        shape = truth.shape
    rows, cols = shape
    gauss_var = _gaussian_kspace_variance(score_model)
    dataset = ExperimentDataset()
    evidence = KspaceEvidence.empty(rows, cols)
    masks: List[MaskField] = []
    coverage = empty_mask(rows, cols)
    trace = BedTrace(pattern=config.pattern)
    pending = None  # trace fields waiting for the posterior given D_k
    posterior = None

    def measure(hard: MaskField):
        if isinstance(truth, TargetState):
            seed = int(rng_meas.integers(2**63 - 1))
            return sample_measurement(ForwardOperator(hard), truth, noise, seed)
        return truth(hard, rng_meas)

    def finish(entry_kwargs, ensemble):
        mean = ensemble.mean()
        report = _report(truth, mean, shape)
        entry = TraceEntry(**entry_kwargs, **report)
        trace.entries.append(entry)
        if on_experiment is not None:
            on_experiment(entry)
        return entry

    def abort(e, k):
        inner = getattr(e, "trace", None)
        done = [asdict(x) for x in trace.entries]
        return NumericalAbort(f"experiment {k}: {e}", trace={"experiment": k, "entries": done, "inner": inner})

    for k in range(1, config.experiments + 1):
        start = time.perf_counter()
        try:
            res = codiff_optimize(
                score_model,
                dataset,
                config,
                schedule,
                rng_opt.spawn(1)[0],
                noise,
                shape,
                settings,
                evidence=evidence,
            )
        except NumericalAbort as e:
            raise abort(e, k) from e
        posterior = res.ensemble
        if pending is not None:
            entry = finish(pending, posterior)
            if _should_stop(entry, config):
                trace.stopped_early = True
                pending = None
                break
        hard = make_mask(res.design, shape, settings, mode="hard")
        y = measure(hard)
        record = MeasurementRecord(res.design, y, noise.sigma, hard.weights)
        oracle = entropy = None
        if gauss_var is not None:
            prior_v = np.moveaxis(gauss_var, -1, 0)
            before = posterior_kspace_variance(prior_v, evidence.precision)
            oracle = eig_gaussian_oracle(before, hard, noise.sigma, components=1)
        dataset = dataset.append(record)
        evidence = evidence + KspaceEvidence.from_measurement(y, hard.weights, noise.sigma)
        if gauss_var is not None:
            after = posterior_kspace_variance(prior_v, evidence.precision)
            entropy = gaussian_entropy(after)
        new_cov = accumulate_masks([coverage, hard])
        new_coverage = sampled_fraction(new_cov) - sampled_fraction(coverage)
        coverage = new_cov
        masks.append(hard)
        pending = dict(
            k=k,
            design=res.design.values.tolist(),
            sampled_fraction=sampled_fraction(coverage),
            new_coverage=new_coverage,
            eig_proxy=res.eig_proxy,
            oracle_eig=oracle,
            analytic_entropy=entropy,
            skipped_steps=res.skipped_steps,
            wall_time=time.perf_counter() - start,
        )
        log.info("experiment %d: fraction %.4f", k, pending["sampled_fraction"])
        if config.budget_fraction is not None and pending["sampled_fraction"] >= config.budget_fraction:
            trace.stopped_early = k < config.experiments
            break
    if pending is not None:
        n_eval = config.eval_particles or config.particles
        try:
            posterior = run_reverse(
                score_model,
                evidence,
                config.steps,
                n_eval,
                rng_eval,
                3 * rows * cols,
                config.guidance,
                config.exact_init,
            )
        except FloatingPointError as e:
            raise abort(e, pending["k"]) from e
        finish(pending, posterior)
    if posterior is None:
        raise RuntimeError("no experiment was run")
    return BedResult(trace, dataset, masks, posterior, posterior.mean())


def _should_stop(entry: TraceEntry, config: OptimizerConfig) -> bool:
    if config.ssim_threshold is not None and entry.ssim is not None:
        return entry.ssim >= config.ssim_threshold
    return False


def _report(truth, mean_state, shape):
    if not isinstance(truth, TargetState):
        return dict(psnr=None, ssim=None, dice=None)
    rows, cols = shape
    est_img = image_block(mean_state, rows, cols)[0]
    est_seg = segmentation_block(mean_state, rows, cols)[0]
    ref_seg = truth.segmentation
    rep = evaluate(
        truth.image.to_complex(),
        est_img,
        ref_seg if np.any(ref_seg) else None,
        est_seg if np.any(ref_seg) else None,
    )
    return dict(psnr=rep.psnr, ssim=rep.ssim, dice=rep.dice)
