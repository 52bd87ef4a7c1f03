"""Sequential Bayesian experimental design for MRI k-space subsampling."""

from .bed import (
    BedTrace,
    EigGradientEstimate,
    OptimizerConfig,
    codiff_optimize,
    design_step,
    eig_gaussian_oracle,
    estimate_eig_gradient,
    run_sequential_bed,
)
from .core import ComplexField, ExperimentDataset, MeasurementRecord, TargetState
from .diffusion import ParticleEnsemble, PooledWeights, dps_guidance, reverse_step, sample_posterior, tweedie
from .forward import ForwardOperator, NoiseModel, apply_adjoint, apply_forward, sample_measurement
from .masks import DesignParameter, MaskField, MaskSettings, make_mask
from .metrics import MetricReport, dice, psnr, ssim
from .priors import GaussianMixturePrior, gm_score
from .schedule import NoiseSchedule

__version__ = "0.1.0"
