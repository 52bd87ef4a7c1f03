"""Denoising score matching for the VP-SDE with small torch networks.

The network predicts the injected noise ``eps`` from ``(theta_t, t)``; the
score is ``-eps_hat / sqrt(1 - alpha_bar(t))``. Trained models expose the
numpy ``score(states, t)`` interface used by the samplers, plus a
Hessian-vector product through autograd.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
from torch import nn

from .schedule import T_FLOOR, NoiseSchedule

log = logging.getLogger(__name__)

MAGIC = b"KSBEDNET"
FORMAT_VERSION = 1


@dataclass
class TrainingConfig:
    steps: int = 3000
    batch_size: int = 256
    learning_rate: float = 2e-3
    hidden: int = 128
    depth: int = 3
    channels: int = 32
    grad_clip: float = 1.0
    ema_rate: float = 0.99
    lambda_weighting: str = "variance"
    decay_fraction: float = 0.95
    final_lr_fraction: float = 0.01
    log_time_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.ema_rate < 1:
            raise ValueError("ema_rate must lie in [0, 1)")
        if not 0 <= self.log_time_fraction <= 1:
            raise ValueError("log_time_fraction must lie in [0, 1]")
        if self.lambda_weighting not in ("variance", "uniform"):
            raise ValueError(f"unknown lambda_weighting {self.lambda_weighting!r}")


TIME_FEATURES = 16


def _time_features(t: torch.Tensor, tf: float) -> torch.Tensor:
    """Fourier features of ``t / tf`` and of log time (resolves small ``t``)."""
    freqs = (torch.arange(TIME_FEATURES // 4, dtype=t.dtype) + 1.0) * math.pi
    lin = (t / tf)[:, None] * freqs[None]
    u = torch.log(t.clamp_min(T_FLOOR) / tf) / math.log(T_FLOOR / tf)
    lg = u[:, None] * freqs[None]
    return torch.cat([torch.sin(lin), torch.cos(lin), torch.sin(lg), torch.cos(lg)], dim=1)


class MLPNoisePredictor(nn.Module):
    """Fully connected eps-predictor for flat vectors."""

    def __init__(self, dim: int, hidden: int = 128, depth: int = 3, tf: float = 2.0):
        super().__init__()
        self.dim, self.tf = dim, tf
        layers: List[nn.Module] = []
        width = dim + TIME_FEATURES
        for _ in range(depth):
            layers += [nn.Linear(width, hidden), nn.SiLU()]
            width = hidden
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(hidden, dim)
        # zero head: eps_hat = 0 at initialization
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        h = torch.cat([x, _time_features(t, self.tf)], dim=1)
        return self.head(self.body(h))


class ConvNoisePredictor(nn.Module):
    """Small convolutional eps-predictor on ``[Re x, Im x, z]`` image channels."""

    def __init__(self, shape: Tuple[int, int], channels: int = 32, depth: int = 3, tf: float = 2.0):
        super().__init__()
        self.shape, self.tf = tuple(shape), tf
        self.dim = 3 * shape[0] * shape[1]
        self.inp = nn.Conv2d(3, channels, 3, padding=1)
        self.temb = nn.Linear(TIME_FEATURES, channels)
        self.blocks = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=1) for _ in range(depth)
        )
        self.out = nn.Conv2d(channels, 3, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        r, c = self.shape
        h = self.inp(x.reshape(-1, 3, r, c))
        h = h + self.temb(_time_features(t, self.tf))[:, :, None, None]
        for conv in self.blocks:
            h = h + conv(nn.functional.silu(h))
        return self.out(nn.functional.silu(h)).reshape(-1, self.dim)


def _build(arch: str, dim: int, shape, config: TrainingConfig, tf: float) -> nn.Module:
    if arch == "mlp":
        return MLPNoisePredictor(dim, config.hidden, config.depth, tf)
    if arch == "conv":
        if shape is None or 3 * shape[0] * shape[1] != dim:
            raise ValueError("conv architecture needs a shape matching 3 * rows * cols")
        return ConvNoisePredictor(shape, config.channels, config.depth, tf)
    raise ValueError(f"unknown architecture {arch!r}")


class TrainedScoreModel:
    """Score model backed by an eps-predicting network."""

    def __init__(self, net: nn.Module, schedule: NoiseSchedule, arch: str, shape=None, config=None):
        self.net = net.eval()
        self.schedule = schedule
        self.arch = arch
        self.shape = tuple(shape) if shape is not None else None
        self.config = config or TrainingConfig()

    @property
    def dim(self) -> int:
        return self.net.dim

    def _torch(self, states, t):
        x = torch.as_tensor(np.atleast_2d(states), dtype=torch.float32)
        tt = torch.full((x.shape[0],), float(t), dtype=torch.float32)
        sd = math.sqrt(1.0 - float(self.schedule.alpha_bar(t)))
        return x, tt, sd

    def score(self, states, t: float) -> np.ndarray:
        x, tt, sd = self._torch(states, t)
        with torch.no_grad():
            eps = self.net(x, tt)
        out = (-eps / sd).double().numpy()
        return out if np.ndim(states) > 1 else out[0]

    def hvp(self, states, t: float, v) -> np.ndarray:
        """``(d score / d theta) v`` per state by reverse-mode autodiff."""
        x, tt, sd = self._torch(states, t)
        x.requires_grad_(True)
        vv = torch.as_tensor(np.atleast_2d(v), dtype=torch.float32)
        s = -self.net(x, tt) / sd
        (jv,) = torch.autograd.grad((s * vv).sum(), x)
        # the network Jacobian is not symmetric; use J^T v (exact for a true score)
        return jv.double().numpy()

    def save(self, path) -> None:
        header = {
            "arch": self.arch,
            "dim": self.dim,
            "shape": self.shape,
            "schedule": asdict(self.schedule),
            "config": asdict(self.config),
        }
        buf = io.BytesIO()
        np.savez(buf, **{k: v.detach().numpy() for k, v in self.net.state_dict().items()})
        head = json.dumps(header).encode()
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", FORMAT_VERSION, len(head)))
            fh.write(head)
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path) -> "TrainedScoreModel":
        data = Path(path).read_bytes()
        if not data.startswith(MAGIC):
            raise ValueError(f"{path}: not a score-model file")
        version, n = struct.unpack_from("<II", data, len(MAGIC))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        start = len(MAGIC) + 8
        header = json.loads(data[start : start + n])
        arrays = np.load(io.BytesIO(data[start + n :]))
        config = TrainingConfig(**header["config"])
        schedule = NoiseSchedule(**header["schedule"])
        shape = tuple(header["shape"]) if header["shape"] else None
        net = _build(header["arch"], header["dim"], shape, config, schedule.tf)
        net.load_state_dict({k: torch.from_numpy(arrays[k]) for k in arrays.files})
        return cls(net, schedule, header["arch"], shape, config)


def _sample_times(config: TrainingConfig, tf: float, gen: torch.Generator) -> torch.Tensor:
    u = torch.rand(config.batch_size, generator=gen, dtype=torch.float64)
    t = T_FLOOR + (tf - T_FLOOR) * u
    n_log = int(round(config.log_time_fraction * config.batch_size))
    if n_log:
        t[:n_log] = T_FLOOR * (tf / T_FLOOR) ** u[:n_log]
    return t.float()


def train_denoiser(
    data: np.ndarray,
    schedule: NoiseSchedule = NoiseSchedule(),
    config: TrainingConfig = TrainingConfig(),
    arch: str = "mlp",
    shape=None,
) -> Tuple[TrainedScoreModel, np.ndarray]:
    """Fit an eps-predictor by denoising score matching.

    Times are drawn uniformly on ``[T_FLOOR, tf]``, except for a fraction
    ``log_time_fraction`` of each batch drawn log-uniformly to resolve small
    times. With ``variance``
    weighting ``lambda(t) = 1 - alpha_bar`` the loss is the eps-prediction
    error ``|eps_hat - eps|^2``; ``uniform`` weighting divides it by
    ``1 - alpha_bar``. Optimization uses Adam with gradient-norm clipping and
    a cosine learning-rate decay; the returned model holds an exponential
    moving average of the weights.

    Returns:
        The trained model and the per-step training losses.
    """
    data = np.asarray(data, dtype=np.float32)
    if data.size == 0:
        raise ValueError("training data is empty")
    data = np.atleast_2d(data)
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    x_all = torch.from_numpy(data)
    n, dim = x_all.shape
    net = _build(arch, dim, shape, config, schedule.tf)
    ema = _build(arch, dim, shape, config, schedule.tf)
    ema.load_state_dict(net.state_dict())
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    decay_steps = max(1, int(config.decay_fraction * config.steps))

    def lr_at(step):
        p = min(step / decay_steps, 1.0)
        lo = config.final_lr_fraction
        return config.learning_rate * (lo + (1 - lo) * 0.5 * (1 + math.cos(math.pi * p)))

    losses = np.empty(config.steps)
    for step in range(config.steps):
        idx = torch.randint(n, (config.batch_size,), generator=gen)
        x0 = x_all[idx]
        t = _sample_times(config, schedule.tf, gen)
        a = torch.from_numpy(np.asarray(schedule.alpha_bar(t.double().numpy()), dtype=np.float32))
        eps = torch.randn(x0.shape, generator=gen)
        xt = a.sqrt()[:, None] * x0 + (1 - a).sqrt()[:, None] * eps
        err = ((net(xt, t) - eps) ** 2).sum(dim=1)
        if config.lambda_weighting == "uniform":
            err = err / (1 - a)
        loss = err.mean()
        if not torch.isfinite(loss):
            raise FloatingPointError(f"training loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(net.parameters(), config.grad_clip)
        for g in opt.param_groups:
            g["lr"] = lr_at(step)
        opt.step()
        with torch.no_grad():
            for pe, p in zip(ema.parameters(), net.parameters()):
                pe.mul_(config.ema_rate).add_(p, alpha=1 - config.ema_rate)
        losses[step] = loss.item()
        if step % 500 == 0:
            log.info("step %d loss %.4f", step, losses[step])
    return TrainedScoreModel(ema, schedule, arch, shape, config), losses


def smooth_losses(losses, window: int = 100) -> np.ndarray:
    """Trailing moving average (valid part only)."""
    losses = np.asarray(losses, dtype=float)
    window = min(window, losses.size)
    c = np.cumsum(np.insert(losses, 0, 0.0))
    return (c[window:] - c[:-window]) / window
