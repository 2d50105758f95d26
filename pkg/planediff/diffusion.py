"""The forward noising process, denoiser pretraining and a reverse-process sampler.

With a linear variance schedule `beta_0..beta_{T-1}` and
`alpha_bar_t = prod_{s<=t} (1 - beta_s)`, a clean volume is noised in closed form:

```
x_t = sqrt(alpha_bar_t) * x_0 + sqrt(1 - alpha_bar_t) * eps,    eps ~ N(0, I)
```

Pretraining minimizes `||eps - eps_theta(x_t, t)||^2` with `t` uniform over
`[0, T)`, one denoiser per orientation.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Final, List, Sequence, Tuple

import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

from planediff.dataset import StudyStore
from planediff.denoiser import DenoiserConfig, ScheduleConfig, UNet3D, build_denoiser
from planediff.exceptions import DivergedLoss, ShapeMismatch, ValidationFailure
from planediff.seeding import torch_generator
from planediff.synth_data import Split
from planediff.volume import Orientation, VolumeTensor

logger: Final = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep `beta` and cumulative `alpha_bar`, float64, length T."""

    beta: torch.Tensor
    alpha_bar: torch.Tensor = field(init=False)

    def __post_init__(self) -> None:
        if self.beta.dim() != 1 or self.beta.numel() == 0:
            raise ValidationFailure("beta must be a non-empty vector")
        if not bool(((self.beta > 0) & (self.beta < 1)).all()):
            raise ValidationFailure("every beta must lie in (0, 1)")
        object.__setattr__(self, "alpha_bar", torch.cumprod(1.0 - self.beta, dim=0))

    @property
    def T(self) -> int:
        return int(self.beta.numel())

    @property
    def alpha(self) -> torch.Tensor:
        return 1.0 - self.beta

    @staticmethod
    def from_config(config: ScheduleConfig) -> NoiseSchedule:
        return build_schedule(config.T, config.beta_start, config.beta_end)


def build_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linearly spaced betas from `beta_start` to `beta_end`."""
    if T <= 0:
        raise ValidationFailure(f"T must be positive, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValidationFailure(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    return NoiseSchedule(torch.linspace(beta_start, beta_end, T, dtype=torch.float64))


def _coefficients(
    sched: NoiseSchedule, t: int | torch.Tensor, like: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    index = torch.as_tensor(t, dtype=torch.long)
    if bool((index < 0).any()) or bool((index >= sched.T).any()):
        raise ValidationFailure(f"timestep {t} outside [0, {sched.T})")
    a = sched.alpha_bar[index]
    shape = (-1,) + (1,) * (like.dim() - 1) if a.dim() else ()
    return (
        a.sqrt().to(like.dtype).reshape(shape).to(like.device),
        (1.0 - a).sqrt().to(like.dtype).reshape(shape).to(like.device),
    )


def forward_noise(
    x0: VolumeTensor | torch.Tensor,
    t: int | torch.Tensor,
    eps: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """`sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`.

    `t` is an int, or a vector with one timestep per leading batch entry.
    """
    data = x0.data if isinstance(x0, VolumeTensor) else x0
    if eps.shape != data.shape:
        raise ShapeMismatch(f"eps {tuple(eps.shape)} != x0 {tuple(data.shape)}")
    signal, noise = _coefficients(sched, t, data)
    return signal * data + noise * eps


class PretrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    batch_size: int = Field(default=4, gt=0)
    base_lr: float = Field(default=1e-5, gt=0.0)
    """Learning rate per sample; the optimizer uses `base_lr * batch_size`."""
    steps: int = Field(default=500, gt=0)
    seed: int = 0
    log_every: int = Field(default=50, gt=0)

    @property
    def lr(self) -> float:
        return self.base_lr * self.batch_size


def zero_output_hook(module: nn.Module, inputs: Any, output: torch.Tensor) -> torch.Tensor:
    """Forward hook replacing the predicted noise with zeros, keeping the graph."""
    return output * 0.0


@dataclass
class PretrainResult:
    model: UNet3D
    losses: List[float]
    """Loss of every optimizer step."""
    orientation: Orientation


def diffusion_loss(
    model: nn.Module,
    x0: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Mean squared error between `eps` and the prediction from `x_t`."""
    x_t = forward_noise(x0, t, eps, sched)
    return torch.mean((eps - model(x_t, t)) ** 2)


def pretrain_volumes(
    volumes: Sequence[VolumeTensor],
    orientation: Orientation,
    cfg: PretrainConfig,
    sched: NoiseSchedule,
    denoiser: DenoiserConfig | UNet3D,
    on_step: Callable[[int, float], None] | None = None,
) -> PretrainResult:
    if not volumes:
        raise ValidationFailure(f"no training volumes for {orientation.value}")
    model = (
        denoiser
        if isinstance(denoiser, UNet3D)
        else build_denoiser(denoiser, cfg.seed, orientation.value)
    )
    data = torch.stack([v.data for v in volumes])
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    g = torch_generator(cfg.seed, orientation.value, "pretrain")
    losses: List[float] = []
    logger.info(
        f"Pretraining {orientation.value} on {len(volumes)} volumes:"
        f" {cfg.steps} steps, batch {cfg.batch_size}, lr {cfg.lr:g}, T={sched.T}"
    )
    for step in range(cfg.steps):
        index = torch.randint(0, len(volumes), (cfg.batch_size,), generator=g)
        t = torch.randint(0, sched.T, (cfg.batch_size,), generator=g)
        x0 = data[index]
        eps = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
        loss = diffusion_loss(model, x0, t, eps, sched)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise DivergedLoss(step, cfg.lr, value)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if not all(bool(torch.isfinite(p).all()) for p in model.parameters()):
            raise DivergedLoss(step, cfg.lr, value)
        losses.append(value)
        if on_step is not None:
            on_step(step, value)
        if (step + 1) % cfg.log_every == 0:
            window = losses[-cfg.log_every :]
            mean = sum(window) / len(window)
            logger.info(f"{orientation.value} step {step + 1}: loss {mean:.4f}")
    return PretrainResult(model=model, losses=losses, orientation=orientation)


def pretrain(
    store: StudyStore,
    orientation: Orientation,
    cfg: PretrainConfig,
    sched: NoiseSchedule,
    denoiser: DenoiserConfig | UNet3D,
) -> PretrainResult:
    """Pretrain the `orientation` denoiser on every training-split scan of that orientation."""
    volumes = [
        store.volume(scan_id)
        for r in store.records(Split.TRAIN)
        for scan_id in r.scans.get(orientation, ())
    ]
    return pretrain_volumes(volumes, orientation, cfg, sched, denoiser)


def write_loss_curve(path: Path, losses: Sequence[float]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("step", "loss"))
        writer.writerows((i, repr(v)) for i, v in enumerate(losses))
    return path


@torch.no_grad()
def sample(model: UNet3D, sched: NoiseSchedule, n: int, seed: int) -> torch.Tensor:
    """Ancestral sampling of `n` volumes from pure noise, with variance `beta_t`."""
    model.eval()
    g = torch_generator(seed, "sample")
    shape = (n, model.config.in_channels, *model.config.input_shape)
    x = torch.randn(shape, generator=g)
    for t in reversed(range(sched.T)):
        eps = model(x, t)
        beta = float(sched.beta[t])
        scaled = beta / math.sqrt(1.0 - float(sched.alpha_bar[t])) * eps
        mean = (x - scaled) / math.sqrt(1.0 - beta)
        if t > 0:
            x = mean + math.sqrt(beta) * torch.randn(shape, generator=g)
        else:
            x = mean
    return x
