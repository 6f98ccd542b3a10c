"""Diffusion training (L1 noise objective) and ancestral reverse sampling.

Training repeatedly noises clean images to a random timestep with the
closed-form forward process and takes one optimizer step on the L1 distance
between predicted and true noise. Generation starts from pure Gaussian noise
at t = T and walks the learned reverse transition down to t = 0, optionally
recording a trajectory of intermediate snapshots.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from svpgen import frechet, imageio
from svpgen.denoiser import DenoiserUNet, save_checkpoint
from svpgen.imageio import DatasetManifest, ImageTensor, from_model_range
from svpgen.schedule import NoiseSchedule
from svpgen.seeds import derive_seed, rng_for


class NonFiniteLossError(RuntimeError):
    """Raised when training produces a NaN/inf loss; carries diagnostics."""

    def __init__(self, step: int, t_histogram: dict[int, int], grad_norm: float):
        self.step = step
        self.t_histogram = t_histogram
        self.grad_norm = grad_norm
        super().__init__(
            f"non-finite loss at step {step} (grad norm {grad_norm:.3g}, "
            f"batch timesteps {sorted(t_histogram)})"
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 128
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    ema_decay: float | None = 0.995
    seed: int = 0
    snapshot_epochs: tuple[int, ...] = ()
    loss_reduction: str = "mean"
    sigma_mode: str = "posterior"
    fid_samples: int = 100
    fid_extractor: str = "pixel_stats"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.ema_decay is not None and not (0.0 <= self.ema_decay < 1.0):
            raise ValueError("ema_decay must be in [0, 1) or None")
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.loss_reduction!r}")
        if self.sigma_mode not in ("posterior", "beta"):
            raise ValueError(f"unknown sigma mode {self.sigma_mode!r}")


@dataclass
class TrainLog:
    """Per-epoch mean loss and wall-clock, plus FID checkpoints."""

    epochs: list[tuple[int, float, float]] = field(default_factory=list)
    fid_checkpoints: list[tuple[int, float]] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [loss for _, loss, _ in self.epochs]

    def write_csv(self, loss_path, fid_path) -> None:
        loss_path, fid_path = Path(loss_path), Path(fid_path)
        with open(loss_path, "w", encoding="utf-8") as fh:
            fh.write("epoch,loss,seconds\n")
            for epoch, loss, seconds in self.epochs:
                fh.write(f"{epoch},{loss:.8f},{seconds:.3f}\n")
        with open(fid_path, "w", encoding="utf-8") as fh:
            fh.write("epoch,fid\n")
            for epoch, fid in self.fid_checkpoints:
                fh.write(f"{epoch},{fid:.8f}\n")


@dataclass(frozen=True)
class SampleTrajectory:
    """Reverse-process snapshots at strictly decreasing timesteps ending at 0."""

    snapshots: tuple[tuple[int, ImageTensor], ...]
    final: ImageTensor

    def __post_init__(self):
        steps = [t for t, _ in self.snapshots]
        if steps and (any(b >= a for a, b in zip(steps, steps[1:])) or steps[-1] != 0):
            raise ValueError(f"snapshot timesteps must strictly decrease and end at 0, got {steps}")


def l1_noise_loss(eps_hat: torch.Tensor, eps: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Sum (or element-mean) of |eps_hat - eps| over all pixel indices."""
    if eps_hat.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_hat.shape)} vs {tuple(eps.shape)}")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    total = (eps_hat - eps).abs().sum()
    return total if reduction == "sum" else total / eps_hat.numel()


class Ema:
    """Exponential moving average shadow of a parameter set.

    decay = 0 keeps the shadow exactly equal to the live parameters.
    """

    def __init__(self, net: DenoiserUNet, decay: float, state: dict | None = None):
        self.decay = decay
        source = state if state is not None else net.state_dict()
        self.shadow = {k: v.detach().clone() for k, v in source.items()}

    def update(self, net: DenoiserUNet) -> None:
        for k, v in net.state_dict().items():
            self.shadow[k].mul_(self.decay).add_(v.detach(), alpha=1.0 - self.decay)

    def apply_to(self, net: DenoiserUNet) -> None:
        net.load_state_dict(self.shadow)


def _make_optimizer(net: DenoiserUNet, cfg: TrainConfig) -> torch.optim.Optimizer:
    cls = torch.optim.Adam if cfg.optimizer == "adam" else torch.optim.AdamW
    return cls(net.parameters(), lr=cfg.learning_rate)


def train_step(
    net: DenoiserUNet,
    schedule: NoiseSchedule,
    optimizer: torch.optim.Optimizer,
    batch: np.ndarray,
    rng: np.random.Generator,
    reduction: str = "mean",
    ema: Ema | None = None,
    step: int = 0,
) -> float:
    """One optimizer step on a model-range batch; returns the scalar loss.

    Per sample: t ~ Uniform{1..T}, eps ~ N(0, I), x_t from the closed-form
    forward process, loss = L1(net(x_t, t), eps).
    """
    n = batch.shape[0]
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(batch.shape)
    x_t = schedule.q_sample(batch.astype(np.float64), t, eps)

    dtype = next(net.parameters()).dtype
    x_t_th = torch.from_numpy(x_t).to(dtype)
    eps_th = torch.from_numpy(eps).to(dtype)
    t_th = torch.from_numpy(t.astype(np.int64))

    optimizer.zero_grad(set_to_none=True)
    loss = l1_noise_loss(net(x_t_th, t_th), eps_th, reduction=reduction)
    loss.backward()
    if not torch.isfinite(loss):
        grad_norm = torch.sqrt(
            sum((p.grad**2).sum() for p in net.parameters() if p.grad is not None)
        )
        counts = np.bincount(t, minlength=schedule.T + 1)
        hist = {int(i): int(c) for i, c in enumerate(counts) if c}
        raise NonFiniteLossError(step, hist, float(grad_norm))
    optimizer.step()
    if ema is not None:
        ema.update(net)
    return float(loss.detach())


def load_training_images(manifest: DatasetManifest, image_size: int) -> np.ndarray:
    """Standardize manifest images and bring them to model range at image_size."""
    data = imageio.load_standardized(manifest.paths()).data
    if image_size != data.shape[-1]:
        resized = np.empty((data.shape[0], data.shape[1], image_size, image_size), dtype=np.float32)
        for i in range(data.shape[0]):
            hwc = imageio.bilinear_resize(data[i].transpose(1, 2, 0), image_size, image_size)
            resized[i] = hwc.transpose(2, 0, 1)
        data = np.clip(resized, 0.0, 1.0)
    return data.astype(np.float32) * 2.0 - 1.0


def train(
    net: DenoiserUNet,
    schedule: NoiseSchedule,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    run_dir,
    schedule_params: dict | None = None,
    start_epoch: int = 0,
    ema_state: dict | None = None,
) -> tuple[Path, TrainLog]:
    """Full training loop over a single-class manifest.

    Writes checkpoints at the end and at every snapshot epoch, samples a small
    batch at snapshot epochs to track the Fréchet distance against the
    training set, and returns (final checkpoint path, log).
    """
    if len(manifest) == 0:
        raise ValueError("manifest is empty")
    if len(manifest.labels()) != 1:
        raise ValueError(
            f"diffusion models are trained one class at a time; manifest mixes {sorted(manifest.labels())}"
        )
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    schedule_params = schedule_params or {"T": schedule.T}

    data = load_training_images(manifest, net.config.image_size)
    unit_train = ImageTensor((data + 1.0) / 2.0, "unit")
    extractor = frechet.get_extractor(cfg.fid_extractor)

    optimizer = _make_optimizer(net, cfg)
    ema = Ema(net, cfg.ema_decay, state=ema_state) if cfg.ema_decay is not None else None
    log = TrainLog()
    step = 0
    for epoch in range(start_epoch + 1, start_epoch + cfg.epochs + 1):
        rng = rng_for(cfg.seed, "epoch", epoch)
        order = rng.permutation(len(data))
        t0 = time.perf_counter()
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = data[order[lo : lo + cfg.batch_size]]
            losses.append(
                train_step(net, schedule, optimizer, batch, rng, cfg.loss_reduction, ema, step)
            )
            step += 1
        log.epochs.append((epoch, float(np.mean(losses)), time.perf_counter() - t0))

        if epoch in cfg.snapshot_epochs:
            path = ckpt_dir / f"epoch_{epoch:06d}.ckpt"
            save_checkpoint(
                path, net, step, schedule_params, ema.shadow if ema else None, extra={"epoch": epoch}
            )
            fid = _snapshot_fid(
                net, schedule, cfg, ema, unit_train, extractor, epoch,
                grid_path=run_dir / "samples" / f"epoch_{epoch:06d}.png",
            )
            log.fid_checkpoints.append((epoch, fid))

    final_path = ckpt_dir / "final.ckpt"
    save_checkpoint(
        final_path,
        net,
        step,
        schedule_params,
        ema.shadow if ema else None,
        extra={"epoch": start_epoch + cfg.epochs},
    )
    log.write_csv(run_dir / "train_log.csv", run_dir / "fid_checkpoints.csv")
    return final_path, log


def _sampling_net(net: DenoiserUNet, ema: Ema | None) -> DenoiserUNet:
    if ema is None:
        return net
    clone = DenoiserUNet(net.config)
    ema.apply_to(clone)
    return clone


def _snapshot_fid(net, schedule, cfg, ema, unit_train, extractor, epoch, grid_path=None) -> float:
    sampler = _sampling_net(net, ema)
    images, _ = sample(
        sampler,
        schedule,
        n=cfg.fid_samples,
        seed=derive_seed(cfg.seed, "fid", epoch),
        sigma_mode=cfg.sigma_mode,
    )
    if grid_path is not None:
        imageio.save_png_grid(images, grid_path)
    real = frechet.gaussian_stats(frechet.extract_features(unit_train, extractor))
    gen = frechet.gaussian_stats(frechet.extract_features(images, extractor))
    return frechet.frechet_distance(real, gen)


def _reverse_mean(schedule: NoiseSchedule, x_t: np.ndarray, eps_hat: np.ndarray, t: int) -> np.ndarray:
    """mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)."""
    i = t - 1
    return (x_t - schedule.beta[i] / np.sqrt(1.0 - schedule.alpha_bar[i]) * eps_hat) / np.sqrt(
        schedule.alpha[i]
    )


def _sigma(schedule: NoiseSchedule, t: int, mode: str) -> float:
    i = t - 1
    var = schedule.posterior_var[i] if mode == "posterior" else schedule.beta[i]
    return float(np.sqrt(var))


def _predict_noise(net: DenoiserUNet, x_t: np.ndarray, t: int) -> np.ndarray:
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        x_th = torch.from_numpy(np.ascontiguousarray(x_t)).to(dtype)
        t_th = torch.full((x_t.shape[0],), t, dtype=torch.int64)
        return net(x_th, t_th).double().numpy()


def p_sample_step(
    net: DenoiserUNet,
    schedule: NoiseSchedule,
    x_t: np.ndarray,
    t: int,
    rng: np.random.Generator,
    sigma_mode: str = "posterior",
) -> np.ndarray:
    """One reverse transition x_t -> x_{t-1}; deterministic at t = 1."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"timestep {t} out of range 1..{schedule.T}")
    mean = _reverse_mean(schedule, x_t, _predict_noise(net, x_t, t), t)
    if t == 1:
        return mean
    return mean + _sigma(schedule, t, sigma_mode) * rng.standard_normal(x_t.shape)


def sample(
    net: DenoiserUNet,
    schedule: NoiseSchedule,
    n: int,
    snapshot_steps=(),
    seed: int = 0,
    sigma_mode: str = "posterior",
) -> tuple[ImageTensor, SampleTrajectory]:
    """Generate n images by full T-step ancestral sampling from pure noise.

    Each image draws its noise from a stream derived from (seed, image index),
    so splitting the batch across workers cannot change the result. Snapshots
    of x_t are recorded at the requested timesteps (t = T is the initial
    noise, t = 0 the final image).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    shape = (net.config.in_channels, net.config.image_size, net.config.image_size)
    streams = [np.random.default_rng([int(seed), i]) for i in range(n)]
    x = np.stack([g.standard_normal(shape) for g in streams])

    wanted = set(int(s) for s in snapshot_steps)
    snaps: list[tuple[int, ImageTensor]] = []

    def clamp_unit(arr):
        return ImageTensor(((np.clip(arr, -1.0, 1.0) + 1.0) / 2.0).astype(np.float32), "unit")

    if schedule.T in wanted:
        snaps.append((schedule.T, clamp_unit(x)))
    for t in range(schedule.T, 0, -1):
        mean = _reverse_mean(schedule, x, _predict_noise(net, x, t), t)
        if t > 1:
            z = np.stack([g.standard_normal(shape) for g in streams])
            x = mean + _sigma(schedule, t, sigma_mode) * z
        else:
            x = mean
        if t - 1 in wanted and t - 1 != 0:
            snaps.append((t - 1, clamp_unit(x)))

    final = ImageTensor(np.clip(x, -1.0, 1.0).astype(np.float32), "model")
    if wanted:  # a trajectory always terminates with the t = 0 image
        snaps.append((0, clamp_unit(x)))
    trajectory = SampleTrajectory(tuple(snaps), final)
    return from_model_range(final), trajectory


def trajectory_steps(T: int, count: int) -> list[int]:
    """Evenly spaced snapshot timesteps from T down to 0 inclusive."""
    if count < 2:
        raise ValueError("need at least 2 snapshots (start and end)")
    steps = np.unique(np.linspace(T, 0, count).round().astype(int))[::-1]
    return [int(s) for s in steps]
