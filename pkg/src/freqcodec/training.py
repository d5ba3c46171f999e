"""Rate-distortion training: loss assembly, Adam with plateau halving, checkpoints."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .entropy import estimate_rate, rate_bits
from .imageio import ImageBuffer, pad_to_multiple
from .metrics import ms_ssim_tensor
from .model import FrequencyCodec
from .optim import Adam, NonFiniteGradientError, clip_grad_norm
from .tensor import Tensor
from .transform import SPLITS

log = logging.getLogger(__name__)

MSE_LAMBDAS = (0.0035, 0.0067, 0.01, 0.025)
MSSSIM_LAMBDAS = (4.0, 16.0, 40.0, 120.0)
METRICS = ("mse", "ms-ssim")
# MSE inside the loss is measured on the 8-bit scale so the usual lambdas apply
MSE_LOSS_SCALE = 255.0**2


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, reports: list):
        super().__init__(message)
        self.reports = reports


@dataclass(frozen=True)
class TrainConfig:
    lmbda: float = 0.01
    metric: str = "mse"
    batch_size: int = 8
    crop: int = 64
    lr: float = 1e-4
    patience: int = 5
    max_iters: int = 2000
    seed: int = 0
    eval_every: int = 100
    threshold: float = 1e-4
    clip_norm: float = 0.0  # global gradient-norm clip; 0 disables

    def __post_init__(self):
        if not self.lmbda > 0:
            raise ValueError(f"lambda must be positive, got {self.lmbda}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.crop <= 0 or self.crop % 64:
            raise ValueError(f"crop size must be a positive multiple of 64, got {self.crop}")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0")
        if self.patience < 1 or self.eval_every < 1 or self.max_iters < 0:
            raise ValueError("patience and eval_every must be >= 1, max_iters >= 0")

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip().replace("-", "_"), value.strip()
            if key == "lambda":
                key = "lmbda"
            if not sep or key not in types:
                raise ValueError(f"bad config line {raw!r}")
            kind = types[key]
            kwargs[key] = value if kind == "str" else (int(value) if kind == "int" else float(value))
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))


@dataclass
class RdReport:
    iteration: int
    bpp: float
    distortion: float
    loss: float
    lr: float
    latent_bits: dict = field(default_factory=dict)
    hyper_bits: dict = field(default_factory=dict)
    psnr: float = float("nan")


CSV_FIELDS = ("iteration", "bpp", "distortion", "loss", "lr")


def reports_to_csv(reports: Sequence[RdReport], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for r in reports:
            writer.writerow([r.iteration, f"{r.bpp:.6f}", f"{r.distortion:.6f}", f"{r.loss:.6f}", r.lr])


# ---------------------------------------------------------------------------
# loss pieces
# ---------------------------------------------------------------------------


def _total(values):
    values = list(values.values()) if isinstance(values, dict) else list(values)
    out = 0.0
    for v in values:
        if not isinstance(v, Tensor) and float(v) < 0:
            raise ValueError("rates must be non-negative")
        out = v + out if isinstance(v, Tensor) else out + float(v)
    return out


def rd_loss(latent_rates, hyper_rates, distortion, lmbda: float, n_pixels: int):
    """(sum of latent and hyper bits) / n_pixels + lambda * D.

    Works on floats or Tensors; returns the same kind.
    """
    if n_pixels <= 0:
        raise ValueError("pixel count must be positive")
    d_val = distortion.item() if isinstance(distortion, Tensor) else float(distortion)
    if math.isnan(d_val):
        raise ValueError("distortion is NaN")
    bits = _total(latent_rates) + _total(hyper_rates)
    return bits * (1.0 / n_pixels) + distortion * lmbda


def distortion(x, x_hat, metric: str = "mse"):
    """MSE on the [0,1] scale, or 1 - MS-SSIM; Tensor in, Tensor out."""
    x, x_hat = T._wrap(x), T._wrap(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    if metric == "mse":
        return ((x - x_hat) ** 2).mean()
    if metric == "ms-ssim":
        return 1.0 - ms_ssim_tensor(x, x_hat, data_range=1.0)
    raise ValueError(f"unknown metric {metric!r}")


def loss_distortion(x, x_hat, metric: str = "mse"):
    """Distortion on the scale the lambda grids expect (8-bit MSE or 1 - MS-SSIM)."""
    d = distortion(x, x_hat, metric)
    return d * MSE_LOSS_SCALE if metric == "mse" else d


def split_rates(latents, differentiable: bool = True):
    fn = rate_bits if differentiable else (lambda p: estimate_rate(p.data))
    y_bits = {s: fn(latents.y_likelihood[s]) for s in latents.y_likelihood}
    z_bits = {s: fn(latents.z_likelihood[s]) for s in latents.z_likelihood}
    return y_bits, z_bits


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def _as_float_images(images) -> list[np.ndarray]:
    out = []
    for img in images:
        if isinstance(img, ImageBuffer):
            out.append(img.to_float()[0])
        else:
            out.append(np.asarray(img, dtype=np.float32))
    return out


def sample_batch(images: list[np.ndarray], cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Random crops with random horizontal flips, [B, 3, crop, crop]."""
    batch = np.empty((cfg.batch_size, 3, cfg.crop, cfg.crop), dtype=np.float32)
    for b in range(cfg.batch_size):
        img = images[rng.integers(len(images))]
        _, h, w = img.shape
        if h < cfg.crop or w < cfg.crop:
            raise ValueError(f"{h}x{w} image is smaller than the {cfg.crop}px crop")
        top = rng.integers(h - cfg.crop + 1)
        left = rng.integers(w - cfg.crop + 1)
        patch = img[:, top : top + cfg.crop, left : left + cfg.crop]
        batch[b] = patch[:, :, ::-1] if rng.random() < 0.5 else patch
    return batch


def split_holdout(items: Sequence, fraction: float = 0.1, seed: int = 0) -> tuple[list, list]:
    """Deterministic train/held-out split; at least one item each when possible."""
    items = list(items)
    if len(items) < 2:
        return items, items
    order = np.random.default_rng(seed).permutation(len(items))
    k = min(max(1, int(round(fraction * len(items)))), len(items) - 1)
    held = [items[i] for i in sorted(order[:k])]
    train = [items[i] for i in sorted(order[k:])]
    return train, held


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(model: FrequencyCodec, images, lmbda: float, metric: str = "mse", iteration: int = 0,
             lr: float = 0.0) -> RdReport:
    """Round-mode rate estimate and distortion, averaged over images."""
    bits_y = {s: 0.0 for s in SPLITS}
    bits_z = {s: 0.0 for s in SPLITS}
    n_pix, d_sum, mse_sum = 0, 0.0, 0.0
    with T.no_grad():
        for img in images:
            buf = img if isinstance(img, ImageBuffer) else ImageBuffer.from_float(img)
            padded, (h, w) = pad_to_multiple(buf)
            x = Tensor(padded.to_float())
            res = model(x, mode="round")
            y_bits, z_bits = split_rates(res.latents, differentiable=False)
            for s in y_bits:
                bits_y[s] += y_bits[s]
                bits_z[s] += z_bits[s]
            x_hat = Tensor(np.clip(res.x_hat.data[:, :, :h, :w], 0.0, 1.0))
            x_ref = Tensor(x.data[:, :, :h, :w])
            d_sum += loss_distortion(x_ref, x_hat, metric).item() * h * w
            mse_sum += distortion(x_ref, x_hat, "mse").item() * h * w
            n_pix += h * w
    bpp = (sum(bits_y.values()) + sum(bits_z.values())) / n_pix
    d = d_sum / n_pix
    mse = mse_sum / n_pix
    psnr = float("inf") if mse == 0 else 10 * math.log10(1.0 / mse)
    return RdReport(iteration, bpp, d, bpp + lmbda * d, lr, bits_y, bits_z, psnr)


def smoothed(values: Sequence[float], window: int = 10) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    reports: list
    train_losses: list
    final_lr: float


def train(
    model: FrequencyCodec,
    images,
    config: TrainConfig,
    eval_images=None,
    checkpoint_path=None,
    csv_path=None,
    callback: Optional[Callable[[RdReport], None]] = None,
) -> TrainResult:
    """Noise-quantized RD training with Adam; lr halves on eval-loss plateaus.

    ``eval_images`` defaults to the training images.  A checkpoint is written
    after every evaluation; on divergence the last good weights are restored
    (and left on disk) before :class:`TrainingDiverged` is raised.
    """
    data = _as_float_images(images)
    if not data:
        raise ValueError("training set is empty")
    eval_set = list(images if eval_images is None else eval_images)
    rng = np.random.default_rng(config.seed)
    data_rng, noise_rng = rng.spawn(2)
    opt = Adam(model.named_parameters(), lr=config.lr)
    n_pixels = config.batch_size * config.crop * config.crop

    reports: list[RdReport] = []
    losses: list[float] = []
    best, bad = math.inf, 0
    good_state = model.state_dict()

    def do_eval(it: int) -> None:
        nonlocal best, bad, good_state
        rep = evaluate(model, eval_set, config.lmbda, config.metric, it, opt.lr)
        if not math.isfinite(rep.loss):
            fail(it, "evaluation loss is not finite")
        reports.append(rep)
        log.info("iter %d bpp %.4f D %.4f loss %.4f psnr %.2f lr %.2g",
                 it, rep.bpp, rep.distortion, rep.loss, rep.psnr, opt.lr)
        good_state = model.state_dict()
        if checkpoint_path is not None:
            model.update_tables()
            model.save(checkpoint_path)
        if csv_path is not None:
            reports_to_csv(reports, csv_path)
        if callback is not None:
            callback(rep)
        if rep.loss < best - config.threshold:
            best, bad = rep.loss, 0
        else:
            bad += 1
            if bad >= config.patience:
                opt.lr = opt.lr / 2
                bad = 0

    def fail(it: int, why: str):
        model.load_state_dict(good_state)
        model.update_tables()
        raise TrainingDiverged(f"training diverged at iteration {it}: {why}", reports)

    do_eval(0)
    for it in range(1, config.max_iters + 1):
        x = Tensor(sample_batch(data, config, data_rng))
        res = model(x, mode="noise", rng=noise_rng)
        y_bits, z_bits = split_rates(res.latents)
        try:
            loss = rd_loss(y_bits, z_bits, loss_distortion(x, res.x_hat, config.metric),
                           config.lmbda, n_pixels)
        except ValueError as exc:
            fail(it, str(exc))
        value = loss.item()
        if not math.isfinite(value):
            fail(it, "loss is not finite")
        opt.zero_grad()
        loss.backward()
        if config.clip_norm:
            clip_grad_norm([p for _, p in opt.params], config.clip_norm)
        try:
            opt.step()
        except NonFiniteGradientError as exc:
            fail(it, str(exc))
        losses.append(value)
        if it % config.eval_every == 0 or it == config.max_iters:
            do_eval(it)
    model.update_tables()
    return TrainResult(reports, losses, opt.lr)
