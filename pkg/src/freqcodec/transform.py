"""Analysis side: spatial sampling, the frequency pyramid and per-split hyper-encoders."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import Abs, Conv2d, Module, Sequential, activation
from .tensor import Tensor

SPLITS = ("high", "mid", "low")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``K`` is the pyramid depth (K + 1 frequency splits).  ``linear`` swaps the
    sampling and pyramid convolutions for fixed averaging/identity kernels and
    disables activations, which makes the pyramid identities exact.
    """

    K: int = 2
    base_channels: int = 32
    latent_channels: int = 32
    hyper_channels: int = 16
    attention_reduction: int = 8
    synthesis_kernel: int = 3
    activation: str = "relu"
    linear: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        for field in ("base_channels", "latent_channels", "hyper_channels", "attention_reduction"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be >= 1")
        if self.synthesis_kernel not in (3, 5):
            raise ValueError(f"synthesis_kernel must be 3 or 5, got {self.synthesis_kernel}")
        if self.base_channels % self.attention_reduction:
            raise ValueError(
                f"attention_reduction {self.attention_reduction} must divide "
                f"base_channels {self.base_channels}"
            )
        activation(self.activation)

    @property
    def act(self) -> str:
        return "none" if self.linear else self.activation

    @property
    def downsample_factor(self) -> int:
        # spatial sampling /4, pyramid /2^K, hyper-encoder /4 on the coarsest band
        return 4 * 2**self.K * 4

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))

    @property
    def model_id(self) -> int:
        digest = hashlib.blake2b(self.to_json().encode(), digest_size=8).digest()
        return int.from_bytes(digest, "little")

    def to_records(self) -> dict[str, np.ndarray]:
        out = {}
        for key, value in dataclasses.asdict(self).items():
            if key == "activation":
                value = ["relu", "none"].index(value)
            out[f"config.{key}"] = np.array([float(value)], dtype=np.float32)
        return out

    @classmethod
    def from_records(cls, records: dict) -> "ModelConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            key = f"config.{f.name}"
            if key not in records:
                continue
            value = float(np.asarray(records[key]).reshape(-1)[0])
            if f.name == "activation":
                kwargs[f.name] = ["relu", "none"][int(value)]
            elif f.name == "linear":
                kwargs[f.name] = bool(value)
            else:
                kwargs[f.name] = int(value)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "ModelConfig":
        kwargs = {}
        for line in open(path, encoding="utf-8"):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in {f.name for f in dataclasses.fields(cls)}:
                raise ValueError(f"unknown model config key {key!r}")
            if key == "activation":
                kwargs[key] = value
            elif key == "linear":
                kwargs[key] = value.lower() in ("1", "true", "yes")
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)


DESK = ModelConfig()
PAPER = ModelConfig(base_channels=128, latent_channels=192, hyper_channels=128)
PRESETS = {"desk": DESK, "paper": PAPER}


def _average_kernel(out_ch: int, in_ch: int, per_channel: bool) -> np.ndarray:
    w = np.zeros((out_ch, in_ch, 2, 2), dtype=np.float32)
    if per_channel:
        for c in range(out_ch):
            w[c, c] = 0.25
    else:
        w[:] = 0.25 / in_ch
    return w


def _fixed_conv(weight: np.ndarray, stride: int) -> Conv2d:
    out_ch, in_ch, k, _ = weight.shape
    conv = Conv2d(in_ch, out_ch, k, stride, padding=0)
    conv.weight = Tensor(weight)  # not a parameter: fixed kernel
    conv.bias = None
    return conv


def average_pool_conv(channels: int) -> Conv2d:
    """2x2 average pooling expressed as a fixed stride-2 conv."""
    return _fixed_conv(_average_kernel(channels, channels, True), 2)


def identity_conv(channels: int) -> Conv2d:
    return _fixed_conv(np.eye(channels, dtype=np.float32).reshape(channels, channels, 1, 1), 1)


class SpatialSampler(Module):
    """Two stride-2 convolutions: X [N,3,m,n] -> I [N,C,m/4,n/4]."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c = cfg.base_channels
        if cfg.linear:
            self.net = Sequential(
                _fixed_conv(_average_kernel(c, 3, False), 2),
                _fixed_conv(_average_kernel(c, c, True), 2),
            )
        else:
            self.net = Sequential(
                Conv2d(3, c, 3, 2, rng), activation(cfg.act), Conv2d(c, c, 3, 2, rng)
            )

    def forward(self, x: Tensor) -> Tensor:
        _, _, m, n = x.shape
        if m % 4 or n % 4:
            raise ValueError(
                f"image {m}x{n} is not divisible by 4; pad to "
                f"{-(-m // 4) * 4}x{-(-n // 4) * 4} (the codec pads to multiples of 64)"
            )
        return self.net(x)


class FrequencyPyramid(Module):
    """Laplacian-style decomposition of I into K + 1 bands.

    With K=2 the bands are, coarse to fine::

        high = down(down(I))
        mid  = down(I) - up(high)
        low  = same(I) - up(mid)

    ``down`` (stride-2 conv) is evaluated once per level and shared between
    the band that uses it directly and the coarser band built from it.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c = cfg.base_channels
        self.K = cfg.K
        if cfg.linear:
            self.down = [average_pool_conv(c) for _ in range(cfg.K)]
            self.same = identity_conv(c)
        else:
            self.down = [Conv2d(c, c, 3, 2, rng) for _ in range(cfg.K)]
            self.same = Conv2d(c, c, 3, 1, rng)

    def levels(self, feat: Tensor) -> list[Tensor]:
        """[same(I), down(I), down(down(I)), ...] -- the pre-subtraction features."""
        feats = [feat]
        for conv in self.down:
            feats.append(conv(feats[-1]))
        return [self.same(feat)] + feats[1:]

    def forward(self, feat: Tensor) -> list[Tensor]:
        _, _, h, w = feat.shape
        step = 2**self.K
        if h % step or w % step:
            raise ValueError(f"feature {h}x{w} must be divisible by {step}")
        levels = self.levels(feat)
        bands = [levels[-1]]
        for lvl in reversed(levels[:-1]):
            bands.append(lvl - T.bilinear_upsample2x(bands[-1]))
        return bands


class Unify(Module):
    """Per-split F'_k: two stride-1 convs mapping a band to latent channels."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.net = Sequential(
            Conv2d(cfg.base_channels, cfg.latent_channels, 3, 1, rng),
            activation(cfg.act),
            Conv2d(cfg.latent_channels, cfg.latent_channels, 3, 1, rng),
        )

    def forward(self, band: Tensor) -> Tensor:
        return self.net(band)


class HyperEncoder(Module):
    """z = conv5/2(act(conv5/2(act(conv3/1(|y|)))))."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        m, h = cfg.latent_channels, cfg.hyper_channels
        self.net = Sequential(
            Abs(),
            Conv2d(m, h, 3, 1, rng),
            activation(cfg.act),
            Conv2d(h, h, 5, 2, rng),
            activation(cfg.act),
            Conv2d(h, h, 5, 2, rng),
        )

    def forward(self, y: Tensor) -> Tensor:
        return self.net(y)


class AnalysisTransform(Module):
    """X -> per-split latents y_k (dict keyed by split name for K=2)."""

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.sampler = SpatialSampler(cfg, rng)
        self.pyramid = FrequencyPyramid(cfg, rng)
        self.unify = [Unify(cfg, rng) for _ in range(cfg.K + 1)]

    def spatial_sample(self, x: Tensor) -> Tensor:
        return self.sampler(x)

    def decompose(self, feat: Tensor) -> dict[str, Tensor]:
        return dict(zip(split_names(self.cfg.K), self.pyramid(feat)))

    def forward(self, x: Tensor) -> dict[str, Tensor]:
        bands = self.decompose(self.spatial_sample(x))
        return {k: f(bands[k]) for k, f in zip(bands, self.unify)}


def split_names(K: int) -> tuple[str, ...]:
    if K == 2:
        return SPLITS
    return tuple(f"band{i}" for i in range(K + 1))
