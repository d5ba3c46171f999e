"""Synthesis side: hyper-decoders, criss-cross attention and SUM fusion of split branches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from . import tensor as T
from .entropy import SCALE_LOWER_BOUND
from .nn import Conv2d, ConvTranspose2d, Module, Sequential, activation
from .tensor import Tensor
from .transform import SPLITS, ModelConfig

# container flag bits
SPLIT_BITS = {"low": 1, "mid": 2, "high": 4}


@dataclass(frozen=True)
class SplitMask:
    high: bool = True
    mid: bool = True
    low: bool = True

    def __post_init__(self):
        if not (self.high or self.mid or self.low):
            raise ValueError("at least one frequency split must be enabled")

    @property
    def enabled(self) -> tuple[str, ...]:
        return tuple(s for s in SPLITS if getattr(self, s))

    def __contains__(self, split: str) -> bool:
        return getattr(self, split)

    @property
    def flags(self) -> int:
        return sum(SPLIT_BITS[s] for s in self.enabled)

    @classmethod
    def from_flags(cls, flags: int) -> "SplitMask":
        return cls(**{s: bool(flags & bit) for s, bit in SPLIT_BITS.items()})

    @classmethod
    def of(cls, splits: Iterable[str]) -> "SplitMask":
        splits = set(splits)
        unknown = splits - set(SPLITS)
        if unknown:
            raise ValueError(f"unknown split(s) {sorted(unknown)}; choose from {SPLITS}")
        return cls(**{s: s in splits for s in SPLITS})

    @classmethod
    def parse(cls, text: str) -> "SplitMask":
        return cls.of(p.strip() for p in text.split(",") if p.strip())

    def issubset(self, other: "SplitMask") -> bool:
        return all(getattr(other, s) for s in self.enabled)

    def __str__(self) -> str:
        return ",".join(self.enabled)


FULL = SplitMask()


class HyperDecoder(Module):
    """z_hat -> sigma: two x2 transposed convs, a 3x3 conv, exp, lower bound."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        h, m = cfg.hyper_channels, cfg.latent_channels
        self.net = Sequential(
            ConvTranspose2d(h, h, 5, 2, rng),
            activation(cfg.act),
            ConvTranspose2d(h, h, 5, 2, rng),
            activation(cfg.act),
        )
        self.out = Conv2d(h, m, 3, 1, rng)
        self.out.weight.data *= 0.1

    def forward(self, z_hat: Tensor) -> Tensor:
        return T.lower_bound(T.exp(self.out(self.net(z_hat))), SCALE_LOWER_BOUND)


class CrissCrossAttention(Module):
    """Row+column attention with a plain residual.

    Each position attends over the H + W - 1 positions of its row and column
    (itself counted once).  Query/key are 1x1 convs C -> C/r, value C -> C.
    """

    def __init__(self, channels: int, reduction: int = 8, rng: Optional[np.random.Generator] = None):
        if channels % reduction:
            raise ValueError(f"reduction {reduction} must divide channels {channels}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels, self.reduction = channels, reduction
        self.query = Conv2d(channels, channels // reduction, 1, 1, rng)
        self.key = Conv2d(channels, channels // reduction, 1, 1, rng)
        self.value = Conv2d(channels, channels, 1, 1, rng)

    def forward(self, f: Tensor) -> Tensor:
        _, c, h, w = f.shape
        if c != self.channels:
            raise ValueError(f"attention built for {self.channels} channels, got {c}")
        q, k, v = self.query(f), self.key(f), self.value(f)
        # column energies e_col[n,i,j,k] = <q[:,i,j], k[:,k,j]>, batched over (n, j)
        e_col = T.matmul(q.transpose(0, 3, 2, 1), k.transpose(0, 3, 1, 2))  # [N,W,H,H]
        diag = np.where(np.eye(h, dtype=bool), -np.inf, 0.0).astype(f.dtype)
        e_col = (e_col + diag).transpose(0, 2, 1, 3)  # [N,H,W,H]
        # row energies e_row[n,i,j,k] = <q[:,i,j], k[:,i,k]>, batched over (n, i)
        e_row = T.matmul(q.transpose(0, 2, 3, 1), k.transpose(0, 2, 1, 3))  # [N,H,W,W]
        attn = T.softmax(T.concat([e_col, e_row], axis=3), axis=3)
        a_col = attn[:, :, :, :h].transpose(0, 2, 1, 3)  # [N,W,H,H]
        out_col = T.matmul(a_col, v.transpose(0, 3, 2, 1)).transpose(0, 3, 2, 1)
        out_row = T.matmul(attn[:, :, :, h:], v.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)
        out = out_col + out_row
        return f + out


class SynthesisBranch(Module):
    """R_k: stride-2 transposed convs up to full resolution, attention after the first."""

    def __init__(self, cfg: ModelConfig, n_up: int, rng: np.random.Generator):
        c, k = cfg.base_channels, cfg.synthesis_kernel
        layers: list = [ConvTranspose2d(cfg.latent_channels, c, k, 2, rng), activation(cfg.act)]
        layers.append(CrissCrossAttention(c, cfg.attention_reduction, rng))
        for _ in range(n_up - 2):
            layers += [ConvTranspose2d(c, c, k, 2, rng), activation(cfg.act)]
        last = ConvTranspose2d(c, 3, k, 2, rng)
        last.weight.data *= 0.1  # keep the summed branch outputs small at init
        layers.append(last)
        self.net = Sequential(*layers)
        self.n_up = n_up

    def forward(self, y_hat: Tensor) -> Tensor:
        return self.net(y_hat)


class FrequencyFusion(Module):
    """Per-split branches combined by a point-wise SUM."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        # low sits at I's resolution (x4 to the image), each coarser split one more x2
        self.branches = {
            s: SynthesisBranch(cfg, n_up, rng) for s, n_up in zip(SPLITS, (4, 3, 2))
        }

    def branch(self, split: str, y_hat: Tensor) -> Tensor:
        return self.branches[split](y_hat)

    def forward(self, y_hat: dict, mask: SplitMask = FULL) -> Tensor:
        out = None
        for split in mask.enabled:
            if split not in y_hat:
                raise KeyError(f"split {split!r} enabled but its latent is missing")
            part = self.branch(split, y_hat[split])
            out = part if out is None else out + part
        return out
