"""Quantization, likelihood models, rate estimation and quantized CDF tables."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special

from . import tensor as T
from .nn import Module, parameter
from .tensor import Tensor

LIKELIHOOD_FLOOR = 2.0**-24
PRECISION = 16
TAIL_MASS = 1e-9
MAX_SUPPORT = 1 << 15
SCALE_LOWER_BOUND = 0.11
SCALE_TABLE = np.exp(np.linspace(np.log(SCALE_LOWER_BOUND), np.log(256.0), 64))


def quantize(y: Tensor, mode: str = "round", rng: Optional[np.random.Generator] = None) -> Tensor:
    """Additive uniform noise (training) or round-half-to-even (inference).

    Round mode uses a straight-through gradient when it ends up inside a graph.
    """
    if mode == "noise":
        if rng is None:
            raise ValueError("noise quantization needs a seeded numpy Generator")
        noise = rng.uniform(-0.5, 0.5, size=y.shape).astype(y.dtype)
        return T.add(y, noise)
    if mode == "round":
        return T.round_ste(y)
    raise ValueError(f"unknown quantization mode {mode!r}")


def gaussian_likelihood(
    y_hat: Tensor, sigma: Tensor, lower_bound: float = SCALE_LOWER_BOUND, diagnostics=None
) -> Tensor:
    """Probability mass of the unit bin around y_hat under N(0, sigma^2)."""
    sigma = T._wrap(sigma)
    if diagnostics is not None:
        diagnostics["nonpositive_scales"] = diagnostics.get("nonpositive_scales", 0) + int(
            np.count_nonzero(sigma.data <= 0)
        )
    sigma = T.lower_bound(sigma, lower_bound)
    v = T.absolute(y_hat)
    upper = T.normal_cdf((0.5 - v) / sigma)
    lower = T.normal_cdf((-0.5 - v) / sigma)
    return T.lower_bound(upper - lower, LIKELIHOOD_FLOOR)


def rate_bits(p: Tensor) -> Tensor:
    """Differentiable total information content, sum(-log2 p)."""
    return T.tsum(T.log(p)) * (-1.0 / np.log(2.0))


def estimate_rate(p) -> float:
    """sum(-log2 p) accumulated in 64 bits."""
    arr = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    if np.any(arr <= 0) or np.any(arr > 1.0 + 1e-6):
        raise ValueError("probabilities must lie in (0, 1]")
    return float(-np.sum(np.log2(arr)))


class FactorizedDensity(Module):
    """Channel-wise learned univariate density (monotone cumulative composition).

    c(x) = sigmoid(f_K o ... o f_1(x)),  f_k(x) = g_k(H_k x + b_k),
    g_k(x) = x + tanh(a_k) * tanh(x) for all but the last layer, with H_k
    reparameterized through softplus so every layer is non-decreasing.
    """

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 10.0):
        self.channels = channels
        self.filters = tuple(filters)
        dims = (1,) + self.filters + (1,)
        scale = init_scale ** (1.0 / (len(self.filters) + 1))
        rng = np.random.default_rng(12345)
        self.matrices, self.biases, self.factors = [], [], []
        for i in range(len(dims) - 1):
            init = np.log(np.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(parameter(np.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(parameter(rng.uniform(-0.5, 0.5, (channels, dims[i + 1], 1))))
            if i < len(dims) - 2:
                self.factors.append(parameter(np.zeros((channels, dims[i + 1], 1))))

    def logits_cumulative(self, x: Tensor) -> Tensor:
        """x: [C, 1, L] -> logits of the cumulative, same shape."""
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            x = T.matmul(T.softplus(m), x) + b
            if i < len(self.factors):
                x = x + T.tanh(self.factors[i]) * T.tanh(x)
        return x

    def cumulative_np(self, x: np.ndarray) -> np.ndarray:
        """Float64 cumulative c(x) for x of shape [C, L] (no graph)."""
        h = x[:, None, :].astype(np.float64)
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            mat = np.logaddexp(0.0, m.data.astype(np.float64))
            h = np.matmul(mat, h) + b.data
            if i < len(self.factors):
                h = h + np.tanh(self.factors[i].data.astype(np.float64)) * np.tanh(h)
        return special.expit(h[:, 0, :])

    def likelihood(self, z_hat: Tensor) -> Tensor:
        n, c, h, w = z_hat.shape
        if c != self.channels:
            raise ValueError(f"density has {self.channels} channels, input has {c}")
        v = T.transpose(z_hat, (1, 0, 2, 3)).reshape(c, 1, n * h * w)
        lower = self.logits_cumulative(v - 0.5)
        upper = self.logits_cumulative(v + 0.5)
        # evaluate on the side of the sigmoid with better precision
        sign = np.where(lower.data + upper.data > 0, -1.0, 1.0).astype(lower.dtype)
        p = T.absolute(T.sigmoid(upper * sign) - T.sigmoid(lower * sign))
        p = T.lower_bound(p, LIKELIHOOD_FLOOR)
        return T.transpose(p.reshape(c, n, h, w), (1, 0, 2, 3))

    forward = likelihood


# ---------------------------------------------------------------------------
# Quantized CDF tables
# ---------------------------------------------------------------------------


@dataclass
class CdfTable:
    """Per-context integer CDFs with an escape slot after the regular symbols.

    Context ``i`` codes values ``offset[i] .. offset[i] + nsym[i] - 1`` as
    symbol indices ``0 .. nsym[i] - 1``; index ``nsym[i]`` is the escape.
    ``cdf[i, :nsym[i] + 2]`` runs from 0 to ``2**precision``.
    """

    cdf: np.ndarray
    nsym: np.ndarray
    offset: np.ndarray
    precision: int = PRECISION
    meta: dict = field(default_factory=dict)

    @property
    def num_contexts(self) -> int:
        return len(self.nsym)

    def freqs(self, ctx: int) -> np.ndarray:
        row = self.cdf[ctx, : self.nsym[ctx] + 2]
        return np.diff(row)

    def pmf(self, ctx: int) -> np.ndarray:
        return self.freqs(ctx) / float(1 << self.precision)

    def validate(self) -> None:
        total = 1 << self.precision
        for i in range(self.num_contexts):
            row = self.cdf[i, : self.nsym[i] + 2]
            if row[0] != 0 or row[-1] != total:
                raise ValueError(f"context {i}: CDF must run from 0 to {total}")
            if np.any(np.diff(row) < 1):
                raise ValueError(f"context {i}: every symbol needs frequency >= 1")

    def code_length(self, values: np.ndarray, contexts: np.ndarray) -> float:
        """Exact ideal code length in bits of ``values`` under this table."""
        values = np.asarray(values, dtype=np.int64).ravel()
        contexts = np.asarray(contexts, dtype=np.int64).ravel()
        idx = values - self.offset[contexts]
        nsym = self.nsym[contexts]
        escape = (idx < 0) | (idx >= nsym)
        idx = np.where(escape, nsym, idx)
        freq = self.cdf[contexts, idx + 1] - self.cdf[contexts, idx]
        bits = -np.log2(freq / float(1 << self.precision)).sum()
        return float(bits + 32.0 * np.count_nonzero(escape))

    # serialization through checkpoint records (u16 frequencies, f32 offsets)
    def to_records(self, prefix: str) -> dict[str, np.ndarray]:
        width = int(self.nsym.max()) + 1
        freqs = np.zeros((self.num_contexts, width), dtype=np.int64)
        for i in range(self.num_contexts):
            f = self.freqs(i)
            freqs[i, : len(f)] = f
        return {
            f"tables/{prefix}": freqs,
            f"tables_offset/{prefix}": self.offset.astype(np.float32),
        }

    @classmethod
    def from_records(cls, records: dict, prefix: str) -> "CdfTable":
        freqs = np.asarray(records[f"tables/{prefix}"], dtype=np.int64)
        offset = np.asarray(records[f"tables_offset/{prefix}"]).astype(np.int64)
        nsym = np.count_nonzero(freqs, axis=1) - 1
        return cls.from_freqs(freqs, nsym, offset)

    @classmethod
    def from_freqs(cls, freqs, nsym, offset, precision: int = PRECISION) -> "CdfTable":
        nsym = np.asarray(nsym, dtype=np.int64)
        width = int(nsym.max()) + 2
        cdf = np.full((len(nsym), width), 1 << precision, dtype=np.int64)
        for i, n in enumerate(nsym):
            cdf[i, : n + 2] = np.concatenate([[0], np.cumsum(freqs[i][: n + 1])])
        table = cls(cdf, nsym, np.asarray(offset, dtype=np.int64), precision)
        table.validate()
        return table


def pmf_mismatch(y_hat, sigma, lower_bound: float = SCALE_LOWER_BOUND) -> float:
    """Mean |empirical pmf - model pmf| over the integer bins y_hat occupies.

    The model pmf of bin k is the Gaussian bin mass averaged over all
    elements (each with its own sigma).  A rough "entropy loss" diagnostic.
    """
    y = np.round(np.asarray(y_hat, dtype=np.float64)).ravel()
    s = np.maximum(np.broadcast_to(np.asarray(sigma, dtype=np.float64), np.shape(y_hat)).ravel(),
                   lower_bound)
    if y.size == 0:
        raise ValueError("no symbols")
    bins = np.arange(y.min(), y.max() + 1)
    empirical = np.array([np.mean(y == k) for k in bins])
    model = np.array([np.mean(special.ndtr((k + 0.5) / s) - special.ndtr((k - 0.5) / s)) for k in bins])
    return float(np.mean(np.abs(empirical - model)))


def quantize_pmf(pmf: np.ndarray, precision: int = PRECISION) -> np.ndarray:
    """Integer frequencies summing to 2**precision, each at least 1."""
    pmf = np.asarray(pmf, dtype=np.float64)
    total = 1 << precision
    if len(pmf) > total:
        raise ValueError("more symbols than the precision can represent")
    freqs = np.maximum(np.round(pmf / pmf.sum() * total).astype(np.int64), 1)
    diff = total - int(freqs.sum())
    if diff > 0:
        freqs[int(np.argmax(pmf))] += diff
    else:
        for i in np.argsort(-freqs, kind="stable"):
            take = min(int(freqs[i]) - 1, -diff)
            freqs[i] -= take
            diff += take
            if diff == 0:
                break
    return freqs


def build_table_from_pmfs(pmfs: list, offsets, precision: int = PRECISION) -> CdfTable:
    """Each pmf lists regular-symbol masses; the leftover mass goes to the escape slot."""
    freqs, nsym = [], []
    for pmf in pmfs:
        pmf = np.asarray(pmf, dtype=np.float64)
        if len(pmf) > MAX_SUPPORT:
            raise ValueError(f"support of {len(pmf)} symbols exceeds {MAX_SUPPORT}")
        escape = max(1.0 - pmf.sum(), 0.0)
        freqs.append(quantize_pmf(np.append(pmf, escape), precision))
        nsym.append(len(pmf))
    return CdfTable.from_freqs(freqs, nsym, offsets, precision)


def _gaussian_pmf(scale: float, tail_mass: float) -> tuple[np.ndarray, int]:
    half = int(np.ceil(scale * -special.ndtri(tail_mass / 2)))
    v = np.abs(np.arange(-half, half + 1, dtype=np.float64))
    pmf = special.ndtr((0.5 - v) / scale) - special.ndtr((-0.5 - v) / scale)
    return pmf, -half


class GaussianConditional:
    """Zero-mean Gaussian scale model for y given the hyperprior."""

    def __init__(self, scale_table=SCALE_TABLE, lower_bound: float = SCALE_LOWER_BOUND):
        self.scale_table = np.asarray(scale_table, dtype=np.float64)
        if np.any(np.diff(self.scale_table) <= 0):
            raise ValueError("scale table must be strictly increasing")
        if self.scale_table[0] < lower_bound:
            raise ValueError("scale table entries must respect the lower bound")
        self.lower_bound = lower_bound
        self.diagnostics: dict = {}
        log_t = np.log(self.scale_table)
        self._log_mid = (log_t[1:] + log_t[:-1]) / 2

    def likelihood(self, y_hat: Tensor, sigma: Tensor) -> Tensor:
        return gaussian_likelihood(y_hat, sigma, self.lower_bound, self.diagnostics)

    def scale_indexes(self, sigma: np.ndarray) -> np.ndarray:
        """Nearest table entry in log-scale."""
        s = np.maximum(np.asarray(sigma, dtype=np.float64), self.lower_bound)
        return np.searchsorted(self._log_mid, np.log(s)).astype(np.int64)

    def build_table(self, tail_mass: float = TAIL_MASS) -> CdfTable:
        pmfs, offsets = zip(*(_gaussian_pmf(s, tail_mass) for s in self.scale_table))
        return build_table_from_pmfs(list(pmfs), offsets)


def factorized_table(density: FactorizedDensity, tail_mass: float = TAIL_MASS) -> CdfTable:
    """One CDF per channel over the integer support holding all but ``tail_mass``."""
    radius = 64
    while True:
        v = np.arange(-radius, radius + 1, dtype=np.float64)
        grid = np.concatenate([v - 0.5, [radius + 0.5]])
        cum = density.cumulative_np(np.broadcast_to(grid, (density.channels, len(grid))))
        covered = (cum[:, 0] <= tail_mass / 2) & (1 - cum[:, -1] <= tail_mass / 2)
        if covered.all() or radius >= MAX_SUPPORT:
            break
        radius *= 2
    pmfs, offsets = [], []
    for c in range(density.channels):
        upper, lower = cum[c, 1:], cum[c, :-1]
        keep = np.nonzero((upper > tail_mass / 2) & (lower < 1 - tail_mass / 2))[0]
        if len(keep) == 0:
            keep = np.array([radius])
        lo, hi = keep[0], keep[-1]
        if hi - lo + 1 > MAX_SUPPORT:
            raise ValueError(f"channel {c}: support overflow ({hi - lo + 1} symbols)")
        pmfs.append(upper[lo : hi + 1] - lower[lo : hi + 1])
        offsets.append(int(v[lo]))
    return build_table_from_pmfs(pmfs, offsets)


def build_cdf_tables(model, tail_mass: float = TAIL_MASS) -> CdfTable:
    if isinstance(model, GaussianConditional):
        return model.build_table(tail_mass)
    if isinstance(model, FactorizedDensity):
        return factorized_table(model, tail_mass)
    raise TypeError(f"cannot build tables for {type(model).__name__}")
