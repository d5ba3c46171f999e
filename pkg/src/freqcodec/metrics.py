"""Quality metrics, BD-rate, spectral band analysis and complexity counting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

INF_DB = float("inf")

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _nchw(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None, None]
    if arr.ndim == 3:
        return arr.transpose(2, 0, 1)[None]
    if arr.ndim == 4:
        return arr
    raise ValueError(f"expected an HxW, HxWxC or NxCxHxW image, got shape {arr.shape}")


def psnr(a, b, peak: float = 255.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return INF_DB
    return float(10.0 * np.log10(peak * peak / mse))


# ---------------------------------------------------------------------------
# MS-SSIM
# ---------------------------------------------------------------------------


def _gauss_1d(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(x: Tensor, g: np.ndarray) -> Tensor:
    n, c, h, w = x.shape
    flat = x.reshape(n * c, 1, h, w)
    k = len(g)
    gw = g.astype(x.dtype)
    flat = T.conv2d(flat, Tensor(gw.reshape(1, 1, 1, k)))
    flat = T.conv2d(flat, Tensor(gw.reshape(1, 1, k, 1)))
    return flat.reshape(n, c, h - k + 1, w - k + 1)


def _ssim_terms(x: Tensor, y: Tensor, data_range: float, g: np.ndarray):
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_x, mu_y = _blur(x, g), _blur(y, g)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    s_xx = _blur(x * x, g) - mu_xx
    s_yy = _blur(y * y, g) - mu_yy
    s_xy = _blur(x * y, g) - mu_xy
    cs_map = (2.0 * s_xy + c2) / (s_xx + s_yy + c2)
    ssim_map = (2.0 * mu_xy + c1) / (mu_xx + mu_yy + c1) * cs_map
    return ssim_map.mean(axis=(2, 3)), cs_map.mean(axis=(2, 3))


def _avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if (h, w) != (2 * h2, 2 * w2):
        x = x[:, :, : 2 * h2, : 2 * w2]
    return x.reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5))


def num_scales(height: int, width: int, max_scales: int = len(MS_SSIM_WEIGHTS)) -> int:
    side = min(height, width)
    if side < WINDOW_SIZE:
        raise ValueError(f"image side {side} is smaller than the {WINDOW_SIZE}px SSIM window")
    s = 1
    while s < max_scales and side // 2**s >= WINDOW_SIZE:
        s += 1
    return s


def ms_ssim_tensor(x: Tensor, y: Tensor, data_range: float = 1.0) -> Tensor:
    """Differentiable MS-SSIM of [N,C,H,W] tensors, averaged over batch and channels.

    Images smaller than 176px use fewer scales with the leading weights
    renormalized to sum to one.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    scales = num_scales(x.shape[2], x.shape[3])
    weights = np.asarray(MS_SSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    g = _gauss_1d()
    score = None
    for i, wgt in enumerate(weights):
        ssim, cs = _ssim_terms(x, y, data_range, g)
        term = ssim if i == scales - 1 else cs
        factor = T.power(T.relu(term) + 1e-12, float(wgt))
        score = factor if score is None else score * factor
        if i < scales - 1:
            x, y = _avg_pool2(x), _avg_pool2(y)
    return score.mean()


def ms_ssim(a, b, data_range: Optional[float] = None) -> float:
    """MS-SSIM of two images (HxW, HxWxC or NxCxHxW arrays)."""
    a_arr, b_arr = np.asarray(a), np.asarray(b)
    if a_arr.shape != b_arr.shape:
        raise ValueError(f"image shapes differ: {a_arr.shape} vs {b_arr.shape}")
    if data_range is None:
        data_range = 255.0 if a_arr.dtype == np.uint8 or a_arr.max() > 1.0 else 1.0
    with T.no_grad():
        out = ms_ssim_tensor(Tensor(_nchw(a_arr)), Tensor(_nchw(b_arr)), data_range)
    return float(min(out.item(), 1.0))


def msssim_db(score: float) -> float:
    if score >= 1.0:
        return INF_DB
    return float(-10.0 * np.log10(1.0 - score))


# ---------------------------------------------------------------------------
# BD-rate
# ---------------------------------------------------------------------------


@dataclass
class RdCurve:
    points: list
    metric: str = "psnr"
    label: str = ""

    def __post_init__(self):
        self.points = sorted((float(r), float(q)) for r, q in self.points)
        rates = [r for r, _ in self.points]
        if any(r <= 0 for r in rates):
            raise ValueError("bit rates must be positive")
        if len(set(rates)) != len(rates):
            raise ValueError("bit rates must be strictly increasing")

    @property
    def rates(self) -> np.ndarray:
        return np.array([r for r, _ in self.points])

    @property
    def qualities(self) -> np.ndarray:
        return np.array([q for _, q in self.points])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# metric={self.metric} label={self.label}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["bpp", "quality"])
        writer.writerows(self.points)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, label: str = "") -> "RdCurve":
        metric = "psnr"
        rows = []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, value = tok.partition("=")
                    if key == "metric":
                        metric = value
                    elif key == "label" and not label:
                        label = value
                continue
            if line.lower().startswith("bpp"):
                continue
            r, q = line.split(",")[:2]
            rows.append((float(r), float(q)))
        return cls(rows, metric, label)


def bd_rate(test: RdCurve, anchor: RdCurve, rate_range: Optional[tuple] = None) -> float:
    """Bjontegaard delta rate of ``test`` against ``anchor`` in percent.

    Cubic fits of log-rate as a function of quality, integrated over the
    common quality interval.  Negative means the test curve needs fewer bits.
    ``rate_range`` (bpp) further limits the interval, mapped to quality
    through the anchor curve.
    """
    for c in (test, anchor):
        if len(c.points) < 4:
            raise ValueError(f"curve {c.label!r} needs at least 4 points")
    qa, qt = anchor.qualities, test.qualities
    la, lt = np.log(anchor.rates), np.log(test.rates)
    lo, hi = max(qa.min(), qt.min()), min(qa.max(), qt.max())
    if rate_range is not None:
        order = np.argsort(la)
        q_lo, q_hi = np.interp(np.log(rate_range), la[order], qa[order])
        lo, hi = max(lo, q_lo), min(hi, q_hi)
    if not hi > lo:
        raise ValueError("RD curves have no overlapping quality range")
    pa = np.polyint(np.polyfit(qa, la, 3))
    pt = np.polyint(np.polyfit(qt, lt, 3))
    avg = (np.polyval(pt, hi) - np.polyval(pt, lo) - np.polyval(pa, hi) + np.polyval(pa, lo)) / (
        hi - lo
    )
    return float((np.exp(avg) - 1.0) * 100.0)


# ---------------------------------------------------------------------------
# Spectral analysis
# ---------------------------------------------------------------------------


@dataclass
class BandReport:
    n_bands: int
    proportions: np.ndarray
    edges: np.ndarray
    dc_energy: float
    ac_energy: float

    def to_csv(self) -> str:
        lines = ["band,lo,hi,proportion"]
        for i, p in enumerate(self.proportions):
            lines.append(f"{i + 1},{self.edges[i]:.6f},{self.edges[i + 1]:.6f},{p:.9f}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        rows = [f"{'band':>4}  {'radial freq':>15}  {'energy %':>9}"]
        for i, p in enumerate(self.proportions):
            rows.append(f"{i + 1:>4}  {self.edges[i]:6.3f}-{self.edges[i + 1]:6.3f}  {100 * p:9.3f}")
        rows.append(f"DC energy {self.dc_energy:.6g}, non-DC energy {self.ac_energy:.6g}")
        return "\n".join(rows)


def to_gray(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        return arr[..., :3] @ np.array([0.299, 0.587, 0.114])
    return arr


def radial_frequency(height: int, width: int) -> np.ndarray:
    """Radial frequency in cycles/pixel for each bin of an HxW DFT."""
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.fftfreq(width)[None, :]
    return np.sqrt(fx * fx + fy * fy)


def psd_bands(img, n_bands: int = 3) -> BandReport:
    """Share of non-DC spectral energy per equal-width radial band.

    Bands split [0, 0.5] cycles/pixel evenly; the diagonal corners beyond
    0.5 belong to the last band.
    """
    if n_bands < 2:
        raise ValueError("need at least two bands")
    gray = to_gray(img)
    power = np.abs(np.fft.fft2(gray)) ** 2
    radius = radial_frequency(*gray.shape)
    edges = np.linspace(0.0, 0.5, n_bands + 1)
    dc = float(power[0, 0])
    ac_mask = radius > 0
    if np.ptp(gray) == 0:
        return BandReport(n_bands, np.zeros(n_bands), edges, dc, 0.0)
    band = np.minimum((radius / 0.5 * n_bands).astype(int), n_bands - 1)
    energy = np.bincount(band[ac_mask], weights=power[ac_mask], minlength=n_bands)
    total = energy.sum()
    return BandReport(n_bands, energy / total, edges, dc, float(total))


# ---------------------------------------------------------------------------
# Parameter / MAC counting
# ---------------------------------------------------------------------------


@dataclass
class LayerSpec:
    """One layer of a network description.

    kind: ``conv`` | ``tconv`` | ``attention`` | ``upsample`` | ``act``
    """

    kind: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 1
    stride: int = 1
    bias: bool = True
    reduction: int = 8
    name: str = ""


def _conv_cost(in_ch, out_ch, k, positions, bias) -> tuple[int, int]:
    params = out_ch * in_ch * k * k + (out_ch if bias else 0)
    macs = positions * out_ch * (in_ch * k * k + (1 if bias else 0))
    return macs, params


def count_params_macs(layers: Sequence[LayerSpec], input_shape: Sequence[int]) -> tuple[int, int]:
    """(MACs, params) of a chain of layers applied to ``input_shape`` [N,C,H,W].

    MACs count conv-type layers only, one per bias add; attention affinity and
    aggregation arithmetic is not counted.
    """
    n, c, h, w = input_shape
    macs = params = 0
    for layer in layers:
        if layer.kind == "conv":
            if layer.in_ch != c:
                raise ValueError(f"{layer.name or 'conv'}: expects {layer.in_ch} channels, got {c}")
            pad = (layer.kernel - 1) // 2
            h = (h + 2 * pad - layer.kernel) // layer.stride + 1
            w = (w + 2 * pad - layer.kernel) // layer.stride + 1
            m, p = _conv_cost(c, layer.out_ch, layer.kernel, n * h * w, layer.bias)
            macs, params, c = macs + m, params + p, layer.out_ch
        elif layer.kind == "tconv":
            if layer.in_ch != c:
                raise ValueError(f"{layer.name or 'tconv'}: expects {layer.in_ch} channels, got {c}")
            k = layer.kernel
            macs += n * h * w * c * layer.out_ch * k * k
            h, w = h * layer.stride, w * layer.stride
            params += c * layer.out_ch * k * k
            if layer.bias:
                macs += n * h * w * layer.out_ch
                params += layer.out_ch
            c = layer.out_ch
        elif layer.kind == "attention":
            r = layer.reduction
            if c % r:
                raise ValueError(f"attention reduction {r} does not divide {c}")
            for out in (c // r, c // r, c):
                m, p = _conv_cost(c, out, 1, n * h * w, True)
                macs, params = macs + m, params + p
        elif layer.kind == "upsample":
            h, w = h * 2, w * 2
        elif layer.kind == "act":
            pass
        else:
            raise ValueError(f"unsupported layer kind {layer.kind!r}")
    return int(macs), int(params)


def describe(module) -> list[LayerSpec]:
    """Flatten a module tree into LayerSpecs (layers applied in sequence)."""
    from .fusion import CrissCrossAttention
    from .nn import Abs, Conv2d, ConvTranspose2d, Identity, ReLU, Sequential

    if isinstance(module, Conv2d):
        return [
            LayerSpec("conv", module.in_ch, module.out_ch, module.kernel, module.stride,
                      module.bias is not None)
        ]
    if isinstance(module, ConvTranspose2d):
        return [LayerSpec("tconv", module.in_ch, module.out_ch, module.kernel, module.stride)]
    if isinstance(module, CrissCrossAttention):
        return [LayerSpec("attention", module.channels, module.channels, reduction=module.reduction)]
    if isinstance(module, (ReLU, Identity, Abs)):
        return [LayerSpec("act")]
    if isinstance(module, Sequential):
        return [spec for layer in module for spec in describe(layer)]
    if hasattr(module, "net"):
        out = describe(module.net)
        if hasattr(module, "out"):
            out += describe(module.out)
        return out
    raise ValueError(f"cannot describe {type(module).__name__}")


def attention_complexity(channels: int = 64, reduction: int = 8, size: int = 16) -> tuple[int, int]:
    return count_params_macs(
        [LayerSpec("attention", channels, channels, reduction=reduction)], (1, channels, size, size)
    )


def branch_complexity(model, image_size: int = 256) -> dict[str, dict[str, tuple[int, int]]]:
    """Per-split (MACs, params) for the encoder side and the decoder branch.

    Encoder side of a split: the pyramid convolution(s) its formula introduces,
    its unification network and its hyper-encoder.  The spatial sampling
    stage is shared and reported separately under ``shared``.
    """
    cfg = model.cfg
    an = model.analysis
    m = image_size // 4
    c = cfg.base_channels
    shared = count_params_macs(describe(an.sampler.net), (1, 3, image_size, image_size))
    # stride-2 pyramid convs: high owns both (its formula is down(down(I))), mid reuses the first
    pyr = {
        "low": [(describe(an.pyramid.same), m)],
        "mid": [],
        "high": [(describe(an.pyramid.down[0]), m), (describe(an.pyramid.down[1]), m // 2)],
    }
    res = {"low": m, "mid": m // 2, "high": m // 4}
    out: dict = {"shared": {"sampler": shared}}
    for s in ("low", "mid", "high"):
        macs = params = 0
        for specs, size in pyr[s]:
            mm, pp = count_params_macs(specs, (1, c, size, size))
            macs, params = macs + mm, params + pp
        for mod, ch in ((an.unify[("high", "mid", "low").index(s)], c),
                        (model.hyper_encoders[s], cfg.latent_channels)):
            cin = ch
            mm, pp = count_params_macs(describe(mod), (1, cin, res[s], res[s]))
            macs, params = macs + mm, params + pp
        dec = count_params_macs(
            describe(model.fusion.branches[s]), (1, cfg.latent_channels, res[s], res[s])
        )
        out[s] = {"encoder": (macs, params), "decoder": dec}
    return out
