"""The end-to-end codec network: analysis, per-split entropy models and fusion."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import checkpoint
from .entropy import CdfTable, FactorizedDensity, GaussianConditional, factorized_table, quantize
from .fusion import FULL, FrequencyFusion, HyperDecoder, SplitMask
from .nn import Module
from .tensor import Tensor
from .transform import SPLITS, AnalysisTransform, HyperEncoder, ModelConfig


@dataclass
class LatentBundle:
    """Per-split latents y, hyper-latents z and their quantized forms."""

    y: dict = field(default_factory=dict)
    z: dict = field(default_factory=dict)
    y_hat: dict = field(default_factory=dict)
    z_hat: dict = field(default_factory=dict)
    sigma: dict = field(default_factory=dict)
    y_likelihood: dict = field(default_factory=dict)
    z_likelihood: dict = field(default_factory=dict)


@dataclass
class ForwardResult:
    x_hat: Tensor
    latents: LatentBundle


class FrequencyCodec(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        if cfg.K != 2:
            raise ValueError("the codec supports K=2 (three frequency splits) only")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.analysis = AnalysisTransform(cfg, rng)
        self.hyper_encoders = {s: HyperEncoder(cfg, rng) for s in SPLITS}
        self.hyper_decoders = {s: HyperDecoder(cfg, rng) for s in SPLITS}
        self.densities = {s: FactorizedDensity(cfg.hyper_channels) for s in SPLITS}
        self.fusion = FrequencyFusion(cfg, rng)
        self._gaussian = GaussianConditional()
        self._tables: dict[str, CdfTable] = {}

    @property
    def gaussian(self) -> GaussianConditional:
        return self._gaussian

    # -- graph pieces -----------------------------------------------------
    def encode_latents(self, x: Tensor) -> dict[str, Tensor]:
        return self.analysis(x)

    def hyper_encode(self, split: str, y: Tensor) -> Tensor:
        return self.hyper_encoders[split](y)

    def hyper_decode(self, split: str, z_hat: Tensor) -> Tensor:
        return self.hyper_decoders[split](z_hat)

    def reconstruct(self, y_hat: dict, mask: SplitMask = FULL) -> Tensor:
        return self.fusion(y_hat, mask)

    def forward(
        self,
        x: Tensor,
        mode: str = "noise",
        rng: Optional[np.random.Generator] = None,
        mask: SplitMask = FULL,
    ) -> ForwardResult:
        lat = LatentBundle()
        lat.y = self.encode_latents(x)
        for s in SPLITS:
            lat.z[s] = self.hyper_encode(s, lat.y[s])
            lat.z_hat[s] = quantize(lat.z[s], mode, rng)
            lat.z_likelihood[s] = self.densities[s].likelihood(lat.z_hat[s])
            lat.sigma[s] = self.hyper_decode(s, lat.z_hat[s])
            lat.y_hat[s] = quantize(lat.y[s], mode, rng)
            lat.y_likelihood[s] = self._gaussian.likelihood(lat.y_hat[s], lat.sigma[s])
        return ForwardResult(self.reconstruct(lat.y_hat, mask), lat)

    # -- coding tables ----------------------------------------------------
    def update_tables(self) -> None:
        self._tables = {f"z_{s}": factorized_table(self.densities[s]) for s in SPLITS}
        self._tables["y"] = self._gaussian.build_table()

    def table(self, name: str) -> CdfTable:
        if not self._tables:
            self.update_tables()
        return self._tables[name]

    # -- checkpoints --------------------------------------------------------
    def records(self) -> dict[str, np.ndarray]:
        out = dict(self.cfg.to_records())
        out.update(self.state_dict())
        if not self._tables:
            self.update_tables()
        for name, table in self._tables.items():
            out.update(table.to_records(name))
        return out

    def save(self, path) -> None:
        checkpoint.save(path, self.records())

    @classmethod
    def from_records(cls, records: dict) -> "FrequencyCodec":
        cfg = ModelConfig.from_records(records)
        model = cls(cfg)
        model.load_state_dict({k: v for k, v in records.items() if not k.startswith(("config.", "tables"))})
        names = [k[len("tables/") :] for k in records if k.startswith("tables/")]
        if names:
            model._tables = {n: CdfTable.from_records(records, n) for n in names}
        return model

    @classmethod
    def load(cls, path) -> "FrequencyCodec":
        return cls.from_records(checkpoint.load(path))

    @property
    def model_id(self) -> int:
        return self.cfg.model_id
