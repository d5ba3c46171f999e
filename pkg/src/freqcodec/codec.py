"""Image <-> container encode/decode built on the trained network and rANS."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .container import Container, ContainerError
from .fusion import FULL, SplitMask
from .imageio import ImageBuffer, crop, pad_to_multiple, read_image, write_image
from .model import FrequencyCodec
from .rans import SymbolStream, rans_decode, rans_encode
from .tensor import Tensor
from .transform import SPLITS


class ModelMismatchError(ValueError):
    pass


@dataclass
class SplitSymbols:
    """Round-quantized symbols of one split with their coding contexts."""

    z: SymbolStream
    y: SymbolStream
    z_shape: tuple
    y_shape: tuple


def latent_shapes(model: FrequencyCodec, height: int, width: int) -> dict[str, tuple]:
    """Per-split (y shape, z shape) for a padded height x width image."""
    cfg = model.cfg
    out = {}
    for i, split in enumerate(SPLITS):
        scale = 4 * 2 ** (len(SPLITS) - 1 - i)  # high is coarsest
        yh, yw = height // scale, width // scale
        out[split] = ((1, cfg.latent_channels, yh, yw), (1, cfg.hyper_channels, yh // 4, yw // 4))
    return out


def _channel_contexts(shape: tuple) -> np.ndarray:
    _, c, h, w = shape
    return np.repeat(np.arange(c, dtype=np.int64), h * w)


def split_symbols(model: FrequencyCodec, x: Tensor, mask: SplitMask = FULL) -> dict[str, SplitSymbols]:
    """Run the analysis side and return the symbols each enabled split would code."""
    out = {}
    with T.no_grad():
        y = model.encode_latents(x)
        for split in mask.enabled:
            z_hat = np.round(model.hyper_encode(split, y[split]).data)
            sigma = model.hyper_decode(split, Tensor(z_hat)).data
            y_hat = np.round(y[split].data)
            out[split] = SplitSymbols(
                SymbolStream(z_hat.astype(np.int64), _channel_contexts(z_hat.shape)),
                SymbolStream(y_hat.astype(np.int64), model.gaussian.scale_indexes(sigma)),
                z_hat.shape,
                y_hat.shape,
            )
    return out


def encode_image(
    model: FrequencyCodec, img: ImageBuffer, mask: SplitMask = FULL, parallel: bool = False
) -> Container:
    padded, (h, w) = pad_to_multiple(img)
    syms = split_symbols(model, Tensor(padded.to_float()), mask)
    jobs = []
    for split, s in syms.items():
        jobs.append((f"z_{split}", s.z, model.table(f"z_{split}")))
        jobs.append((f"y_{split}", s.y, model.table("y")))

    def run(job):
        name, stream, table = job
        return name, (len(stream), rans_encode(stream, table))

    if parallel:
        with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    return Container(mask, w, h, model.model_id, dict(results))


def decode_container(
    model: FrequencyCodec, container: Container, mask: Optional[SplitMask] = None
) -> ImageBuffer:
    if container.model_id != model.model_id:
        raise ModelMismatchError(
            f"container was written by model {container.model_id:016x}, "
            f"checkpoint is {model.model_id:016x}"
        )
    mask = container.mask if mask is None else mask
    if not mask.issubset(container.mask):
        raise ContainerError(
            f"requested splits {mask} but the container only holds {container.mask}"
        )
    ph, pw = -(-container.height // 64) * 64, -(-container.width // 64) * 64
    shapes = latent_shapes(model, ph, pw)
    y_hat = {}
    with T.no_grad():
        for split in mask.enabled:
            y_shape, z_shape = shapes[split]
            z_count, z_payload = container.substreams[f"z_{split}"]
            y_count, y_payload = container.substreams[f"y_{split}"]
            if z_count != int(np.prod(z_shape)) or y_count != int(np.prod(y_shape)):
                raise ContainerError(f"split {split}: symbol counts do not match the image size")
            z_ctx = _channel_contexts(z_shape)
            z = rans_decode(z_payload, model.table(f"z_{split}"), z_count, z_ctx)
            z_hat = Tensor(z.values.reshape(z_shape).astype(np.float32))
            sigma = model.hyper_decode(split, z_hat).data
            y_ctx = model.gaussian.scale_indexes(sigma)
            y = rans_decode(y_payload, model.table("y"), y_count, y_ctx)
            y_hat[split] = Tensor(y.values.reshape(y_shape).astype(np.float32))
        x_hat = model.reconstruct(y_hat, mask)
    return crop(ImageBuffer.from_float(x_hat.data), container.height, container.width)


def forward_export(model: FrequencyCodec, img: ImageBuffer, mask: SplitMask = FULL) -> ImageBuffer:
    """Direct round-mode forward pass exported to 8 bits (no entropy coding)."""
    padded, (h, w) = pad_to_multiple(img)
    with T.no_grad():
        res = model(Tensor(padded.to_float()), mode="round", mask=mask)
    return crop(ImageBuffer.from_float(res.x_hat.data), h, w)


def split_reconstructions(model: FrequencyCodec, img: ImageBuffer) -> dict[str, ImageBuffer]:
    """Single-split decodes, so each split's spectral content can be measured."""
    return {s: forward_export(model, img, SplitMask.parse(s)) for s in SPLITS}


def load_model(checkpoint_path, config=None) -> FrequencyCodec:
    model = FrequencyCodec.load(checkpoint_path)
    if config is not None and config.model_id != model.model_id:
        raise ModelMismatchError(
            f"checkpoint {checkpoint_path} was trained with a different model config "
            f"({model.model_id:016x} vs {config.model_id:016x})"
        )
    return model


def encode_file(image_path, model: FrequencyCodec, out_path, mask: SplitMask = FULL,
                parallel: bool = False) -> Container:
    container = encode_image(model, read_image(image_path), mask, parallel)
    Path(out_path).write_bytes(container.to_bytes())
    return container


def decode_file(container_path, model: FrequencyCodec, out_path,
                mask: Optional[SplitMask] = None) -> ImageBuffer:
    container = Container.from_bytes(Path(container_path).read_bytes())
    img = decode_container(model, container, mask)
    write_image(out_path, img)
    return img
