"""Learned image codec with a frequency-decomposing analysis transform.

Three latent splits (high, mid, low) are coded with per-split hyperprior
entropy models and range ANS, and decoded scalably from any subset.
"""

from .codec import decode_container, encode_image, forward_export
from .container import Container
from .fusion import FULL, SplitMask
from .imageio import ImageBuffer, read_image, write_image
from .model import FrequencyCodec
from .training import TrainConfig, evaluate, train
from .transform import DESK, PAPER, ModelConfig

__all__ = [
    "Container",
    "DESK",
    "FULL",
    "FrequencyCodec",
    "ImageBuffer",
    "ModelConfig",
    "PAPER",
    "SplitMask",
    "TrainConfig",
    "decode_container",
    "encode_image",
    "evaluate",
    "forward_export",
    "read_image",
    "train",
    "write_image",
]
