"""The FOTC compressed container.

Layout (little-endian)::

    magic "FOTC" | u16 version | u8 flags | u32 width | u32 height | u64 model id
    6 x (u32 symbol count | u32 payload length | payload)
        in slot order z_high, z_mid, z_low, y_high, y_mid, y_low

Flags bit 0 = low, bit 1 = mid, bit 2 = high.  Absent splits have empty slots.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .fusion import SplitMask
from .rans import RansError, pack_substream, unpack_substream

MAGIC = b"FOTC"
VERSION = 1
HEADER = struct.Struct("<4sHBIIQ")
SLOTS = ("z_high", "z_mid", "z_low", "y_high", "y_mid", "y_low")


class ContainerError(ValueError):
    pass


@dataclass
class Container:
    mask: SplitMask
    width: int
    height: int
    model_id: int
    # slot name -> (symbol count, payload)
    substreams: dict = field(default_factory=dict)

    def __post_init__(self):
        for slot in SLOTS:
            self.substreams.setdefault(slot, (0, b""))
        unknown = set(self.substreams) - set(SLOTS)
        if unknown:
            raise ContainerError(f"unknown substream slot(s) {sorted(unknown)}")
        self.validate()

    def validate(self) -> None:
        if not (0 < self.width < 2**32 and 0 < self.height < 2**32):
            raise ContainerError(f"invalid image size {self.width}x{self.height}")
        for slot in SLOTS:
            count, payload = self.substreams[slot]
            present = slot[2:] in self.mask
            if present and count == 0:
                raise ContainerError(f"split {slot[2:]} is flagged but substream {slot} is empty")
            if not present and (count or payload):
                raise ContainerError(f"substream {slot} is filled but split {slot[2:]} is not flagged")

    def payload_bytes(self, split: str) -> int:
        return len(self.substreams[f"y_{split}"][1]) + len(self.substreams[f"z_{split}"][1])

    def to_bytes(self) -> bytes:
        parts = [HEADER.pack(MAGIC, VERSION, self.mask.flags, self.width, self.height, self.model_id)]
        parts += [pack_substream(*self.substreams[slot]) for slot in SLOTS]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Container":
        if len(blob) < HEADER.size:
            raise ContainerError("truncated container header")
        magic, version, flags, width, height, model_id = HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise ContainerError(f"bad magic {magic!r}; not a FOTC container")
        if version != VERSION:
            raise ContainerError(f"unsupported container version {version}")
        if flags == 0 or flags & ~0b111:
            raise ContainerError(f"invalid split flags 0x{flags:02x}")
        pos, subs = HEADER.size, {}
        try:
            for slot in SLOTS:
                count, payload, pos = unpack_substream(blob, pos)
                subs[slot] = (count, payload)
        except RansError as exc:
            raise ContainerError(str(exc)) from exc
        if pos != len(blob):
            raise ContainerError(f"{len(blob) - pos} trailing bytes after the last substream")
        return cls(SplitMask.from_flags(flags), width, height, model_id, subs)

    def bpp(self) -> float:
        return len(self.to_bytes()) * 8.0 / (self.width * self.height)


def split_bit_allocation(container) -> dict[str, float]:
    """Share of substream payload bytes per split (latent + hyper), summing to 1."""
    if isinstance(container, (bytes, bytearray)):
        container = Container.from_bytes(bytes(container))
    sizes = {s: container.payload_bytes(s) for s in ("low", "mid", "high")}
    total = sum(sizes.values())
    if total == 0:
        raise ContainerError("container carries no payload")
    return {s: n / total for s, n in sizes.items()}
