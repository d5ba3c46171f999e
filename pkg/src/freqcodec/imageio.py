"""8-bit RGB image buffers, PPM/PNG file I/O and 64-multiple padding."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD_MULTIPLE = 64
IMAGE_SUFFIXES = (".ppm", ".png")


class ImageError(ValueError):
    pass


@dataclass
class ImageBuffer:
    """H x W x 3 uint8 samples."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = np.repeat(px[..., None], 3, axis=2)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ImageError(f"expected an HxWx3 image, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise ImageError(f"expected uint8 samples, got {px.dtype}")
        self.pixels = np.ascontiguousarray(px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def to_float(self) -> np.ndarray:
        """[1, 3, H, W] float32 view scaled to [0, 1]."""
        return (self.pixels.transpose(2, 0, 1)[None] / np.float32(255.0)).astype(np.float32)

    @classmethod
    def from_float(cls, arr) -> "ImageBuffer":
        """Accepts [1,3,H,W], [3,H,W] or [H,W,3] floats in [0, 1]; clips and rounds."""
        a = np.asarray(arr, dtype=np.float64)
        if a.ndim == 4:
            if a.shape[0] != 1:
                raise ImageError("from_float takes a single image")
            a = a[0]
        if a.ndim == 3 and a.shape[0] == 3 and a.shape[2] != 3:
            a = a.transpose(1, 2, 0)
        return cls(np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8))

    def __eq__(self, other) -> bool:
        return isinstance(other, ImageBuffer) and np.array_equal(self.pixels, other.pixels)


def pad_to_multiple(img: ImageBuffer, m: int = PAD_MULTIPLE) -> tuple[ImageBuffer, tuple[int, int]]:
    """Replicate-edge pad right/bottom to the next multiple of m; returns (padded, (h, w))."""
    h, w = img.height, img.width
    ph, pw = -h % m, -w % m
    if ph == 0 and pw == 0:
        return img, (h, w)
    return ImageBuffer(np.pad(img.pixels, ((0, ph), (0, pw), (0, 0)), mode="edge")), (h, w)


def crop(img: ImageBuffer, height: int, width: int) -> ImageBuffer:
    if height > img.height or width > img.width:
        raise ImageError(f"cannot crop {img.height}x{img.width} to {height}x{width}")
    return ImageBuffer(img.pixels[:height, :width])


# ---------------------------------------------------------------------------
# PPM (P6)
# ---------------------------------------------------------------------------

_PPM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def decode_ppm(blob: bytes) -> ImageBuffer:
    pos, fields = 0, []
    for _ in range(4):
        m = _PPM_TOKEN.match(blob, pos)
        if m is None:
            raise ImageError("truncated PPM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P6":
        raise ImageError("not a binary PPM (P6) file")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise ImageError("malformed PPM header") from exc
    if maxval != 255:
        raise ImageError(f"only 8-bit PPM is supported (maxval {maxval})")
    if w <= 0 or h <= 0:
        raise ImageError("PPM dimensions must be positive")
    pos += 1  # single whitespace byte after maxval
    data = blob[pos : pos + w * h * 3]
    if len(data) != w * h * 3:
        raise ImageError("truncated PPM pixel data")
    return ImageBuffer(np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3))


def encode_ppm(img: ImageBuffer) -> bytes:
    return f"P6\n{img.width} {img.height}\n255\n".encode() + img.pixels.tobytes()


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def _pil():
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise ImageError("PNG support needs Pillow (pip install 'artifact[png]')") from exc
    return Image


def read_image(path) -> ImageBuffer:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ImageError(f"cannot read {path}: {exc.strerror}") from exc
    if blob.startswith(b"P6"):
        return decode_ppm(blob)
    if blob.startswith(b"\x89PNG"):
        Image = _pil()
        import io

        with Image.open(io.BytesIO(blob)) as im:
            return ImageBuffer(np.asarray(im.convert("RGB")))
    raise ImageError(f"{path}: unsupported image format (PPM P6 or PNG expected)")


def write_image(path, img: ImageBuffer) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        Image = _pil()
        Image.fromarray(img.pixels).save(path)
        return
    path.write_bytes(encode_ppm(img))


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ImageError(f"{directory} is not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def synthetic_texture(rng: np.random.Generator, height: int = 64, width: int = 64) -> ImageBuffer:
    """Smooth random texture: a colour gradient plus a few low-frequency oriented waves."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    base = rng.uniform(0.25, 0.75, size=3)
    grad = rng.normal(0, 0.15, size=(3, 2))
    img = base[:, None, None] + (
        grad[:, 0, None, None] * (yy / height - 0.5) + grad[:, 1, None, None] * (xx / width - 0.5)
    )
    for _ in range(rng.integers(2, 5)):
        freq = rng.uniform(0.01, 0.08)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        color = rng.normal(0, 0.08, size=3)
        img = img + color[:, None, None] * wave
    return ImageBuffer.from_float(img)


def synthetic_textures(n: int, seed: int = 0, size: int = 64) -> list[ImageBuffer]:
    rng = np.random.default_rng(seed)
    return [synthetic_texture(rng, size, size) for _ in range(n)]


def ensure_parent(path) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
