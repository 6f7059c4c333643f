"""Images, masks and disparity grids, plus their file formats.

Images are ``(H, W, 3)`` float arrays with channels in ``[0, 1]`` and masks
are ``(H, W)`` boolean arrays; both are plain numpy arrays.  Disparity
grids carry an explicit validity plane and are wrapped in
:class:`DisparityGrid`.
"""
from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

__all__ = [
    "DecodeError",
    "DisparityGrid",
    "as_image",
    "as_mask",
    "load_image",
    "save_image",
    "load_mask",
    "save_mask",
    "load_disparity",
    "save_disparity",
    "dilate",
    "mask_apply",
    "mask_bounds",
]

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
MAX_PFM_SIDE = 1 << 16


class DecodeError(ValueError):
    """Malformed image or grid file.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def as_image(pixels) -> np.ndarray:
    img = np.asarray(pixels, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must have shape (H, W, 3), got {img.shape}")
    if not np.all(np.isfinite(img)) or img.min(initial=0.0) < 0.0 or img.max(initial=0.0) > 1.0:
        raise ValueError("image channels must be finite and within [0, 1]")
    return img


def as_mask(bits, shape=None) -> np.ndarray:
    mask = np.asarray(bits, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if shape is not None and mask.shape != tuple(shape[:2]):
        raise ValueError(f"mask shape {mask.shape} does not match {tuple(shape[:2])}")
    return mask


@dataclass(frozen=True, eq=False)
class DisparityGrid:
    """Inverse depth per pixel with a validity plane.

    Invalid pixels keep whatever value they were given but are excluded
    from every reduction; by construction valid pixels are finite and > 0.
    """

    values: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"disparity grid must be 2-D, got shape {values.shape}")
        usable = np.isfinite(values) & (values > 0)
        if self.valid is None:
            valid = usable
        else:
            valid = as_mask(self.valid, values.shape) & usable
        values = np.where(np.isfinite(values), values, 0.0)
        values.setflags(write=False)
        valid = valid.copy()
        valid.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self):
        return self.values.shape

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    def depth(self) -> np.ndarray:
        """Depth ``1/d`` with NaN on invalid pixels."""
        out = np.full(self.shape, np.nan)
        out[self.valid] = 1.0 / self.values[self.valid]
        return out

    def with_values(self, values) -> "DisparityGrid":
        return DisparityGrid(values, self.valid)

    def equals(self, other: "DisparityGrid") -> bool:
        return (
            self.shape == other.shape
            and np.array_equal(self.valid, other.valid)
            and np.array_equal(self.values[self.valid], other.values[other.valid])
        )


# -- PNG ---------------------------------------------------------------------


def _scan_png(data: bytes) -> None:
    """Walk the chunk structure, raising DecodeError with the failing offset."""
    if len(data) < len(PNG_SIGNATURE) or data[:8] != PNG_SIGNATURE:
        raise DecodeError("not a PNG stream: bad signature", 0)
    pos = 8
    seen_ihdr = False
    compressed = bytearray()
    while True:
        if pos + 8 > len(data):
            raise DecodeError("truncated PNG: incomplete chunk header", pos)
        length, ctype = struct.unpack(">I4s", data[pos:pos + 8])
        end = pos + 12 + length
        if end > len(data):
            raise DecodeError(f"truncated PNG: chunk {ctype!r} runs past end of stream", pos)
        body = data[pos + 8:pos + 8 + length]
        (crc,) = struct.unpack(">I", data[pos + 8 + length:end])
        if zlib.crc32(ctype + body) & 0xFFFFFFFF != crc:
            raise DecodeError(f"PNG chunk {ctype!r} fails CRC check", pos)
        if not seen_ihdr:
            if ctype != b"IHDR" or length != 13:
                raise DecodeError("PNG stream does not start with IHDR", pos)
            seen_ihdr = True
        if ctype == b"IDAT":
            compressed += body
        if ctype == b"IEND":
            break
        pos = end
    try:
        zlib.decompress(bytes(compressed))
    except zlib.error as exc:
        raise DecodeError(f"corrupt PNG image data: {exc}", pos) from exc


def _read_png(path) -> np.ndarray:
    data = Path(path).read_bytes()
    _scan_png(data)
    with PILImage.open(io.BytesIO(data)) as im:
        if im.mode in ("I", "I;16", "I;16B", "F"):
            raise DecodeError(f"unsupported PNG mode {im.mode}; expected 8-bit")
        return np.asarray(im.convert("RGBA") if "A" in im.mode else im.convert("RGB"))


def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG as an ``(H, W, 3)`` float image in ``[0, 1]``."""
    arr = _read_png(path)[..., :3]
    return arr.astype(np.float64) / 255.0


def save_image(image, path) -> None:
    img = as_image(image)
    arr = np.rint(img * 255.0).astype(np.uint8)
    PILImage.fromarray(arr).save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    """Read a PNG mask; any nonzero channel byte marks an object pixel."""
    arr = _read_png(path)
    return np.any(arr[..., :3] != 0, axis=-1)


def save_mask(mask, path) -> None:
    bits = as_mask(mask)
    PILImage.fromarray(bits.astype(np.uint8) * 255).save(path, format="PNG")


# -- PFM ---------------------------------------------------------------------


def _read_line(data: bytes, pos: int):
    end = data.find(b"\n", pos)
    if end < 0:
        raise DecodeError("truncated PFM header", pos)
    return data[pos:end].decode("ascii", errors="replace").strip(), end + 1


def load_disparity(path) -> DisparityGrid:
    """Read a grayscale PFM.  Rows are stored bottom-to-top in the file."""
    data = Path(path).read_bytes()
    magic, pos = _read_line(data, 0)
    if magic == "PF":
        raise DecodeError("expected grayscale PFM (Pf), found color PFM (PF)", 0)
    if magic != "Pf":
        raise DecodeError(f"expected grayscale PFM header 'Pf', found {magic[:16]!r}", 0)
    dims_at = pos
    dims, pos = _read_line(data, pos)
    try:
        width, height = (int(v) for v in dims.split())
    except ValueError:
        raise DecodeError(f"bad PFM dimension line {dims!r}", dims_at) from None
    if not (0 < width <= MAX_PFM_SIDE and 0 < height <= MAX_PFM_SIDE):
        raise DecodeError(f"PFM dimensions {width}x{height} out of range", dims_at)
    scale_at = pos
    scale_line, pos = _read_line(data, pos)
    try:
        scale = float(scale_line)
    except ValueError:
        raise DecodeError(f"bad PFM scale line {scale_line!r}", scale_at) from None
    if scale == 0.0:
        raise DecodeError("PFM scale must be nonzero", scale_at)
    dtype = "<f4" if scale < 0 else ">f4"
    need = width * height * 4
    if len(data) - pos < need:
        raise DecodeError(f"truncated PFM payload: need {need} bytes, have {len(data) - pos}", pos)
    values = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    values = values.reshape(height, width)[::-1].astype(np.float64)
    return DisparityGrid(values)


def save_disparity(grid: DisparityGrid, path) -> None:
    """Write little-endian grayscale PFM; invalid pixels are stored as 0."""
    values = np.where(grid.valid, grid.values, 0.0).astype("<f4")
    header = f"Pf\n{grid.width} {grid.height}\n-1.0\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(values[::-1]).tobytes())


# -- mask operations ---------------------------------------------------------


def dilate(mask, radius: int) -> np.ndarray:
    """Chebyshev dilation: true wherever the input is true within ``radius``."""
    bits = as_mask(mask)
    if radius < 0:
        raise ValueError("dilation radius must be >= 0")
    if radius == 0 or not bits.any():
        return bits.copy()
    # square element is separable: dilate rows then columns
    size = 2 * radius + 1
    out = ndimage.maximum_filter1d(bits.astype(np.uint8), size, axis=0, mode="constant")
    out = ndimage.maximum_filter1d(out, size, axis=1, mode="constant")
    return out.astype(bool)


def mask_apply(image, mask, fill=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Keep object pixels, replace everything else with ``fill``."""
    img = as_image(image)
    bits = as_mask(mask, img.shape)
    out = np.empty_like(img)
    out[...] = np.asarray(fill, dtype=np.float64)
    out[bits] = img[bits]
    return out


def mask_bounds(mask):
    """Half-open ``(y0, y1, x0, x1)`` bounds of the true pixels, or None."""
    ys, xs = np.nonzero(as_mask(mask))
    if ys.size == 0:
        return None
    return int(ys.min()), int(ys.max()) + 1, int(xs.min()), int(xs.max()) + 1
