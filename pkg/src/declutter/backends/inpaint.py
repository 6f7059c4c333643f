"""Crop-and-paste wrapper for inpainting-style removers.

The image is cropped to the (already dilated) mask's bounding box plus a
margin, the inner tool fills the crop, and only masked pixels are pasted
back, so the rest of the image is untouched bit for bit.
"""
from __future__ import annotations

from ..raster import as_image, as_mask, mask_bounds

__all__ = ["CropInpaintRemover", "crop_window"]


def crop_window(mask, margin: int):
    """Half-open ``(y0, y1, x0, x1)`` window around the mask, clipped to the image."""
    m = as_mask(mask)
    b = mask_bounds(m)
    if b is None:
        return None
    y0, y1, x0, x1 = b
    h, w = m.shape
    return max(y0 - margin, 0), min(y1 + margin, h), max(x0 - margin, 0), min(x1 + margin, w)


class CropInpaintRemover:
    """Wrap anything with ``remove(image, mask, label)`` to work on a crop."""

    def __init__(self, inner, margin: int = 8):
        if margin < 0:
            raise ValueError("margin must be >= 0")
        self.inner = inner
        self.margin = margin

    def remove(self, image, mask, label):
        img = as_image(image)
        m = as_mask(mask, img.shape)
        win = crop_window(m, self.margin)
        if win is None:
            return img.copy()
        y0, y1, x0, x1 = win
        filled = as_image(self.inner.remove(img[y0:y1, x0:x1].copy(), m[y0:y1, x0:x1].copy(), label))
        if filled.shape != (y1 - y0, x1 - x0, 3):
            raise ValueError("inner remover changed the crop size")
        out = img.copy()
        sub = out[y0:y1, x0:x1]
        sub[m[y0:y1, x0:x1]] = filled[m[y0:y1, x0:x1]]
        return out
