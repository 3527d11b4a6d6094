"""Greyscale conversion, bilinear resize and grid-embedding coordinate channels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .qtensor import DType, QuantError, Tensor

# ITU-R BT.601 luma
LUMA = (0.299, 0.587, 0.114)


class CropError(ValueError):
    pass


@dataclass(frozen=True)
class CropBox:
    """Face crop in full-frame pixel coordinates."""

    x0: int
    y0: int
    w: int
    h: int
    frame_w: int
    frame_h: int

    def __post_init__(self):
        vals = (self.x0, self.y0, self.w, self.h, self.frame_w, self.frame_h)
        if not all(isinstance(v, (int, np.integer)) and not isinstance(v, bool) for v in vals):
            raise CropError(f"crop fields must be integers, got {vals}")
        if self.x0 < 0 or self.y0 < 0 or self.w < 1 or self.h < 1:
            raise CropError(f"crop origin must be >= 0 and size >= 1, got {vals}")
        if self.x0 + self.w > self.frame_w or self.y0 + self.h > self.frame_h:
            raise CropError(
                f"crop ({self.x0},{self.y0},{self.w},{self.h}) exceeds frame {self.frame_w}x{self.frame_h}"
            )

    @classmethod
    def full_frame(cls, width: int, height: int) -> "CropBox":
        return cls(0, 0, int(width), int(height), int(width), int(height))

    @classmethod
    def parse(cls, text: str) -> "CropBox":
        """From ``"x0 y0 w h frame_w frame_h"`` (commas also accepted)."""
        parts = text.replace(",", " ").split()
        if len(parts) != 6:
            raise CropError(f"crop needs 6 integers (x0 y0 w h frame_w frame_h), got {text!r}")
        try:
            return cls(*(int(p) for p in parts))
        except ValueError:
            raise CropError(f"crop fields must be integers, got {text!r}") from None

    def format(self) -> str:
        return f"{self.x0} {self.y0} {self.w} {self.h} {self.frame_w} {self.frame_h}"


def _check_image(img: Tensor) -> None:
    if img.dtype is not DType.F32 or len(img.shape) != 4 or img.shape[0] != 1:
        raise QuantError(f"expected an F32 (1, H, W, C) image, got {img.dtype.name} {img.shape}")


def to_greyscale(rgb: Tensor) -> Tensor:
    _check_image(rgb)
    if rgb.shape[3] != 3:
        raise QuantError(f"greyscale conversion needs 3 channels, got {rgb.shape[3]}")
    x = rgb.data.astype(np.float64)
    y = LUMA[0] * x[..., 0] + LUMA[1] * x[..., 1] + LUMA[2] * x[..., 2]
    return Tensor.f32(y[..., None])


def _axis_taps(n_in: int, n_out: int):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: Tensor, out_h: int, out_w: int) -> Tensor:
    """Half-pixel-centre bilinear resize with source coordinates clamped to the image."""
    _check_image(img)
    if out_h < 1 or out_w < 1:
        raise QuantError(f"output dims must be >= 1, got {out_h}x{out_w}")
    _, h, w, _ = img.shape
    if (h, w) == (out_h, out_w):
        return img
    x = img.data.astype(np.float64)
    y0, y1, fy = _axis_taps(h, out_h)
    x0, x1, fx = _axis_taps(w, out_w)
    fx = fx[None, None, :, None]
    top = x[:, y0][:, :, x0] * (1 - fx) + x[:, y0][:, :, x1] * fx
    bot = x[:, y1][:, :, x0] * (1 - fx) + x[:, y1][:, :, x1] * fx
    fy = fy[None, :, None, None]
    return Tensor.f32(top * (1 - fy) + bot * fy)


def grid_embedding(grey: Tensor, crop: CropBox) -> Tensor:
    """Stack grey with each pixel's normalised (x, y) position in the original frame."""
    _check_image(grey)
    if grey.shape[3] != 1:
        raise QuantError(f"grid embedding expects one grey channel, got {grey.shape[3]}")
    if not isinstance(crop, CropBox):
        raise CropError("grid embedding needs a CropBox")
    _, h, w, _ = grey.shape
    cols = (crop.x0 + (np.arange(w) + 0.5) * crop.w / w) / crop.frame_w
    rows = (crop.y0 + (np.arange(h) + 0.5) * crop.h / h) / crop.frame_h
    out = np.empty((1, h, w, 3), dtype=np.float32)
    out[..., 0] = grey.data[..., 0]
    out[..., 1] = cols.astype(np.float32)[None, None, :]
    out[..., 2] = rows.astype(np.float32)[None, :, None]
    return Tensor.f32(out)


def crop_image(frame: Tensor, crop: CropBox) -> Tensor:
    _check_image(frame)
    _, h, w, _ = frame.shape
    if (w, h) != (crop.frame_w, crop.frame_h):
        raise CropError(f"crop frame {crop.frame_w}x{crop.frame_h} does not match image {w}x{h}")
    return Tensor.f32(frame.data[:, crop.y0 : crop.y0 + crop.h, crop.x0 : crop.x0 + crop.w, :])


def preprocess(frame: Tensor, crop: CropBox | None = None, resolution: int = 112) -> Tensor:
    """Full frame -> network input ``(1, resolution, resolution, 3)``.

    Crops the face (whole frame when ``crop`` is None), converts colour input
    to greyscale, resizes, then appends the coordinate channels.
    """
    _check_image(frame)
    if crop is None:
        crop = CropBox.full_frame(frame.shape[2], frame.shape[1])
    face = crop_image(frame, crop)
    if face.shape[3] == 3:
        face = to_greyscale(face)
    elif face.shape[3] != 1:
        raise QuantError(f"frame must have 1 or 3 channels, got {face.shape[3]}")
    return grid_embedding(resize_bilinear(face, resolution, resolution), crop)
