"""Image I/O and value-domain conversions.

Pixel-domain images live in numpy arrays of shape [H, W, C] with values in
[0, 1]; the diffusion core works on standardized torch tensors [B, C, H, W]
in [-1, 1]. Conversions happen only at these helpers.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

__all__ = [
    "load_image",
    "save_image",
    "standardize",
    "destandardize",
    "hwc_to_tensor",
    "tensor_to_hwc",
]


def load_image(path) -> np.ndarray:
    """PNG to float32 [H, W, C] in [0, 1]; 8-bit and 16-bit inputs are scaled
    by 1/(2**bits - 1). Grayscale loads as a single channel."""
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype in (np.uint16, np.int32):
        scale = 65535.0
    else:
        raise ValueError(f"unsupported PNG sample type {arr.dtype} in {path}")
    arr = arr.astype(np.float32) / scale
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[2] == 4:  # drop alpha
        arr = arr[:, :, :3]
    return arr


def save_image(path, arr: np.ndarray, bits: int = 8) -> None:
    """Float [H, W, C] in [0, 1] to PNG (8- or 16-bit)."""
    if arr.ndim == 2:
        arr = arr[:, :, None]
    peak = 2**bits - 1
    q = np.round(np.clip(arr, 0.0, 1.0) * peak)
    if bits == 8:
        q = q.astype(np.uint8)
    elif bits == 16:
        q = q.astype(np.uint16)
    else:
        raise ValueError("bits must be 8 or 16")
    if q.shape[2] == 1:
        q = q[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path)


def standardize(x):
    """Pixel [0, 1] to diffusion space [-1, 1]."""
    return x * 2.0 - 1.0


def destandardize(z):
    """Diffusion space [-1, 1] back to pixel [0, 1] (no clamping here)."""
    return (z + 1.0) / 2.0


def hwc_to_tensor(arr: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """[H, W, C] numpy to [1, C, H, W] torch."""
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None].to(dtype)


def tensor_to_hwc(t: torch.Tensor) -> np.ndarray:
    """[C, H, W] or [1, C, H, W] torch to [H, W, C] numpy."""
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise ValueError("expected a single image")
        t = t[0]
    return t.detach().cpu().numpy().transpose(1, 2, 0)
