"""Single-image reflection removal with a trained decomposer.

Only the denoiser parameters are consulted; synthesizer and discriminator
arrays may be absent from the checkpoint.
"""

from __future__ import annotations

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, load_module_arrays
from .diffusion import make_schedule
from .images import destandardize, hwc_to_tensor, standardize, tensor_to_hwc
from .models import ArchConfig, DenoiserUNet, decompose

__all__ = ["load_denoiser", "remove_reflection"]


def load_denoiser(checkpoint) -> tuple:
    """Build the denoiser (eval mode) and noise schedule from a checkpoint
    path or loaded Checkpoint."""
    ck = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    arch = ArchConfig.from_dict(ck.manifest["arch"])
    denoiser = DenoiserUNet(arch)
    load_module_arrays(denoiser, ck.arrays, "denoiser")
    denoiser.eval()
    s = ck.manifest["schedule"]
    sched = make_schedule(int(s["T"]), float(s["beta_start"]), float(s["beta_end"]))
    return denoiser, sched


def _pad_to_multiple(t: torch.Tensor, factor: int):
    h, w = t.shape[-2:]
    ph = (-h) % factor
    pw = (-w) % factor
    if ph == 0 and pw == 0:
        return t, (0, 0)
    return torch.nn.functional.pad(t, (0, pw, 0, ph), mode="reflect"), (ph, pw)


def remove_reflection(
    x: np.ndarray,
    checkpoint,
    steps: int = 50,
    seed: int = 0,
    deterministic: bool = False,
    pad_mode: str = "error",
):
    """Split a pixel-domain image [H, W, C] in [0, 1] into its transmission
    and reflection estimates.

    Runs the reverse diffusion chain over `steps` uniformly respaced
    timesteps with the given seed (or mean-only when `deterministic`),
    de-standardizes, and clamps to [0, 1]. The transmission estimate is the
    primary output; the reflection estimate is returned for diagnostics.

    Resolutions not divisible by 2**depth raise unless pad_mode="reflect",
    which reflect-pads to the next multiple and crops back.
    """
    denoiser, sched = load_denoiser(checkpoint)
    factor = 2**denoiser.arch.depth
    xt = hwc_to_tensor(np.asarray(x, dtype=np.float32))
    h0, w0 = xt.shape[-2:]
    if pad_mode == "reflect":
        xt, _ = _pad_to_multiple(xt, factor)
    elif pad_mode != "error":
        raise ValueError(f"unknown pad_mode {pad_mode!r}")

    z_s, z_r = decompose(
        denoiser, standardize(xt), sched, steps, seed=seed, deterministic=deterministic
    )
    outs = [
        np.clip(tensor_to_hwc(destandardize(z[..., :h0, :w0])), 0.0, 1.0)
        for z in (z_s, z_r)
    ]
    return outs[0], outs[1]
