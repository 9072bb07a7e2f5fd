"""Cycle-consistent diffusion decomposition for single-image reflection removal.

The package splits a camera image shot through glass into a transmission
layer (the scene behind the glass) and a reflection layer, using a
dual-branch denoising diffusion decomposer trained with paired and
unpaired protocols, an attention-based re-synthesizer, and a
transmission discriminator.
"""

__version__ = "0.1.0"
