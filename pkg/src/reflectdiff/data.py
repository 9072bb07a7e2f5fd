"""Synthetic reflection composition, toy dataset generation, and batch
iteration for the paired and unpaired protocols.

Everything is deterministic given the seeds: batch order is a pure function
of (manifest, seed, step), and generation partitions per-item randomness by
id so it is order- and parallelism-independent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .images import load_image, save_image
from .util import mix_seed

__all__ = [
    "CompositionParams",
    "ManifestEntry",
    "DatasetManifest",
    "compose_reflection",
    "make_toy_dataset",
    "write_manifest",
    "read_manifest",
    "batch_indices",
    "iterate_paired",
    "iterate_unpaired",
    "load_entry_images",
]


@dataclass(frozen=True)
class CompositionParams:
    """Blend law parameters: x = clip(s + w*B(r) + ghost_weight*w*B(shift(r)))."""

    w: float = 0.4
    blur_sigma: float = 1.5
    ghost_offset: tuple = (4, 4)
    ghost_weight: float = 0.0
    clip: bool = True

    def __post_init__(self):
        if not 0.0 <= self.w <= 1.0:
            raise ValueError("w must be in [0, 1]")
        if self.blur_sigma < 0.0:
            raise ValueError("blur_sigma must be >= 0")
        if not 0.0 <= self.ghost_weight <= 1.0:
            raise ValueError("ghost_weight must be in [0, 1]")


def blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Channel-wise Gaussian blur with reflect boundaries (mean-preserving)."""
    if sigma <= 0.0:
        return img
    return gaussian_filter(img, sigma=(sigma, sigma, 0.0), mode="reflect")


def compose_reflection(s: np.ndarray, r: np.ndarray, p: CompositionParams) -> np.ndarray:
    """Composite a camera image from a transmission and a reflection layer."""
    if s.shape != r.shape:
        raise ValueError(f"shape mismatch {s.shape} vs {r.shape}")
    rb = blur(r, p.blur_sigma)
    x = s + p.w * rb
    if p.ghost_weight > 0.0:
        dy, dx = p.ghost_offset
        x = x + p.ghost_weight * p.w * np.roll(rb, shift=(dy, dx), axis=(0, 1))
    if p.clip:
        x = np.clip(x, 0.0, 1.0)
    return x


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    x_path: str
    s_path: str | None
    r_path: str | None
    split: str
    paired: bool


@dataclass
class DatasetManifest:
    root: str
    seed: int
    entries: list = field(default_factory=list)

    def subset(self, split: str) -> "DatasetManifest":
        return DatasetManifest(
            root=self.root,
            seed=self.seed,
            entries=[e for e in self.entries if e.split == split],
        )

    def __len__(self):
        return len(self.entries)


def write_manifest(manifest: DatasetManifest, path) -> None:
    """Line-delimited JSON records, one per entry."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(json.dumps({"root": manifest.root, "seed": manifest.seed}) + "\n")
        for e in manifest.entries:
            f.write(
                json.dumps(
                    {
                        "id": e.id,
                        "x_path": e.x_path,
                        "s_path": e.s_path,
                        "r_path": e.r_path,
                        "split": e.split,
                        "paired": e.paired,
                    }
                )
                + "\n"
            )


def read_manifest(path) -> DatasetManifest:
    with open(path) as f:
        lines = [json.loads(line) for line in f if line.strip()]
    head, rows = lines[0], lines[1:]
    entries = [ManifestEntry(**row) for row in rows]
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate ids in manifest")
    root = Path(head["root"])
    if not root.is_absolute():  # portable manifests carry a relative root
        root = (Path(path).parent / root).resolve()
    return DatasetManifest(root=str(root), seed=head["seed"], entries=entries)


# --------------------------------------------------------------------------
# toy content generators
# --------------------------------------------------------------------------


def _coords(h, w):
    return np.meshgrid(np.arange(h), np.arange(w), indexing="ij")


def _toy_transmission(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = _coords(h, w)
    # smooth two-color gradient background
    c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
    angle = rng.uniform(0, 2 * math.pi)
    ramp = (np.cos(angle) * xx / w + np.sin(angle) * yy / h + 1.0) / 2.0
    img = c0[None, None] + ramp[:, :, None] * (c1 - c0)[None, None]

    for _ in range(rng.integers(2, 5)):  # solid rectangles
        y0, x0 = rng.integers(0, max(1, h - 3)), rng.integers(0, max(1, w - 3))
        dy, dx = rng.integers(2, max(3, h // 2)), rng.integers(2, max(3, w // 2))
        img[y0 : y0 + dy, x0 : x0 + dx] = rng.uniform(0, 1, size=3)

    for _ in range(rng.integers(1, 4)):  # filled circles
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        rad = rng.uniform(min(h, w) * 0.06, min(h, w) * 0.25)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad**2
        img[mask] = rng.uniform(0, 1, size=3)

    for _ in range(rng.integers(2, 5)):  # text-like strokes
        p0 = rng.uniform(0, [h, w])
        p1 = rng.uniform(0, [h, w])
        width = rng.uniform(0.6, 1.6)
        d = p1 - p0
        denom = float(d @ d) + 1e-9
        tproj = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / denom, 0, 1)
        dist2 = (yy - (p0[0] + tproj * d[0])) ** 2 + (xx - (p0[1] + tproj * d[1])) ** 2
        img[dist2 <= width**2] = rng.uniform(0, 1, size=3)

    return np.clip(img, 0.0, 1.0).astype(np.float64)


def _toy_reflection(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = _coords(h, w)
    img = np.zeros((h, w, 3))

    for _ in range(rng.integers(1, 4)):  # soft blobs
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sig = rng.uniform(0.08, 0.3) * min(h, w)
        amp = rng.uniform(0.4, 1.0)
        blob = amp * np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2)))
        img += blob[:, :, None] * rng.uniform(0.6, 1.0, size=3)[None, None]

    for _ in range(rng.integers(1, 3)):  # bright streaks
        angle = rng.uniform(0, math.pi)
        offset = rng.uniform(-0.4, 0.4) * min(h, w)
        width = rng.uniform(1.0, 4.0)
        d = np.cos(angle) * (yy - h / 2) + np.sin(angle) * (xx - w / 2) - offset
        streak = np.exp(-(d**2) / (2 * width**2)) * rng.uniform(0.3, 0.9)
        img += streak[:, :, None]

    if rng.uniform() < 0.4:  # window-frame grid
        pitch = int(rng.integers(8, 17))
        phase = int(rng.integers(0, pitch))
        level = rng.uniform(0.3, 0.8)
        grid = ((yy + phase) % pitch < 2) | ((xx + phase) % pitch < 2)
        img[grid] += level

    return np.clip(img, 0.0, 1.0)


def sample_composition_params(rng: np.random.Generator) -> CompositionParams:
    ghosted = rng.uniform() < 0.5
    return CompositionParams(
        w=float(rng.uniform(0.2, 0.6)),
        blur_sigma=float(rng.uniform(0.5, 3.0)),
        ghost_offset=(int(rng.integers(2, 9)), int(rng.integers(2, 9))),
        ghost_weight=float(rng.uniform(0.1, 0.4)) if ghosted else 0.0,
        clip=True,
    )


def make_toy_dataset(
    n: int, size, seed: int, root, test_fraction: float = 0.16
) -> DatasetManifest:
    """Generate n composed triplets under root/{x,s,r}/<id>.png plus a
    manifest; the trailing round(n*test_fraction) ids form the test split."""
    if n < 1:
        raise ValueError("n must be >= 1")
    h, w = size
    root = Path(root)
    for sub in ("x", "s", "r"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    n_test = int(round(n * test_fraction))
    entries = []
    for i in range(n):
        rng = np.random.default_rng(mix_seed(seed, "toy-item", i))
        s = _toy_transmission(rng, h, w)
        r = _toy_reflection(rng, h, w)
        x = compose_reflection(s, r, sample_composition_params(rng))
        item = f"{i:05d}"
        paths = {k: f"{k}/{item}.png" for k in ("x", "s", "r")}
        save_image(root / paths["x"], x)
        save_image(root / paths["s"], s)
        save_image(root / paths["r"], r)
        entries.append(
            ManifestEntry(
                id=item,
                x_path=paths["x"],
                s_path=paths["s"],
                r_path=paths["r"],
                split="test" if i >= n - n_test else "train",
                paired=True,
            )
        )
    manifest = DatasetManifest(root=str(root), seed=seed, entries=entries)
    # the on-disk manifest uses a relative root so the dataset is relocatable
    # (and byte-identical for identical seeds wherever it is generated)
    write_manifest(
        DatasetManifest(root=".", seed=seed, entries=entries), root / "manifest.jsonl"
    )
    return manifest


# --------------------------------------------------------------------------
# batch iteration
# --------------------------------------------------------------------------


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Entry indices for one training step; pure in (n, batch_size, seed, step).

    Epochs are seeded shuffles; each epoch covers every index exactly once
    (the last batch of an epoch may be short).
    """
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
    per_epoch = math.ceil(n / batch_size)
    epoch, slot = divmod(step, per_epoch)
    perm = np.random.default_rng(mix_seed(seed, "epoch", epoch)).permutation(n)
    return perm[slot * batch_size : (slot + 1) * batch_size]


def load_entry_images(manifest: DatasetManifest, idx, keys=("x", "s", "r")) -> dict:
    """Stack the requested image kinds for the given entry indices."""
    root = Path(manifest.root)
    out = {}
    for key in keys:
        imgs = []
        for i in idx:
            e = manifest.entries[int(i)]
            path = getattr(e, f"{key}_path")
            if path is None:
                raise ValueError(f"entry {e.id} has no {key} image")
            imgs.append(load_image(root / path))
        out[key] = np.stack(imgs)
    return out


def iterate_paired(manifest: DatasetManifest, batch_size: int, seed: int, epochs=None):
    """Stream of {x, s, r} batches (numpy [B, H, W, C]) in seeded-shuffle
    epoch order; epochs=None streams forever."""
    n = len(manifest.entries)
    per_epoch = math.ceil(n / batch_size)
    step = 0
    while epochs is None or step < epochs * per_epoch:
        idx = batch_indices(n, batch_size, seed, step)
        yield load_entry_images(manifest, idx, keys=("x", "s", "r"))
        step += 1


def iterate_unpaired(
    manifest_x: DatasetManifest, manifest_s: DatasetManifest, batch_size: int, seed: int, epochs=None
):
    """Stream of ({x}, {s}) batch pairs drawn independently from two pools."""
    nx, ns = len(manifest_x.entries), len(manifest_s.entries)
    per_epoch = math.ceil(nx / batch_size)
    step = 0
    while epochs is None or step < epochs * per_epoch:
        ix = batch_indices(nx, batch_size, mix_seed(seed, "x-pool"), step)
        # the s-pool cycles independently so differing pool sizes stay valid
        js = batch_indices(ns, min(batch_size, ns), mix_seed(seed, "s-pool"), step)
        yield (
            load_entry_images(manifest_x, ix, keys=("x",)),
            load_entry_images(manifest_s, js, keys=("s",)),
        )
        step += 1
