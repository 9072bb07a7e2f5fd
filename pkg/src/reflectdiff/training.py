"""Paired and unpaired training steps, the two-stage protocol, optimization,
checkpointing, and ablation switches.

Reproducibility contract: (seed, config, data) fully determine every
checkpoint byte. All per-step randomness is derived from (seed, global
step), and batch order is a pure function of (seed, step), so resuming from
a checkpoint mid-run reproduces the exact state of an uninterrupted run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, module_arrays, load_module_arrays, save_checkpoint
from .data import DatasetManifest, batch_indices, load_entry_images
from .diffusion import NoiseSchedule, make_schedule, predict_x0, q_sample, respace_schedule, reverse_step
from .images import destandardize, standardize
from .losses import (
    LossWeights,
    adversarial_loss_d_logits,
    adversarial_loss_g_logits,
    cycle_loss,
    denoising_loss,
    reconstruction_loss,
)
from .models import ARCH_PRESETS, ArchConfig, build_models
from .util import mix_seed

__all__ = [
    "TrainConfig",
    "TrainState",
    "LossReport",
    "TrainingDiverged",
    "init_state",
    "make_optimizer",
    "train_paired_step",
    "train_unpaired_step",
    "run_two_stage",
    "save_train_state",
    "load_train_state",
]

ABLATIONS = frozenset({"no_td", "no_attention", "no_rsn"})
LOG_COLUMNS = ("step", "stage", "l_de", "l_rec", "l_adv_g", "l_adv_d", "l_cyc", "total")


class TrainingDiverged(RuntimeError):
    """A loss component became non-finite; the step was aborted."""

    def __init__(self, component: str, step: int):
        super().__init__(f"non-finite loss component {component!r} at step {step}")
        self.component = component


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = LossWeights()
    lr: float = 1e-4
    batch_size: int = 8
    steps_paired: int = 0
    steps_unpaired: int = 0
    seed: int = 0
    ablation: frozenset = frozenset()
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    checkpoint_every: int = 500
    grad_clip: float = 1.0
    arch: str = "desk"
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    recon_t_frac: float = 0.5       # cheap x0 estimates sample t <= frac * T
    unpaired_recon: str = "chain"   # "chain" | "anchor"
    unpaired_chain_steps: int = 8

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        unknown = set(self.ablation) - ABLATIONS
        if unknown:
            raise ValueError(f"unknown ablation flags {sorted(unknown)}")
        if self.unpaired_recon not in ("chain", "anchor"):
            raise ValueError(f"unknown unpaired_recon mode {self.unpaired_recon!r}")
        if not 0.0 < self.recon_t_frac <= 1.0:
            raise ValueError("recon_t_frac must be in (0, 1]")


@dataclass
class TrainState:
    denoiser: torch.nn.Module
    synthesizer: torch.nn.Module
    discriminator: torch.nn.Module
    opt_denoiser: torch.optim.Optimizer
    opt_synthesizer: torch.optim.Optimizer
    opt_discriminator: torch.optim.Optimizer
    sched: NoiseSchedule
    arch: ArchConfig
    step: int = 0
    stage: str = "paired"


@dataclass
class LossReport:
    step: int
    stage: str
    l_de: float = 0.0
    l_rec: float = 0.0
    l_adv_g: float = 0.0
    l_adv_d: float = 0.0
    l_cyc: float = 0.0
    total: float = 0.0

    def csv_row(self) -> str:
        return (
            f"{self.step},{self.stage},{self.l_de:.8g},{self.l_rec:.8g},"
            f"{self.l_adv_g:.8g},{self.l_adv_d:.8g},{self.l_cyc:.8g},{self.total:.8g}"
        )


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(
        params, lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps
    )


def init_state(cfg: TrainConfig) -> TrainState:
    if cfg.arch not in ARCH_PRESETS:
        raise ValueError(f"unknown architecture preset {cfg.arch!r}")
    arch = ARCH_PRESETS[cfg.arch]
    torch.manual_seed(mix_seed(cfg.seed, "model-init"))
    denoiser, synthesizer, discriminator = build_models(arch)
    if "no_attention" in cfg.ablation:
        synthesizer.use_attention = False
    return TrainState(
        denoiser=denoiser,
        synthesizer=synthesizer,
        discriminator=discriminator,
        opt_denoiser=make_optimizer(denoiser.parameters(), cfg),
        opt_synthesizer=make_optimizer(synthesizer.parameters(), cfg),
        opt_discriminator=make_optimizer(discriminator.parameters(), cfg),
        sched=make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end),
        arch=arch,
    )


def _step_generator(cfg: TrainConfig, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(mix_seed(cfg.seed, "step", step))


def _require_finite(value, component: str, step: int) -> float:
    v = float(value.detach() if torch.is_tensor(value) else value)
    if not math.isfinite(v):
        raise TrainingDiverged(component, step)
    return v


def _item(value) -> float:
    return float(value.detach() if torch.is_tensor(value) else value)


def _randint_t(gen, batch, high) -> torch.Tensor:
    return torch.randint(1, high + 1, (batch,), generator=gen)


def _randn_like(x, gen) -> torch.Tensor:
    return torch.randn(x.shape, generator=gen, dtype=x.dtype, device=x.device)


def _freeze(module, frozen: bool):
    for p in module.parameters():
        p.requires_grad_(not frozen)


def _update(optimizer, module, loss, clip: float):
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if clip > 0:
        torch.nn.utils.clip_grad_norm_(module.parameters(), clip)
    optimizer.step()


def train_paired_step(state: TrainState, batch: dict, cfg: TrainConfig):
    """One supervised step on aligned (x, s, r) triplets: update the
    decomposer on the weighted denoising/reconstruction/adversarial
    objective, then the discriminator, then the synthesizer on cycle loss.

    Batch tensors are pixel-domain [B, C, H, W]. Returns (state, report).
    """
    if state.stage != "paired":
        raise ValueError(f"state is in stage {state.stage!r}, expected 'paired'")
    x_px, s_px, r_px = batch["x"], batch["s"], batch["r"]
    if x_px.shape != s_px.shape or x_px.shape != r_px.shape:
        raise ValueError("paired batch tensors must share one shape")
    gen = _step_generator(cfg, state.step)
    sched = state.sched
    w = cfg.weights
    no_td = "no_td" in cfg.ablation
    no_rsn = "no_rsn" in cfg.ablation

    xs, ss, rs = standardize(x_px), standardize(s_px), standardize(r_px)
    b = xs.shape[0]
    t_rec_max = max(1, int(round(cfg.recon_t_frac * sched.T)))

    t_de = _randint_t(gen, b, sched.T)
    t_rec = _randint_t(gen, b, t_rec_max)
    eps_de_s, eps_de_r = _randn_like(ss, gen), _randn_like(rs, gen)
    eps_rec_s, eps_rec_r = _randn_like(ss, gen), _randn_like(rs, gen)

    s_t = q_sample(ss, t_de, eps_de_s, sched)
    r_t = q_sample(rs, t_de, eps_de_r, sched)
    s_t2 = q_sample(ss, t_rec, eps_rec_s, sched)
    r_t2 = q_sample(rs, t_rec, eps_rec_r, sched)

    # phase 1: decomposer. One forward serves both objectives: the first half
    # of the doubled batch carries the denoising-loss samples, the second the
    # bounded-timestep samples behind the single-step x0 estimates.
    _freeze(state.discriminator, True)
    eh_s, eh_r = state.denoiser(
        torch.cat([s_t, s_t2]),
        torch.cat([r_t, r_t2]),
        torch.cat([xs, xs]),
        torch.cat([t_de, t_rec]),
    )
    l_de = denoising_loss(eps_de_s, eh_s[:b]) + denoising_loss(eps_de_r, eh_r[:b])
    s0_hat = predict_x0(s_t2, eh_s[b:], t_rec, sched)
    r0_hat = predict_x0(r_t2, eh_r[b:], t_rec, sched)
    l_rec = reconstruction_loss(ss, rs, s0_hat, r0_hat)
    if no_td:
        l_adv_g = torch.zeros(())
    else:
        l_adv_g = adversarial_loss_g_logits(state.discriminator(destandardize(s0_hat)))
    _require_finite(l_de, "l_de", state.step)
    _require_finite(l_rec, "l_rec", state.step)
    _require_finite(l_adv_g, "l_adv_g", state.step)
    loss_dec = w.lambda1 * l_de + w.lambda2 * l_rec + w.lambda3 * l_adv_g
    _update(state.opt_denoiser, state.denoiser, loss_dec, cfg.grad_clip)
    _freeze(state.discriminator, False)

    # phase 2: discriminator on real transmissions vs the detached estimates
    l_adv_d = torch.zeros(())
    if not no_td:
        logit_real = state.discriminator(s_px)
        logit_fake = state.discriminator(destandardize(s0_hat).detach())
        l_adv_d = adversarial_loss_d_logits(logit_real, logit_fake)
        _require_finite(l_adv_d, "l_adv_d", state.step)
        _update(state.opt_discriminator, state.discriminator, l_adv_d, cfg.grad_clip)

    # phase 3: synthesizer on cycle consistency over the detached estimates
    l_cyc = torch.zeros(())
    if not no_rsn:
        x_hat = state.synthesizer(s0_hat.detach(), r0_hat.detach())
        l_cyc = cycle_loss(xs, x_hat)
        _require_finite(l_cyc, "l_cyc", state.step)
        # under no_attention the synthesizer is parameterless superposition,
        # so there is nothing to update
        if l_cyc.requires_grad:
            _update(state.opt_synthesizer, state.synthesizer, l_cyc, cfg.grad_clip)

    report = LossReport(
        step=state.step,
        stage="paired",
        l_de=_item(l_de),
        l_rec=_item(l_rec),
        l_adv_g=_item(l_adv_g),
        l_adv_d=_item(l_adv_d),
        l_cyc=_item(l_cyc),
        total=_item(w.lambda1 * l_de + w.lambda2 * l_rec + w.lambda3 * l_adv_g + l_cyc),
    )
    state.step += 1
    return state, report


def _short_chain(state: TrainState, xs: torch.Tensor, cfg: TrainConfig, gen):
    """Ancestral decomposition over a few respaced steps; gradients flow
    through the final denoiser call only."""
    sub, taus = respace_schedule(state.sched, cfg.unpaired_chain_steps)
    z_s, z_r = _randn_like(xs, gen), _randn_like(xs, gen)
    with torch.no_grad():
        for i in range(sub.T, 1, -1):
            eps_s, eps_r = state.denoiser(z_s, z_r, xs, int(taus[i - 1]))
            z_s = reverse_step(z_s, eps_s, i, _randn_like(xs, gen), sub)
            z_r = reverse_step(z_r, eps_r, i, _randn_like(xs, gen), sub)
    eps_s, eps_r = state.denoiser(z_s, z_r, xs, int(taus[0]))
    zero = torch.zeros_like(xs)
    return (
        reverse_step(z_s, eps_s, 1, zero, sub),
        reverse_step(z_r, eps_r, 1, zero, sub),
    )


def _anchor_estimate(state: TrainState, xs: torch.Tensor, cfg: TrainConfig, gen):
    """Cheap single-pass decomposition: both branch states are forward-noised
    copies of the camera image at a bounded sampled timestep."""
    sched = state.sched
    b = xs.shape[0]
    t = _randint_t(gen, b, max(1, int(round(cfg.recon_t_frac * sched.T))))
    eps_s, eps_r = _randn_like(xs, gen), _randn_like(xs, gen)
    s_t = q_sample(xs, t, eps_s, sched)
    r_t = q_sample(xs, t, eps_r, sched)
    eh_s, eh_r = state.denoiser(s_t, r_t, xs, t)
    return predict_x0(s_t, eh_s, t, sched), predict_x0(r_t, eh_r, t, sched)


def train_unpaired_step(state: TrainState, batch_x: dict, batch_s: dict, cfg: TrainConfig):
    """One self-supervised step: jointly update decomposer and synthesizer on
    cycle + weighted adversarial loss, then update the discriminator against
    the independent pool of real transmission images."""
    if state.stage != "unpaired":
        raise ValueError(f"state is in stage {state.stage!r}, expected 'unpaired'")
    x_px = batch_x["x"]
    s_px = batch_s["s"]
    gen = _step_generator(cfg, state.step)
    w = cfg.weights
    no_td = "no_td" in cfg.ablation
    no_rsn = "no_rsn" in cfg.ablation

    xs = standardize(x_px)
    if cfg.unpaired_recon == "chain":
        s0_hat, r0_hat = _short_chain(state, xs, cfg, gen)
    else:
        s0_hat, r0_hat = _anchor_estimate(state, xs, cfg, gen)

    l_cyc = torch.zeros(())
    l_adv_g = torch.zeros(())
    terms = []
    if not no_rsn:
        x_hat = state.synthesizer(s0_hat, r0_hat)
        l_cyc = cycle_loss(xs, x_hat)
        _require_finite(l_cyc, "l_cyc", state.step)
        terms.append(l_cyc)
    if not no_td and w.lambda_adv > 0:
        _freeze(state.discriminator, True)
        l_adv_g = adversarial_loss_g_logits(state.discriminator(destandardize(s0_hat)))
        _require_finite(l_adv_g, "l_adv_g", state.step)
        terms.append(w.lambda_adv * l_adv_g)

    if terms and any(t.requires_grad for t in terms):
        joint = sum(terms)
        state.opt_denoiser.zero_grad(set_to_none=True)
        state.opt_synthesizer.zero_grad(set_to_none=True)
        joint.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(state.denoiser.parameters(), cfg.grad_clip)
            torch.nn.utils.clip_grad_norm_(state.synthesizer.parameters(), cfg.grad_clip)
        state.opt_denoiser.step()
        state.opt_synthesizer.step()
    _freeze(state.discriminator, False)

    l_adv_d = torch.zeros(())
    if not no_td:
        logit_real = state.discriminator(s_px)
        logit_fake = state.discriminator(destandardize(s0_hat).detach())
        l_adv_d = adversarial_loss_d_logits(logit_real, logit_fake)
        _require_finite(l_adv_d, "l_adv_d", state.step)
        _update(state.opt_discriminator, state.discriminator, l_adv_d, cfg.grad_clip)

    report = LossReport(
        step=state.step,
        stage="unpaired",
        l_adv_g=_item(l_adv_g),
        l_adv_d=_item(l_adv_d),
        l_cyc=_item(l_cyc),
        total=_item(l_cyc + w.lambda_adv * l_adv_g),
    )
    state.step += 1
    return state, report


# --------------------------------------------------------------------------
# two-stage protocol with checkpointing
# --------------------------------------------------------------------------


def save_train_state(path, state: TrainState, cfg: TrainConfig) -> None:
    manifest = {
        "format": "reflectdiff-train-state",
        "arch_preset": cfg.arch,
        "arch": state.arch.to_dict(),
        "heads": state.arch.heads,
        "depth": state.arch.depth,
        "channels": list(state.arch.channels),
        "schedule": {
            "T": cfg.timesteps,
            "beta_start": cfg.beta_start,
            "beta_end": cfg.beta_end,
        },
        "stage": state.stage,
        "step": state.step,
        "seed": cfg.seed,
        "ablation": sorted(cfg.ablation),
    }
    arrays = {}
    arrays.update(module_arrays(state.denoiser, "denoiser"))
    arrays.update(module_arrays(state.synthesizer, "synthesizer"))
    arrays.update(module_arrays(state.discriminator, "discriminator"))
    for prefix, opt in (
        ("adam_denoiser", state.opt_denoiser),
        ("adam_synthesizer", state.opt_synthesizer),
        ("adam_discriminator", state.opt_discriminator),
    ):
        for pid, st in opt.state_dict()["state"].items():
            for key in ("step", "exp_avg", "exp_avg_sq"):
                v = st[key]
                arrays[f"{prefix}.{pid}.{key}"] = (
                    v.detach().cpu().numpy() if torch.is_tensor(v) else np.asarray(v)
                )
    save_checkpoint(path, manifest, arrays)


def _load_opt(opt: torch.optim.Optimizer, arrays: dict, prefix: str) -> None:
    sd = opt.state_dict()
    pids = sorted(
        {int(k.split(".")[1]) for k in arrays if k.startswith(prefix + ".")}
    )
    st = {}
    for pid in pids:
        st[pid] = {
            "step": torch.as_tensor(
                np.asarray(arrays[f"{prefix}.{pid}.step"]), dtype=torch.float32
            ).reshape(()),
            "exp_avg": torch.from_numpy(arrays[f"{prefix}.{pid}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"{prefix}.{pid}.exp_avg_sq"].copy()),
        }
    sd["state"] = st
    opt.load_state_dict(sd)


def load_train_state(path, cfg: TrainConfig) -> TrainState:
    ck = load_checkpoint(path)
    man = ck.manifest
    if man.get("format") != "reflectdiff-train-state":
        raise ValueError(f"{path} is not a training checkpoint")
    if man["seed"] != cfg.seed or man["arch_preset"] != cfg.arch:
        raise ValueError(
            "checkpoint was produced under a different seed or architecture "
            f"(ckpt seed={man['seed']} arch={man['arch_preset']!r}, "
            f"config seed={cfg.seed} arch={cfg.arch!r})"
        )
    state = init_state(cfg)
    load_module_arrays(state.denoiser, ck.arrays, "denoiser")
    load_module_arrays(state.synthesizer, ck.arrays, "synthesizer")
    load_module_arrays(state.discriminator, ck.arrays, "discriminator")
    _load_opt(state.opt_denoiser, ck.arrays, "adam_denoiser")
    _load_opt(state.opt_synthesizer, ck.arrays, "adam_synthesizer")
    _load_opt(state.opt_discriminator, ck.arrays, "adam_discriminator")
    state.step = int(man["step"])
    state.stage = man["stage"]
    return state


def _load_split_arrays(manifest: DatasetManifest, keys) -> dict:
    return load_entry_images(manifest, np.arange(len(manifest.entries)), keys=keys)


def _torch_batch(arrays: dict, idx: np.ndarray) -> dict:
    return {
        k: torch.from_numpy(v[idx].transpose(0, 3, 1, 2).copy()).float()
        for k, v in arrays.items()
    }


def run_two_stage(
    cfg: TrainConfig,
    paired_data: DatasetManifest | None,
    unpaired_data: tuple | None,
    out_dir,
    resume_from=None,
    log_fn=None,
) -> TrainState:
    """Run the paired stage for cfg.steps_paired steps and the unpaired stage
    for cfg.steps_unpaired steps, checkpointing on schedule.

    `unpaired_data` is a (camera_pool, transmission_pool) manifest pair. The
    returned state carries the final parameters; checkpoints and the
    append-only loss CSV land in out_dir.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    total = cfg.steps_paired + cfg.steps_unpaired
    if cfg.steps_paired > 0 and (paired_data is None or len(paired_data) == 0):
        raise ValueError("paired stage is active but the paired dataset is empty")
    if cfg.steps_unpaired > 0:
        if unpaired_data is None or len(unpaired_data[0]) == 0 or len(unpaired_data[1]) == 0:
            raise ValueError("unpaired stage is active but an unpaired pool is empty")

    if resume_from is not None:
        state = load_train_state(resume_from, cfg)
    else:
        state = init_state(cfg)
        save_train_state(out_dir / "ckpt_step000000.rdck", state, cfg)

    log_path = out_dir / "losses.csv"
    if not log_path.exists():
        log_path.write_text(",".join(LOG_COLUMNS) + "\n")

    paired_arrays = None
    unpaired_x = unpaired_s = None

    with open(log_path, "a") as log:
        while state.step < total:
            if state.step < cfg.steps_paired:
                state.stage = "paired"
                if paired_arrays is None:
                    paired_arrays = _load_split_arrays(paired_data, ("x", "s", "r"))
                idx = batch_indices(
                    len(paired_data), cfg.batch_size, mix_seed(cfg.seed, "paired-data"), state.step
                )
                batch = _torch_batch(paired_arrays, idx)
                state, report = train_paired_step(state, batch, cfg)
            else:
                state.stage = "unpaired"
                if unpaired_x is None:
                    unpaired_x = _load_split_arrays(unpaired_data[0], ("x",))
                    unpaired_s = _load_split_arrays(unpaired_data[1], ("s",))
                k = state.step - cfg.steps_paired
                nx = len(unpaired_data[0])
                ns = len(unpaired_data[1])
                ix = batch_indices(nx, cfg.batch_size, mix_seed(cfg.seed, "unpaired-x"), k)
                js = batch_indices(
                    ns, min(cfg.batch_size, ns), mix_seed(cfg.seed, "unpaired-s"), k
                )
                state, report = train_unpaired_step(
                    state, _torch_batch(unpaired_x, ix), _torch_batch(unpaired_s, js), cfg
                )
            log.write(report.csv_row() + "\n")
            if log_fn is not None:
                log_fn(report)
            if cfg.checkpoint_every > 0 and state.step % cfg.checkpoint_every == 0:
                save_train_state(out_dir / f"ckpt_step{state.step:06d}.rdck", state, cfg)

    if cfg.steps_unpaired > 0 and state.step >= cfg.steps_paired:
        state.stage = "unpaired"
    save_train_state(out_dir / "ckpt_final.rdck", state, cfg)
    return state
