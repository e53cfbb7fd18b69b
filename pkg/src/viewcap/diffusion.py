"""Partial forward noising, the training objective, and the reverse sampler.

The joint latent holds an image segment followed by a caption segment.  The
forward process perturbs only the caption segment; the image segment rides
along untouched and acts as the conditioning signal when the network denoises.

The per-example training loss combines four terms:

- ``anchor_term`` (drawn timestep t = 1): squared distance between the clean
  caption embedding and the prediction from the least-noised latent,
- ``sum_term`` (t >= 2): squared distance between the caption segment of the
  sampled x_0 and its prediction,
- ``reg_term``: ``reg_weight * ||x_0||^2`` over the whole joint latent,
- ``ce_term``: ``ce_weight *`` per-position cross-entropy of the rounding
  logits at the predicted caption latent against the reference token ids.

All squared norms and the cross-entropy are sums (not means) over coordinates
and positions; batches average these per-example values.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from .denoiser import Denoiser, DenoiserConfig, init_params
from .embedding import (
    InputPair,
    LatentSequence,
    clamp_to_embedding,
    embed_caption,
    embed_view,
    round_to_tokens,
    sample_x0,
    token_logits,
)
from .patchgrid import ViewPatchGrid
from .rng import TAG_DATA, TAG_INIT, TAG_LOSS, torch_generator
from .schedule import SCHEDULE_KINDS, NoiseSchedule, build_schedule, posterior_coeffs

__all__ = [
    "TrainConfig",
    "LossBreakdown",
    "TrainingFault",
    "SamplingFault",
    "forward_noise",
    "training_loss",
    "training_losses",
    "train",
    "sample_reverse",
]


class TrainingFault(RuntimeError):
    """Non-finite loss (or gradient source) encountered while training."""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


class SamplingFault(RuntimeError):
    """Non-finite latent encountered in the reverse sampler."""

    def __init__(self, message: str, timestep: int):
        super().__init__(message)
        self.timestep = timestep


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; the model's shape lives in DenoiserConfig."""

    schedule_kind: str = "sqrt"
    T: int = 2000
    batch_size: int = 16
    steps: int = 10000
    lr: float = 1e-3
    warmup_steps: int = 500
    reg_weight: float = 1e-3
    ce_weight: float = 1.0
    clamp_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.schedule_kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.schedule_kind!r}")
        for field in ("T", "batch_size", "steps"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.reg_weight < 0 or self.ce_weight < 0:
            raise ValueError("reg_weight and ce_weight must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


@dataclass(frozen=True)
class LossBreakdown:
    """The four objective terms plus their sum, as 0-d tensors.

    ``total`` carries the autograd graph (call ``total.backward()``); the four
    component terms are detached value-only copies.
    """

    anchor_term: torch.Tensor
    sum_term: torch.Tensor
    reg_term: torch.Tensor
    ce_term: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {
            "anchor_term": float(self.anchor_term),
            "sum_term": float(self.sum_term),
            "reg_term": float(self.reg_term),
            "ce_term": float(self.ce_term),
            "total": float(self.total.detach()),
        }


def forward_noise(
    x_0: LatentSequence,
    t: int,
    schedule: NoiseSchedule,
    rng: torch.Generator,
    noise: Optional[torch.Tensor] = None,
) -> LatentSequence:
    """Noise the caption segment to level ``t``; copy the image segment bit-identically.

    ``caption = sqrt(alpha_bar_t) * x_0^cap + sqrt(1 - alpha_bar_t) * eps`` with
    ``eps`` standard normal per coordinate (injectable through ``noise`` for
    exactness tests).
    """
    if not 1 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [1, {schedule.T}]")
    cap = x_0.cap
    if noise is None:
        noise = torch.randn(cap.shape, generator=rng, dtype=cap.dtype)
    elif noise.shape != cap.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != {tuple(cap.shape)}")
    abar = schedule.alpha_bar(t)
    noisy_cap = math.sqrt(abar) * cap + math.sqrt(1.0 - abar) * noise
    return x_0.replace_values(torch.cat([x_0.img, noisy_cap], dim=0))


def training_losses(
    model: Denoiser,
    pairs: Sequence[InputPair],
    schedule: NoiseSchedule,
    config: TrainConfig,
    rng: torch.Generator,
) -> LossBreakdown:
    """The training objective on a batch, with gradients flowing to all params.

    Per pair: draw ``x_0`` around its embedding (std ``sqrt(beta_0)`` from the
    schedule), draw ``t`` uniform on ``{1..T}``, noise the caption segment, and
    score the denoiser's prediction.  Terms are per-example sums averaged over
    the batch, so a single-pair call returns exactly the per-example values.
    """
    if not pairs:
        raise ValueError("empty batch")
    if schedule.T != config.T:
        raise ValueError(f"schedule T={schedule.T} does not match config T={config.T}")
    table = model.table
    cfg = model.config
    x0_list = [sample_x0(table, p, schedule.beta0, rng) for p in pairs]
    for x0, p in zip(x0_list, pairs):
        if x0.img_len != cfg.L_img or x0.cap_len != cfg.L_cap:
            raise ValueError(
                f"pair embeds to segments ({x0.img_len}, {x0.cap_len}); the model "
                f"expects ({cfg.L_img}, {cfg.L_cap})"
            )
    B = len(pairs)
    dtype = model.dtype
    x0_vals = torch.stack([x.values for x in x0_list])  # (B, L, H)
    t = torch.randint(1, schedule.T + 1, (B,), generator=rng)
    abar = torch.tensor([schedule.alpha_bar(int(tt)) for tt in t], dtype=dtype)
    eps = torch.randn((B, cfg.L_cap, cfg.H), generator=rng, dtype=dtype)
    x0_cap = x0_vals[:, cfg.L_img :]
    noisy_cap = (
        abar.sqrt()[:, None, None] * x0_cap + (1.0 - abar).sqrt()[:, None, None] * eps
    )
    x_t_vals = torch.cat([x0_vals[:, : cfg.L_img], noisy_cap], dim=1)

    pred = model(x_t_vals, t)
    if not torch.isfinite(pred).all():
        raise TrainingFault("non-finite denoiser output")
    f_cap = pred[:, cfg.L_img :]

    clean_cap = torch.stack([embed_caption(table, p.caption_ids) for p in pairs])
    anchor_mask = (t == 1)[:, None, None]
    target = torch.where(anchor_mask, clean_cap, x0_cap)
    per_example = ((target - f_cap) ** 2).sum(dim=(1, 2))
    anchor_sel = (t == 1).to(dtype)
    anchor_term = (per_example * anchor_sel).sum() / B
    sum_term = (per_example * (1.0 - anchor_sel)).sum() / B

    if config.reg_weight > 0:
        reg_term = config.reg_weight * (x0_vals**2).sum() / B
    else:
        reg_term = torch.zeros((), dtype=dtype)

    if config.ce_weight > 0:
        logits = token_logits(table, f_cap.reshape(B * cfg.L_cap, cfg.H))
        targets = torch.stack(
            [torch.from_numpy(p.caption_ids.copy()) for p in pairs]
        ).reshape(-1)
        ce = torch.nn.functional.cross_entropy(logits, targets, reduction="sum")
        ce_term = config.ce_weight * ce / B
    else:
        ce_term = torch.zeros((), dtype=dtype)

    total = anchor_term + sum_term + reg_term + ce_term
    if not torch.isfinite(total):
        raise TrainingFault("non-finite training loss")
    return LossBreakdown(
        anchor_term.detach(), sum_term.detach(), reg_term.detach(), ce_term.detach(), total
    )


def training_loss(
    model: Denoiser,
    pair: InputPair,
    schedule: NoiseSchedule,
    config: TrainConfig,
    rng: torch.Generator,
) -> LossBreakdown:
    """Single-pair objective: exactly the per-example sums described above."""
    return training_losses(model, [pair], schedule, config, rng)


def train(
    dataset: Sequence[InputPair],
    model_config: DenoiserConfig,
    config: TrainConfig,
    *,
    checkpoint_path=None,
    curve_path=None,
    vocab=None,
    feature_space=None,
    ma_window: int = 500,
    dtype: torch.dtype = torch.float32,
    log_every: int = 0,
    init_model: "Denoiser | None" = None,
    start_step: int = 0,
    extra_meta: "dict | None" = None,
) -> Denoiser:
    """Adam with linear warmup over uniformly resampled batches.

    Writes a checkpoint (if ``checkpoint_path``) and a per-step training-curve
    CSV (if ``curve_path``) with every loss term and a ``ma_window``-step
    moving average of the total.  Fully deterministic given ``config.seed``.

    Passing ``init_model`` with ``start_step`` resumes a run: steps continue
    from ``start_step + 1`` to ``config.steps`` and the checkpoint's step
    counter ends at ``config.steps``.  Resumed runs draw fresh batch/noise
    streams (derived from the seed and the resume point) and restart the
    optimizer's moment estimates; they are deterministic but not bit-equal
    to the uninterrupted run.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if model_config.T_max < config.T:
        raise ValueError(
            f"model T_max={model_config.T_max} is below schedule T={config.T}"
        )
    if not 0 <= start_step <= config.steps:
        raise ValueError(
            f"start_step={start_step} outside [0, steps={config.steps}]"
        )
    if (start_step > 0) != (init_model is not None):
        raise ValueError("resume needs both init_model and start_step > 0")
    schedule = build_schedule(config.schedule_kind, config.T)
    if init_model is not None:
        if init_model.config != model_config:
            raise ValueError("init_model was built from a different model config")
        model = init_model
    else:
        model = init_params(model_config, torch_generator(config.seed, TAG_INIT), dtype)
    stream_tags = (start_step,) if start_step else ()
    data_gen = torch_generator(config.seed, TAG_DATA, *stream_tags)
    loss_gen = torch_generator(config.seed, TAG_LOSS, *stream_tags)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)

    window = deque(maxlen=ma_window)
    curve_file = open(curve_path, "w", newline="") if curve_path else None
    try:
        writer = None
        if curve_file is not None:
            writer = csv.writer(curve_file)
            writer.writerow(
                ["step", "anchor_term", "sum_term", "reg_term", "ce_term", "total", "total_ma"]
            )
        for step in range(start_step + 1, config.steps + 1):
            idx = torch.randint(len(dataset), (config.batch_size,), generator=data_gen)
            batch = [dataset[int(i)] for i in idx]
            try:
                breakdown = training_losses(model, batch, schedule, config, loss_gen)
            except TrainingFault as fault:
                fault.step = step
                raise
            lr = config.lr * min(1.0, step / config.warmup_steps) if config.warmup_steps else config.lr
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad()
            breakdown.total.backward()
            optimizer.step()

            values = breakdown.as_floats()
            window.append(values["total"])
            if writer is not None:
                writer.writerow(
                    [
                        step,
                        values["anchor_term"],
                        values["sum_term"],
                        values["reg_term"],
                        values["ce_term"],
                        values["total"],
                        sum(window) / len(window),
                    ]
                )
            if log_every and step % log_every == 0:
                print(
                    f"step {step}/{config.steps}  total={values['total']:.4f}  "
                    f"ma={sum(window) / len(window):.4f}",
                    flush=True,
                )
    finally:
        if curve_file is not None:
            curve_file.close()

    if checkpoint_path is not None:
        from .checkpoint import save_checkpoint

        save_checkpoint(
            checkpoint_path,
            model,
            train_config=config,
            vocab=vocab,
            feature_space=feature_space,
            step=config.steps,
            extra=extra_meta,
        )
    return model


def sample_reverse(
    model: Denoiser,
    view: ViewPatchGrid,
    schedule: NoiseSchedule,
    rng: torch.Generator,
    clamp_enabled: bool = True,
):
    """Generate a caption latent conditioned on a clean view embedding.

    Starts the caption segment at standard normal noise, predicts the clean
    latent at every step (conditioning the network on the original timestep
    when the schedule is respaced), optionally clamps the prediction onto
    token rows, and takes a posterior step; no noise is injected at t = 1.
    The image segment is reset to the clean view embedding every step.

    Returns ``(x0_cap_hat, tokens)``: the final clean-caption prediction of
    shape ``(L_cap, H)`` and its rounding to token ids.
    """
    cfg = model.config
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            if view.n_patches != cfg.L_img:
                raise ValueError(
                    f"view has {view.n_patches} patches; the model expects {cfg.L_img}"
                )
            img = embed_view(model.table, view)
            cap = torch.randn((cfg.L_cap, cfg.H), generator=rng, dtype=model.dtype)
            x0_cap_hat = None
            for t in range(schedule.T, 0, -1):
                values = torch.cat([img, cap], dim=0)
                t_model = schedule.original_timestep(t)
                pred = model(values[None], torch.tensor([t_model]))[0]
                if not torch.isfinite(pred).all():
                    raise SamplingFault(f"non-finite prediction at timestep {t}", t)
                x0_cap_hat = pred[cfg.L_img :]
                if clamp_enabled:
                    x0_cap_hat = clamp_to_embedding(model.table, x0_cap_hat)
                coeffs = posterior_coeffs(schedule, t)
                cap = coeffs.c_xt * cap + coeffs.c_x0 * x0_cap_hat
                if t > 1:
                    z = torch.randn(cap.shape, generator=rng, dtype=model.dtype)
                    cap = cap + math.sqrt(coeffs.var) * z
                if not torch.isfinite(cap).all():
                    raise SamplingFault(f"non-finite latent at timestep {t}", t)
            tokens, _ = round_to_tokens(model.table, x0_cap_hat)
            return x0_cap_hat, tokens
    finally:
        model.train(was_training)
