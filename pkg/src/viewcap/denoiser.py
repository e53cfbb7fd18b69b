"""Bidirectional transformer that predicts the clean latent from a noisy one.

The network maps a joint latent sequence ``x_t`` of shape ``(L_img + L_cap, H)``
plus an integer timestep ``t`` to a full-sequence prediction ``x_hat_0`` of the
same shape.  Attention is unmasked in both directions: caption rows may attend
to image rows (the conditioning signal) and vice versa.

Architecture
------------
- the co-trained table's position and modality vectors are added to every
  input row (image rows use image-modality plus per-patch positions, caption
  rows caption-modality plus per-token positions), so the network retains row
  identity at any noise level; zeroing those vectors makes the whole network
  permutation-equivariant over rows
- input projection ``H -> d_model``
- a sinusoidal embedding of ``t`` passed through a two-layer MLP and added to
  every row before the first block
- ``n_layers`` pre-layer-norm blocks: multi-head self-attention and a GELU
  feed-forward of width ``ff_mult * d_model``, each wrapped in a residual
- final layer norm, then an output projection ``d_model -> H``

Initialization (documented gains)
---------------------------------
- every linear weight: scaled uniform ``U(-b, b)`` with ``b = 1 / sqrt(fan_in)``
- every bias: zero; layer-norm scale/shift: one/zero
- the co-trained :class:`~viewcap.embedding.EmbeddingTable`: normal with
  std 1.0 for token rows and the patch projector, std 0.1 for modality and
  position offsets

Parameter count (closed form, ``D = d_model``, ``m = ff_mult``)
---------------------------------------------------------------
trunk = ``(D*H + D) + 2*(D*D + D) + n_layers * ((4 + 2m)*D*D + (9 + m)*D)
+ 2*D + (H*D + H)`` and the embedding table adds
``(vocab_size + patch_feat_dim + 2 + max(L_img, L_cap)) * H``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import torch
from torch import nn

from .embedding import MODALITY_CAP, MODALITY_IMG, EmbeddingTable, LatentSequence

__all__ = [
    "DenoiserConfig",
    "Denoiser",
    "init_params",
    "param_count",
    "predict_x0",
    "timestep_embedding",
]


@dataclass(frozen=True)
class DenoiserConfig:
    """Shapes and sizes of the denoiser and its co-trained embedding table."""

    H: int
    d_model: int
    n_layers: int
    n_heads: int
    ff_mult: int
    L_img: int
    L_cap: int
    T_max: int
    vocab_size: int
    patch_feat_dim: int
    dropout: float = 0.0

    def __post_init__(self):
        for field in (
            "H",
            "d_model",
            "n_layers",
            "n_heads",
            "ff_mult",
            "L_img",
            "L_cap",
            "T_max",
            "vocab_size",
            "patch_feat_dim",
        ):
            value = getattr(self, field)
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"{field} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if self.d_model % 2 != 0 or self.d_model < 4:
            raise ValueError(
                "d_model must be an even integer >= 4 for the sinusoidal timestep "
                f"embedding, got {self.d_model}"
            )
        if self.vocab_size < 4:
            raise ValueError("vocab_size must cover the four reserved tokens")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def L(self) -> int:
        """Joint sequence length."""
        return self.L_img + self.L_cap

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DenoiserConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


def timestep_embedding(t: torch.Tensor, dim: int, dtype: torch.dtype) -> torch.Tensor:
    """Sinusoidal features of integer timesteps, shape ``(len(t), dim)``.

    Frequencies fall geometrically from 1 to 1/10000 over ``dim // 2`` bands;
    the output concatenates ``sin`` then ``cos`` of ``t * freq``.
    """
    if dim % 2 != 0 or dim < 4:
        raise ValueError(f"timestep embedding width must be even and >= 4, got {dim}")
    half = dim // 2
    exponents = torch.arange(half, dtype=dtype) / (half - 1)
    freqs = torch.exp(-math.log(10000.0) * exponents)
    args = t.to(dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class _SelfAttention(nn.Module):
    """Unmasked multi-head self-attention."""

    def __init__(self, d_model: int, n_heads: int, dtype: torch.dtype):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model, dtype=dtype)
        self.proj = nn.Linear(d_model, d_model, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, L, D = x.shape
        qkv = self.qkv(x).reshape(B, L, 3, self.n_heads, self.d_head)
        q, k, v = qkv.unbind(dim=2)  # each (B, L, heads, d_head)
        q = q.transpose(1, 2)  # (B, heads, L, d_head)
        k = k.transpose(1, 2)
        v = v.transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(B, L, D)
        return self.proj(out)


class _Block(nn.Module):
    """Pre-layer-norm transformer block."""

    def __init__(self, d_model: int, n_heads: int, ff_mult: int, dropout: float, dtype):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model, dtype=dtype)
        self.attn = _SelfAttention(d_model, n_heads, dtype)
        self.ln2 = nn.LayerNorm(d_model, dtype=dtype)
        self.ff = nn.Sequential(
            nn.Linear(d_model, ff_mult * d_model, dtype=dtype),
            nn.GELU(),
            nn.Linear(ff_mult * d_model, d_model, dtype=dtype),
        )
        self.dropout = dropout

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.attn(self.ln1(x))
        h = nn.functional.dropout(h, self.dropout, training=self.training)
        x = x + h
        h = self.ff(self.ln2(x))
        h = nn.functional.dropout(h, self.dropout, training=self.training)
        return x + h


class Denoiser(nn.Module):
    """The full parameter set: transformer trunk plus co-trained embedding table."""

    def __init__(self, config: DenoiserConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        self.dtype = dtype
        self.table = EmbeddingTable(
            vocab_size=config.vocab_size,
            patch_feat_dim=config.patch_feat_dim,
            H=config.H,
            max_len=max(config.L_img, config.L_cap),
            dtype=dtype,
        )
        self.input_proj = nn.Linear(config.H, config.d_model, dtype=dtype)
        self.time_mlp = nn.Sequential(
            nn.Linear(config.d_model, config.d_model, dtype=dtype),
            nn.SiLU(),
            nn.Linear(config.d_model, config.d_model, dtype=dtype),
        )
        self.blocks = nn.ModuleList(
            _Block(config.d_model, config.n_heads, config.ff_mult, config.dropout, dtype)
            for _ in range(config.n_layers)
        )
        self.final_norm = nn.LayerNorm(config.d_model, dtype=dtype)
        self.output_proj = nn.Linear(config.d_model, config.H, dtype=dtype)

    def trunk_parameters(self):
        """Named parameters excluding the embedding table, sorted by name."""
        return sorted(
            (
                (name, p)
                for name, p in self.named_parameters()
                if not name.startswith("table.")
            ),
            key=lambda item: item[0],
        )

    def reset_parameters(self, rng: torch.Generator) -> None:
        """Deterministically reinitialize every tensor from ``rng``.

        The embedding table is drawn first (its own documented scales), then
        the trunk tensors in sorted-name order: 2-D weights scaled-uniform
        with bound ``1/sqrt(fan_in)``, biases zero, layer-norm scales one.
        """
        self.table.reset_parameters(rng)
        with torch.no_grad():
            for name, p in self.trunk_parameters():
                if p.dim() == 2:
                    bound = 1.0 / math.sqrt(p.shape[1])
                    u = torch.rand(p.shape, generator=rng, dtype=p.dtype)
                    p.copy_((2.0 * u - 1.0) * bound)
                elif name.endswith(".bias") or name.endswith("_bias"):
                    p.zero_()
                else:  # layer-norm scale
                    p.fill_(1.0)

    def row_offsets(self) -> torch.Tensor:
        """(L, H) clean position-plus-modality content added to every input row."""
        pos = self.table.position_vectors
        mod = self.table.modality_vectors
        img = pos[: self.config.L_img] + mod[MODALITY_IMG]
        cap = pos[: self.config.L_cap] + mod[MODALITY_CAP]
        return torch.cat([img, cap], dim=0)

    def forward(self, values: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Map latents ``(B, L, H)`` and timesteps ``(B,)`` to predictions ``(B, L, H)``."""
        if values.dim() != 3 or values.shape[1] != self.config.L:
            raise ValueError(
                f"expected latents of shape (B, {self.config.L}, {self.config.H}), "
                f"got {tuple(values.shape)}"
            )
        if values.shape[2] != self.config.H:
            raise ValueError(
                f"latent width {values.shape[2]} does not match H={self.config.H}"
            )
        temb = self.time_mlp(timestep_embedding(t, self.config.d_model, self.dtype))
        x = self.input_proj(values + self.row_offsets()[None]) + temb[:, None, :]
        for block in self.blocks:
            x = block(x)
        return self.output_proj(self.final_norm(x))


def param_count(config: DenoiserConfig) -> int:
    """Closed-form number of learnable scalars (trunk plus embedding table)."""
    D, H, m = config.d_model, config.H, config.ff_mult
    trunk = (
        (D * H + D)  # input projection
        + 2 * (D * D + D)  # timestep MLP
        + config.n_layers * ((4 + 2 * m) * D * D + (9 + m) * D)
        + 2 * D  # final layer norm
        + (H * D + H)  # output projection
    )
    table = (
        config.vocab_size + config.patch_feat_dim + 2 + max(config.L_img, config.L_cap)
    ) * H
    return trunk + table


def init_params(
    config: DenoiserConfig,
    rng: torch.Generator,
    dtype: torch.dtype = torch.float32,
) -> Denoiser:
    """Build a denoiser and deterministically initialize all its tensors."""
    model = Denoiser(config, dtype=dtype)
    model.reset_parameters(rng)
    return model


def predict_x0(model: Denoiser, x_t: LatentSequence, t: int) -> LatentSequence:
    """Predict the clean joint latent from a noisy one at timestep ``t``."""
    if not 1 <= t <= model.config.T_max:
        raise ValueError(f"timestep {t} outside [1, {model.config.T_max}]")
    if x_t.img_len != model.config.L_img or x_t.cap_len != model.config.L_cap:
        raise ValueError(
            f"latent segments ({x_t.img_len}, {x_t.cap_len}) do not match the "
            f"configured ({model.config.L_img}, {model.config.L_cap})"
        )
    if not torch.isfinite(x_t.values).all():
        raise ValueError("non-finite values in the input latent")
    t_vec = torch.tensor([t], dtype=torch.int64)
    out = model(x_t.values[None], t_vec)[0]
    return x_t.replace_values(out)
