"""The shared latent space: EMB, its sampling head q(x_0 | w), and rounding.

Captions and views meet in one H-dimensional space.  A caption row k is

    token_rows[w_k] + modality_vectors[CAP] + position_vectors[k],

an image row j applies the linear patch projector to patch j's one-hot
features and adds the image modality and position vectors.  The embedding
stage of the diffusion chain draws x_0 ~ N(EMB(w), beta_0 * I).

Rounding inverts the map: token logits are negative squared distances to
the token rows, maximized position-wise (ties to the smallest id).  The
same distances drive clamping, which snaps predicted rows onto the token
manifold during sampling, and the rounding cross-entropy of the training
objective through their softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .patchgrid import FeatureSpace, ViewPatchGrid
from .tensorio import load_tensors, save_tensors

MODALITY_IMG, MODALITY_CAP = 0, 1

EMBEDDING_TENSORS = ("token_rows", "patch_projector", "modality_vectors", "position_vectors")

# Init scales: token rows at unit scale keep vocabulary entries separated
# for rounding; the additive modality/position offsets start an order of
# magnitude smaller so caption rows stay near their token rows.
TOKEN_ROW_STD = 1.0
OFFSET_STD = 0.1


@dataclass(frozen=True)
class InputPair:
    """One training example: a view grid and its BOS/EOS-framed caption ids."""

    view: ViewPatchGrid
    caption_ids: np.ndarray

    def __post_init__(self) -> None:
        ids = np.asarray(self.caption_ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ValueError("caption_ids must be one-dimensional")
        ids.flags.writeable = False
        object.__setattr__(self, "caption_ids", ids)

    @property
    def cap_len(self) -> int:
        return len(self.caption_ids)


@dataclass
class LatentSequence:
    """Joint latent: image rows then caption rows, (L_img + L_cap) x H."""

    values: torch.Tensor
    img_len: int
    cap_len: int

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or self.values.shape[0] != self.img_len + self.cap_len:
            raise ValueError(
                f"values must have shape ({self.img_len + self.cap_len}, H), "
                f"got {tuple(self.values.shape)}"
            )

    @property
    def img(self) -> torch.Tensor:
        return self.values[: self.img_len]

    @property
    def cap(self) -> torch.Tensor:
        return self.values[self.img_len :]

    def replace_values(self, values: torch.Tensor) -> "LatentSequence":
        return LatentSequence(values=values, img_len=self.img_len, cap_len=self.cap_len)


class EmbeddingTable(nn.Module):
    """Trainable token rows, patch projector, and modality/position offsets."""

    def __init__(
        self,
        vocab_size: int,
        patch_feat_dim: int,
        H: int,
        max_len: int,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        if min(vocab_size, patch_feat_dim, H, max_len) < 1:
            raise ValueError("vocab_size, patch_feat_dim, H, max_len must be positive")
        self.vocab_size = vocab_size
        self.patch_feat_dim = patch_feat_dim
        self.H = H
        self.max_len = max_len
        kw = {"dtype": dtype}
        self.token_rows = nn.Parameter(torch.zeros(vocab_size, H, **kw))
        self.patch_projector = nn.Parameter(torch.zeros(patch_feat_dim, H, **kw))
        self.modality_vectors = nn.Parameter(torch.zeros(2, H, **kw))
        self.position_vectors = nn.Parameter(torch.zeros(max_len, H, **kw))

    def reset_parameters(self, gen: torch.Generator) -> None:
        for p, std in (
            (self.token_rows, TOKEN_ROW_STD),
            (self.patch_projector, TOKEN_ROW_STD),
            (self.modality_vectors, OFFSET_STD),
            (self.position_vectors, OFFSET_STD),
        ):
            with torch.no_grad():
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)


def embed_view(table: EmbeddingTable, view: ViewPatchGrid) -> torch.Tensor:
    """(L_img, H) clean image-segment rows for one view."""
    feats = view.features()
    if feats.shape[1] != table.patch_feat_dim:
        raise ValueError(
            f"view features have width {feats.shape[1]}, table expects {table.patch_feat_dim}"
        )
    n = feats.shape[0]
    if n > table.max_len:
        raise ValueError(f"view has {n} patches, table supports {table.max_len} positions")
    dtype = table.token_rows.dtype
    rows = torch.from_numpy(feats).to(dtype) @ table.patch_projector
    return rows + table.modality_vectors[MODALITY_IMG] + table.position_vectors[:n]


def embed_caption(table: EmbeddingTable, caption_ids: np.ndarray) -> torch.Tensor:
    """(L_cap, H) clean caption-segment rows."""
    ids = np.asarray(caption_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.vocab_size):
        raise ValueError(f"caption ids outside 0..{table.vocab_size - 1}")
    if len(ids) > table.max_len:
        raise ValueError(f"caption of {len(ids)} tokens exceeds {table.max_len} positions")
    rows = table.token_rows[torch.from_numpy(ids.copy())]
    return rows + table.modality_vectors[MODALITY_CAP] + table.position_vectors[: len(ids)]


def embed_pair(table: EmbeddingTable, pair: InputPair) -> LatentSequence:
    """Deterministic EMB(w^{img+cap}) as one joint latent sequence."""
    img = embed_view(table, pair.view)
    cap = embed_caption(table, pair.caption_ids)
    return LatentSequence(
        values=torch.cat([img, cap], dim=0), img_len=img.shape[0], cap_len=cap.shape[0]
    )


def sample_x0(
    table: EmbeddingTable, pair: InputPair, beta0: float, rng: torch.Generator
) -> LatentSequence:
    """Draw x_0 ~ q(x_0 | w) = N(EMB(w), beta0 * I), jittering both segments.

    beta0 = 0 is accepted as the exact zero-noise limit (schedules whose
    alpha_bar_0 is 1 supply no embedding-stage noise).
    """
    if not 0.0 <= beta0 < 1.0:
        raise ValueError(f"beta0 must lie in [0, 1), got {beta0}")
    base = embed_pair(table, pair)
    if beta0 == 0.0:
        return base
    noise = torch.randn(base.values.shape, generator=rng, dtype=base.values.dtype)
    return base.replace_values(base.values + math.sqrt(beta0) * noise)


def token_logits(table: EmbeddingTable, cap_latent: torch.Tensor) -> torch.Tensor:
    """(L, vocab_size) logits: logits[k][v] = -||cap_latent[k] - token_row(v)||^2."""
    if not torch.isfinite(cap_latent).all():
        raise ValueError("cap_latent contains non-finite values")
    diff = cap_latent.unsqueeze(1) - table.token_rows.unsqueeze(0)
    return -(diff * diff).sum(dim=-1)


def round_to_tokens(
    table: EmbeddingTable, cap_latent: torch.Tensor
) -> tuple[np.ndarray, torch.Tensor]:
    """Position-wise maximum-likelihood tokens plus the full logit matrix.

    Ties break to the smallest token id; p(w | x_0) is the per-position
    softmax of the returned logits.
    """
    logits = token_logits(table, cap_latent)
    tokens = np.argmax(logits.detach().cpu().numpy(), axis=1)
    return tokens, logits


def clamp_to_embedding(table: EmbeddingTable, cap_latent: torch.Tensor) -> torch.Tensor:
    """Replace each row with its nearest token row (idempotent)."""
    tokens, _ = round_to_tokens(table, cap_latent)
    return table.token_rows[torch.from_numpy(tokens)]


def save_embedding_table(table: EmbeddingTable, manifest_path) -> None:
    """Export to the importable manifest + f32 blob format."""
    tensors = {name: getattr(table, name).detach().cpu().numpy() for name in EMBEDDING_TENSORS}
    save_tensors(
        manifest_path,
        tensors,
        extra={"kind": "embedding-table", "h": table.H, "vocab_size": table.vocab_size},
    )


def load_embedding_table(
    manifest_path, H: int | None = None, dtype: torch.dtype = torch.float32
) -> EmbeddingTable:
    """Import a precomputed table, optionally through its import projection.

    If the file carries an `import_projection` tensor of shape (H_in, H_out),
    every embedding tensor is right-multiplied by it, reconciling a foreign
    embedder width H_in with the configured H_out.  Without a projection the
    stored width must already match the requested H.
    """
    tensors, _ = load_tensors(manifest_path)
    missing = [name for name in EMBEDDING_TENSORS if name not in tensors]
    if missing:
        raise ValueError(f"embedding manifest missing tensors: {missing}")
    loaded = {name: np.asarray(tensors[name], dtype=np.float64) for name in EMBEDDING_TENSORS}
    h_in = loaded["token_rows"].shape[1]
    if any(arr.shape[1] != h_in for arr in loaded.values()):
        raise ValueError("embedding tensors disagree on their latent width")
    if "import_projection" in tensors:
        proj = np.asarray(tensors["import_projection"], dtype=np.float64)
        if proj.shape[0] != h_in:
            raise ValueError(
                f"import_projection expects width {proj.shape[0]}, tensors have {h_in}"
            )
        loaded = {name: arr @ proj for name, arr in loaded.items()}
        h_in = proj.shape[1]
    if H is not None and h_in != H:
        raise ValueError(
            f"imported width {h_in} does not match configured H={H} "
            f"(supply an import_projection tensor)"
        )
    table = EmbeddingTable(
        vocab_size=loaded["token_rows"].shape[0],
        patch_feat_dim=loaded["patch_projector"].shape[0],
        H=h_in,
        max_len=loaded["position_vectors"].shape[0],
        dtype=dtype,
    )
    with torch.no_grad():
        for name in EMBEDDING_TENSORS:
            getattr(table, name).copy_(torch.from_numpy(loaded[name]).to(dtype))
    return table
