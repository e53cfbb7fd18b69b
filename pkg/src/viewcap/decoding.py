"""Candidate generation, minimum-Bayes-risk selection, and cross-view pooling.

The captioning pipeline runs per view: sample ``S`` candidate caption latents
independently, pick the one with the lowest expected pairwise loss against
the others (MBR, default loss = negative smoothed BLEU@4), then fuse the
selected latents across views element-wise (max, mean, or a seeded
per-element stochastic pick) and round the pooled latent to token ids.

Every stochastic step derives its own stream from the master seed, so the
whole pipeline is reproducible and per-view / per-candidate work stays
independent.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .denoiser import Denoiser
from .diffusion import sample_reverse
from .embedding import round_to_tokens
from .metrics import bleu
from .patchgrid import ViewPatchGrid
from .rng import TAG_POOL, TAG_SAMPLE, torch_generator
from .schedule import NoiseSchedule

__all__ = [
    "Candidate",
    "CandidateSet",
    "CaptionResult",
    "ViewDecode",
    "POOLING_METHODS",
    "aggregate_views",
    "caption_shape",
    "generate_candidates",
    "mbr_risks",
    "mbr_select",
    "negative_bleu4",
]

POOLING_METHODS = ("max", "mean", "stochastic")


def negative_bleu4(candidate: Sequence[int], other: Sequence[int]) -> float:
    """Pairwise MBR loss: negative smoothed BLEU@4 of one caption vs another."""
    return -bleu(candidate, [other], max_n=4, smoothing=True)


@dataclass(frozen=True)
class Candidate:
    """One sampled caption: token ids, the latent they were rounded from,
    and the index of the view it was sampled for.

    ``tokens`` is always the rounding of ``x0_cap`` — candidates are built
    from the sampler's own paired output.
    """

    tokens: np.ndarray
    x0_cap: torch.Tensor
    view_index: int

    def __post_init__(self) -> None:
        if self.x0_cap.ndim != 2:
            raise ValueError(f"x0_cap must be (L_cap, H), got {tuple(self.x0_cap.shape)}")
        if self.tokens.shape != (self.x0_cap.shape[0],):
            raise ValueError(
                f"tokens shape {self.tokens.shape} does not match "
                f"{self.x0_cap.shape[0]} caption positions"
            )
        if self.view_index < 0:
            raise ValueError(f"view_index must be >= 0, got {self.view_index}")

    def token_list(self) -> list[int]:
        return [int(t) for t in self.tokens]


@dataclass(frozen=True)
class CandidateSet:
    """The S candidates sampled for one view."""

    view_index: int
    candidates: tuple[Candidate, ...]

    def __post_init__(self) -> None:
        if len(self.candidates) < 1:
            raise ValueError("a candidate set needs at least one candidate")
        for cand in self.candidates:
            if cand.view_index != self.view_index:
                raise ValueError(
                    f"candidate for view {cand.view_index} in the set for "
                    f"view {self.view_index}"
                )

    def __len__(self) -> int:
        return len(self.candidates)


def generate_candidates(
    model: Denoiser,
    view: ViewPatchGrid,
    S: int,
    schedule: NoiseSchedule,
    seed: int,
    view_index: int = 0,
    clamp_enabled: bool = True,
) -> CandidateSet:
    """Run ``S`` independent reverse-diffusion samples for one view.

    Candidate ``s`` uses the stream derived from
    ``(seed, TAG_SAMPLE, view_index, s)``, so the set is deterministic given
    the master seed and each candidate is reproducible in isolation.
    """
    if S < 1:
        raise ValueError(f"S must be >= 1, got {S}")
    candidates = []
    for s in range(S):
        rng = torch_generator(seed, TAG_SAMPLE, view_index, s)
        x0_cap, tokens = sample_reverse(
            model, view, schedule, rng, clamp_enabled=clamp_enabled
        )
        candidates.append(Candidate(tokens=tokens, x0_cap=x0_cap, view_index=view_index))
    return CandidateSet(view_index=view_index, candidates=tuple(candidates))


def mbr_risks(
    candidate_set: CandidateSet,
    loss: Callable[[Sequence[int], Sequence[int]], float] = negative_bleu4,
) -> list[float]:
    """Expected pairwise loss of each candidate against the whole set.

    The self-comparison is included: for any loss of the form
    -similarity with similarity(w, w) constant, it shifts every risk by the
    same constant and cannot change the argmin.
    """
    token_lists = [c.token_list() for c in candidate_set.candidates]
    n = len(token_lists)
    risks = []
    for i in range(n):
        total = 0.0
        for j in range(n):
            total += loss(token_lists[i], token_lists[j])
        risks.append(total / n)
    return risks


def mbr_select(
    candidate_set: CandidateSet,
    loss: Callable[[Sequence[int], Sequence[int]], float] = negative_bleu4,
) -> int:
    """Index of the candidate with the lowest expected risk (ties -> lowest index)."""
    risks = mbr_risks(candidate_set, loss)
    best = 0
    for i in range(1, len(risks)):
        if risks[i] < risks[best]:
            best = i
    return best


def aggregate_views(
    latents: Sequence[torch.Tensor],
    method: str,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Fuse per-view caption latents element-wise into one latent.

    ``max`` and ``mean`` are order-invariant reductions; ``stochastic``
    picks, independently per element, the value of one uniformly chosen
    input (deterministic given ``rng``).  The mean accumulates in float64
    over a per-element sorted order, so for float32 latents it is
    bit-exactly invariant to input order and maps identical inputs to
    themselves.
    """
    if method not in POOLING_METHODS:
        raise ValueError(f"method must be one of {POOLING_METHODS}, got {method!r}")
    if len(latents) == 0:
        raise ValueError("need at least one latent to aggregate")
    shape = latents[0].shape
    for i, latent in enumerate(latents):
        if latent.shape != shape:
            raise ValueError(
                f"latent {i} has shape {tuple(latent.shape)}, expected {tuple(shape)}"
            )
    stacked = torch.stack(tuple(latents), dim=0)
    if method == "max":
        return stacked.max(dim=0).values
    if method == "mean":
        canonical = torch.sort(stacked.double(), dim=0).values
        return (canonical.sum(dim=0) / stacked.shape[0]).to(stacked.dtype)
    if rng is None:
        raise ValueError("stochastic pooling needs an rng")
    picks = torch.randint(0, stacked.shape[0], size=shape, generator=rng)
    return torch.gather(stacked, 0, picks[None]).squeeze(0)


@dataclass(frozen=True)
class ViewDecode:
    """Decoding record for one view: all candidates, their risks, the pick."""

    candidate_set: CandidateSet
    risks: tuple[float, ...]
    selected_index: int
    seconds: float

    @property
    def selected(self) -> Candidate:
        return self.candidate_set.candidates[self.selected_index]


@dataclass(frozen=True)
class CaptionResult:
    """Output of the full pipeline: the fused caption plus per-view records."""

    final_tokens: np.ndarray
    pooled_x0: torch.Tensor = field(repr=False)
    per_view: tuple[ViewDecode, ...]


def caption_shape(
    model: Denoiser,
    views: Sequence[ViewPatchGrid],
    S: int,
    schedule: NoiseSchedule,
    method: str = "max",
    seed: int = 0,
    clamp_enabled: bool = True,
    loss: Callable[[Sequence[int], Sequence[int]], float] = negative_bleu4,
) -> CaptionResult:
    """Caption a shape from its views.

    Per view: generate ``S`` candidates, select one by MBR.  The selected
    latents are pooled element-wise by ``method`` and the pooled latent is
    rounded to the final token ids.  With V = 1 and S = 1 the pipeline
    collapses to a single sample: the final caption equals that candidate's.
    """
    if len(views) == 0:
        raise ValueError("need at least one view")
    per_view = []
    for vi, view in enumerate(views):
        start = time.perf_counter()
        cset = generate_candidates(
            model, view, S, schedule, seed, view_index=vi, clamp_enabled=clamp_enabled
        )
        risks = mbr_risks(cset, loss)
        best = 0
        for i in range(1, len(risks)):
            if risks[i] < risks[best]:
                best = i
        per_view.append(
            ViewDecode(
                candidate_set=cset,
                risks=tuple(risks),
                selected_index=best,
                seconds=time.perf_counter() - start,
            )
        )
    pool_rng = torch_generator(seed, TAG_POOL) if method == "stochastic" else None
    pooled = aggregate_views([vd.selected.x0_cap for vd in per_view], method, pool_rng)
    final_tokens, _ = round_to_tokens(model.table, pooled)
    return CaptionResult(
        final_tokens=final_tokens, pooled_x0=pooled, per_view=tuple(per_view)
    )
