"""Diffusion noise schedules and posterior-mean coefficients.

A schedule fixes the per-step corruption rates beta_t of the forward chain

    q(x_t | x_{t-1}) = N(sqrt(1 - beta_t) * x_{t-1}, beta_t * I),

whose one-shot marginal is

    q(x_t | x_0) = N(sqrt(abar_t) * x_0, (1 - abar_t) * I),

with abar_t = prod_{i<=t} (1 - beta_i) the cumulative signal level.  The
index 0 slot of abar is reserved for the embedding stage: beta_0 = 1 - abar_0
is the variance of the jitter q(x_0 | w) applied on top of the clean
embedding, so schedules whose formula starts below 1 (the sqrt kind) supply
a nonzero beta_0 for free.

By Bayes' rule the reverse-time posterior q(x_{t-1} | x_t, x_0) is Gaussian
with a mean that is linear in x_t and x_0; `posterior_coeffs` exposes those
two coefficients and the posterior variance.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

SCHEDULE_KINDS = ("sqrt", "linear", "cosine")

MAX_BETA = 0.999  # truncation clip applied to every kind
SQRT_SHIFT = 1e-4  # s in abar(t) = 1 - sqrt(t/T + s)
SQRT_FLOOR = 1e-5  # keeps abar(T) positive where the raw formula goes negative
LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 0.02
COSINE_OFFSET = 0.008

ALPHA_BAR_FINAL_MAX = 1e-3  # soft bound: x_T should be (almost) pure noise
IDENTITY_RTOL = 1e-12


class PosteriorCoeffs(NamedTuple):
    """Coefficients of q(x_{t-1} | x_t, x_0) = N(c_xt*x_t + c_x0*x_0, var*I)."""

    c_xt: float
    c_x0: float
    var: float


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable table of betas and cumulative alpha products.

    betas[i] is beta_{i+1} (the vector is indexed t = 1..T mathematically);
    alpha_bars[t] is abar_t for t = 0..T.  Respaced schedules additionally
    carry timestep_map, where timestep_map[k-1] is the original timestep the
    k-th respaced step corresponds to; the denoiser must be conditioned on
    that original index, not on k.
    """

    kind: str
    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    timestep_map: Optional[np.ndarray] = field(default=None)

    def __post_init__(self) -> None:
        betas = np.asarray(self.betas, dtype=np.float64)
        alpha_bars = np.asarray(self.alpha_bars, dtype=np.float64)
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if betas.shape != (self.T,):
            raise ValueError(f"betas must have shape ({self.T},), got {betas.shape}")
        if alpha_bars.shape != (self.T + 1,):
            raise ValueError(
                f"alpha_bars must have shape ({self.T + 1},), got {alpha_bars.shape}"
            )
        tmap = self.timestep_map
        if tmap is not None:
            tmap = np.asarray(tmap, dtype=np.int64)
            if tmap.shape != (self.T,):
                raise ValueError(
                    f"timestep_map must have shape ({self.T},), got {tmap.shape}"
                )
            tmap.flags.writeable = False
        betas.flags.writeable = False
        alpha_bars.flags.writeable = False
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        object.__setattr__(self, "timestep_map", tmap)

    @property
    def beta0(self) -> float:
        """Embedding-stage jitter variance beta_0 = 1 - abar_0."""
        return float(1.0 - self.alpha_bars[0])

    @property
    def is_respaced(self) -> bool:
        return self.timestep_map is not None

    def beta(self, t: int) -> float:
        """beta_t for t in 1..T."""
        if not 1 <= t <= self.T:
            raise ValueError(f"t must be in 1..{self.T}, got {t}")
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """abar_t for t in 0..T."""
        if not 0 <= t <= self.T:
            raise ValueError(f"t must be in 0..{self.T}, got {t}")
        return float(self.alpha_bars[t])

    def original_timestep(self, t: int) -> int:
        """Timestep index to condition the denoiser on at step t.

        Equals t itself for unrespaced schedules and timestep_map[t-1] after
        respacing.
        """
        if not 1 <= t <= self.T:
            raise ValueError(f"t must be in 1..{self.T}, got {t}")
        if self.timestep_map is None:
            return t
        return int(self.timestep_map[t - 1])


def _alpha_bars_from_betas(betas: np.ndarray, alpha_bar0: float) -> np.ndarray:
    # Successive multiplication makes the recursion identity
    # alpha_bars[t] == alpha_bars[t-1] * (1 - betas[t]) float-exact.
    out = np.empty(len(betas) + 1, dtype=np.float64)
    out[0] = alpha_bar0
    for i, b in enumerate(betas):
        out[i + 1] = out[i] * (1.0 - b)
    return out


def build_schedule(kind: str, T: int) -> NoiseSchedule:
    """Construct a schedule of the given kind with T diffusion steps.

    sqrt:    abar(t) = max(1 - sqrt(t/T + 1e-4), 1e-5)
    linear:  beta_t linearly interpolated from 1e-4 to 0.02
    cosine:  abar(t) = f(t)/f(0), f(t) = cos(((t/T + 0.008)/1.008) * pi/2)^2

    Every kind clips beta_t at 0.999 (the truncation); alpha_bars are then
    rebuilt from the clipped betas so the recursion invariant holds exactly.
    Soft invariant violations (e.g. a degenerate single-step linear schedule
    whose abar_T stays near 1) are reported as warnings, not errors.
    """
    if T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    t_grid = np.arange(T + 1, dtype=np.float64)
    if kind == "sqrt":
        raw = np.maximum(1.0 - np.sqrt(t_grid / T + SQRT_SHIFT), SQRT_FLOOR)
        betas = 1.0 - raw[1:] / raw[:-1]
        alpha_bar0 = float(raw[0])
    elif kind == "linear":
        betas = np.linspace(LINEAR_BETA_START, LINEAR_BETA_END, T)
        alpha_bar0 = 1.0
    elif kind == "cosine":
        angle = (t_grid / T + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * (math.pi / 2)
        f = np.cos(angle) ** 2
        raw = f / f[0]
        betas = 1.0 - raw[1:] / raw[:-1]
        alpha_bar0 = 1.0
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    betas = np.minimum(betas, MAX_BETA)
    schedule = NoiseSchedule(
        kind=kind,
        T=T,
        betas=betas,
        alpha_bars=_alpha_bars_from_betas(betas, alpha_bar0),
    )
    for message in validate_schedule(schedule):
        warnings.warn(message, stacklevel=2)
    return schedule


def schedule_from_betas(
    betas, kind: str = "linear", alpha_bar0: float = 1.0
) -> NoiseSchedule:
    """Build a schedule directly from explicit betas (hand schedules, tests)."""
    betas = np.asarray(betas, dtype=np.float64)
    return NoiseSchedule(
        kind=kind,
        T=len(betas),
        betas=betas,
        alpha_bars=_alpha_bars_from_betas(betas, alpha_bar0),
    )


def validate_schedule(schedule: NoiseSchedule) -> list[str]:
    """Check the soft invariants, returning one message per violation.

    Violations are diagnostics rather than errors: degenerate but
    well-formed schedules (linear with T = 1, say) are still usable.
    """
    messages = []
    betas = schedule.betas
    abars = schedule.alpha_bars
    if not np.all((betas > 0.0) & (betas < 1.0)):
        bad = int(np.argmin((betas > 0.0) & (betas < 1.0))) + 1
        messages.append(
            f"betas must lie in (0, 1); first violation at t={bad} (beta={betas[bad - 1]!r})"
        )
    if not np.all(np.diff(abars) < 0.0):
        bad = int(np.argmax(np.diff(abars) >= 0.0)) + 1
        messages.append(f"alpha_bars must strictly decrease; first violation at t={bad}")
    if abars[-1] > ALPHA_BAR_FINAL_MAX:
        messages.append(
            f"alpha_bars[T]={abars[-1]:.6g} exceeds {ALPHA_BAR_FINAL_MAX:g}; "
            f"x_T is not close to pure noise"
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        recomputed = abars[:-1] * (1.0 - betas)
        rel = np.abs(recomputed - abars[1:]) / np.maximum(np.abs(abars[1:]), 1e-300)
    if np.any(rel > IDENTITY_RTOL):
        bad = int(np.argmax(rel > IDENTITY_RTOL)) + 1
        messages.append(
            f"alpha_bars[t] != alpha_bars[t-1]*(1-betas[t]) within {IDENTITY_RTOL:g} "
            f"relative; first violation at t={bad}"
        )
    return messages


def respace(schedule: NoiseSchedule, K: int) -> NoiseSchedule:
    """Restrict a schedule to K evenly spaced timesteps tau_1 < ... < tau_K = T.

    The respaced step k jumps the chain from tau_{k-1} to tau_k, so its
    effective beta is 1 - abar_{tau_k}/abar_{tau_{k-1}}.  alpha_bars are then
    rebuilt from those betas (keeping the recursion identity exact); the
    rebuilt values reproduce the original abar at kept timesteps to well
    within 1e-10 relative.  timestep_map records tau so samplers can
    condition the denoiser on original timestep indices.
    """
    if schedule.timestep_map is not None:
        raise ValueError("schedule is already respaced; double respacing is not allowed")
    if not 1 <= K <= schedule.T:
        raise ValueError(f"K must be in 1..{schedule.T}, got {K}")
    T = schedule.T
    taus = sorted({round(k * T / K) for k in range(1, K + 1)})
    abars = schedule.alpha_bars
    if taus == list(range(1, T + 1)):
        # Identity respacing: copying the betas reproduces the original
        # alpha_bars bit-for-bit, so trajectories computed from the respaced
        # schedule are identical to the original's.
        new_betas = schedule.betas.copy()
    else:
        prev = np.asarray([0] + taus[:-1])
        kept = np.asarray(taus)
        new_betas = 1.0 - abars[kept] / abars[prev]
    return NoiseSchedule(
        kind=schedule.kind,
        T=len(taus),
        betas=new_betas,
        alpha_bars=_alpha_bars_from_betas(new_betas, float(abars[0])),
        timestep_map=np.asarray(taus, dtype=np.int64),
    )


def posterior_coeffs(schedule: NoiseSchedule, t: int) -> PosteriorCoeffs:
    """Coefficients of the Gaussian posterior q(x_{t-1} | x_t, x_0).

        mu_t(x_t, x_0) = c_xt * x_t + c_x0 * x_0
        c_xt = sqrt(alpha_t) * (1 - abar_{t-1}) / (1 - abar_t)
        c_x0 = sqrt(abar_{t-1}) * beta_t / (1 - abar_t)
        var  = beta_t * (1 - abar_{t-1}) / (1 - abar_t)

    The coefficients satisfy c_xt * sqrt(abar_t) + c_x0 = sqrt(abar_{t-1}),
    so the posterior mean of a noiseless trajectory stays on it.
    """
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t must be in 1..{schedule.T}, got {t}")
    beta_t = float(schedule.betas[t - 1])
    alpha_t = 1.0 - beta_t
    abar_t = float(schedule.alpha_bars[t])
    abar_prev = float(schedule.alpha_bars[t - 1])
    denom = 1.0 - abar_t
    c_xt = math.sqrt(alpha_t) * (1.0 - abar_prev) / denom
    c_x0 = math.sqrt(abar_prev) * beta_t / denom
    var = beta_t * (1.0 - abar_prev) / denom
    return PosteriorCoeffs(c_xt=c_xt, c_x0=c_x0, var=var)
