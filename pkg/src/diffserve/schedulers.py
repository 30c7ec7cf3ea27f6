"""Noise schedules, denoising step rules, and the scheduler registry.

Two step rules ship built in: "ddim" (deterministic at eta=0) and "ddpm"
(ancestral sampling). Users can register additional rules under new names;
pipelines resolve the rule through :func:`get_scheduler` at request time.

Step functions accept optional ``out``/``tmp`` workspace tensors. They run
the exact same arithmetic either way; the workspace only redirects where
intermediate results land, which is what keeps buffer-reuse runs
bit-identical to allocating runs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Rng, Tensor

MODES = ("linear", "scaled_linear")


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-process constants for a beta schedule.

    alpha_bars are kept in float64: a thousand-term running product in
    float32 drifts past the tolerance the consistency checks demand.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    mode: str

    def alpha_bar(self, t: int) -> float:
        """alpha_bar at timestep t, with t = -1 denoting the clean state."""
        if t < 0:
            return 1.0
        return float(self.alpha_bars[t])


def make_schedule(
    mode: str = "linear",
    T: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> NoiseSchedule:
    if mode not in MODES:
        raise ValueError(f"unknown schedule mode {mode!r}; expected one of {MODES}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"invalid beta range [{beta_start}, {beta_end}]")
    if T < 1:
        raise ValueError(f"T must be positive, got {T}")
    if mode == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    else:
        betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, T, dtype=np.float64) ** 2
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars, mode=mode)


@dataclass
class SchedulerState:
    """Per-generation sampling state. Single-owner, not shared across requests."""

    schedule: NoiseSchedule
    inference_timesteps: list[int]
    eta: float = 0.0
    step_index: int = 0

    def __post_init__(self):
        ts = self.inference_timesteps
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise ValueError("inference timesteps must be strictly decreasing")
        if ts and not (0 <= ts[-1] and ts[0] < self.schedule.T):
            raise ValueError(f"timesteps out of range [0, {self.schedule.T})")
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")


def select_timesteps(T: int, steps: int) -> list[int]:
    """Evenly strided descending timesteps, aligned so the first is T-1."""
    if not (1 <= steps <= T):
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    stride = T // steps
    return [T - 1 - i * stride for i in range(steps)]


def add_noise(x0: Tensor, noise: Tensor, t: int, schedule: NoiseSchedule) -> Tensor:
    """Forward process: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    if not (0 <= t < schedule.T):
        raise ValueError(f"t={t} outside [0, {schedule.T})")
    a = schedule.alpha_bar(t)
    out = Tensor.empty(x0.shape)
    o = out.np()
    np.multiply(x0.np(), math.sqrt(a), out=o)
    o += noise.np() * np.float32(math.sqrt(1.0 - a))
    return out


def _workspace(x: Tensor, out: Tensor | None, tmp: Tensor | None) -> tuple[Tensor, Tensor]:
    if out is None:
        out = Tensor.empty(x.shape)
    if tmp is None:
        tmp = Tensor.empty(x.shape)
    return out, tmp


def ddim_step(
    x_t: Tensor,
    eps_pred: Tensor,
    t: int,
    t_prev: int,
    state: SchedulerState,
    rng: Rng | None = None,
    out: Tensor | None = None,
    tmp: Tensor | None = None,
) -> Tensor:
    """One DDIM update from timestep t to t_prev (t_prev = -1 lands on x0)."""
    if t_prev >= t:
        raise ValueError(f"ddim_step requires t > t_prev, got t={t}, t_prev={t_prev}")
    sched = state.schedule
    a_t = sched.alpha_bar(t)
    a_prev = sched.alpha_bar(t_prev)
    eta = state.eta

    sigma = 0.0
    if eta > 0.0 and t_prev >= 0:
        sigma = (
            eta
            * math.sqrt((1.0 - a_prev) / (1.0 - a_t))
            * math.sqrt(1.0 - a_t / a_prev)
        )

    out, tmp = _workspace(x_t, out, tmp)
    o, w = out.np(), tmp.np()
    # x0_pred = (x_t - sqrt(1-abar_t) eps) / sqrt(abar_t)
    np.multiply(eps_pred.np(), math.sqrt(1.0 - a_t), out=w)
    np.subtract(x_t.np(), w, out=w)
    np.divide(w, math.sqrt(a_t), out=w)
    np.multiply(w, math.sqrt(a_prev), out=w)
    # direction term reuses the predicted noise
    np.multiply(eps_pred.np(), math.sqrt(max(1.0 - a_prev - sigma * sigma, 0.0)), out=o)
    np.add(w, o, out=o)
    if sigma > 0.0:
        if rng is None:
            raise ValueError("eta > 0 requires an rng")
        z = rng.normal(x_t.shape)
        o += z.np() * np.float32(sigma)
    return out


def _ddpm_between(
    x_t: Tensor,
    eps_pred: Tensor,
    t: int,
    t_prev: int,
    state: SchedulerState,
    rng: Rng | None,
    out: Tensor | None = None,
    tmp: Tensor | None = None,
) -> Tensor:
    """Ancestral update from t to t_prev.

    For the canonical single step (t_prev = t-1) the effective beta is
    betas[t] itself; for strided inference schedules it is the aggregate
    1 - abar_t / abar_prev over the skipped range.
    """
    if t_prev >= t:
        raise ValueError(f"ddpm step requires t > t_prev, got t={t}, t_prev={t_prev}")
    sched = state.schedule
    a_t = sched.alpha_bar(t)
    a_prev = sched.alpha_bar(t_prev)
    if t_prev == t - 1:
        beta_eff = float(sched.betas[t])
    else:
        beta_eff = 1.0 - a_t / a_prev
    alpha_eff = 1.0 - beta_eff
    var = (1.0 - a_prev) / (1.0 - a_t) * beta_eff

    out, tmp = _workspace(x_t, out, tmp)
    o, w = out.np(), tmp.np()
    # posterior mean = (x_t - beta_eff/sqrt(1-abar_t) eps) / sqrt(alpha_eff)
    np.multiply(eps_pred.np(), beta_eff / math.sqrt(1.0 - a_t), out=w)
    np.subtract(x_t.np(), w, out=w)
    np.divide(w, math.sqrt(alpha_eff), out=o)
    if t > 0 and var > 0.0:
        if rng is None:
            raise ValueError("ddpm sampling requires an rng for t > 0")
        z = rng.normal(x_t.shape)
        o += z.np() * np.float32(math.sqrt(var))
    return out


def ddpm_step(
    x_t: Tensor,
    eps_pred: Tensor,
    t: int,
    state: SchedulerState,
    rng: Rng | None,
    out: Tensor | None = None,
    tmp: Tensor | None = None,
) -> Tensor:
    """One ancestral update from t to t-1 (t=0 is the final, noiseless step)."""
    if not (0 <= t < state.schedule.T):
        raise ValueError(f"t={t} outside [0, {state.schedule.T})")
    return _ddpm_between(x_t, eps_pred, t, t - 1, state, rng, out=out, tmp=tmp)


# ------------------------------------------------------------- registry

_REGISTRY: dict[str, object] = {}


def register_scheduler(name: str, step_fn) -> None:
    """Register a step rule: fn(x_t, eps, t, t_prev, state, rng, out=, tmp=)."""
    if name in _REGISTRY:
        raise ValueError(f"scheduler {name!r} is already registered")
    _REGISTRY[name] = step_fn


def get_scheduler(name: str):
    try:
        return _REGISTRY[name]
    except KeyError:
        known = ", ".join(sorted(_REGISTRY))
        raise KeyError(f"no scheduler named {name!r}; known schedulers: {known}") from None


def scheduler_names() -> list[str]:
    return sorted(_REGISTRY)


register_scheduler("ddim", ddim_step)
register_scheduler("ddpm", _ddpm_between)
