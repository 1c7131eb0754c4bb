"""Noising-SDE schedules, discrete kernels, and probability-flow integration.

The generative SDE runs t in [0, T] from the prior toward the target with
drift sigma(t) u(x,t) - f(t) x, f = -beta/2, so the uncontrolled pull is
expansive (+beta/2 x). Schedules are defined in noising time and by default
evaluated at T - t for the generative process (reverse_time).

The probability-flow drift is b = sigma u / 2 - f x; ``integrate_field``
advances (x, ell) jointly, with ell accumulating the divergence (exact or
Hutchinson) so that ell_d = log|det grad(flow map)|.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field

import torch

from .core import DTYPE, RngState
from .targets import LOG_2PI, GaussianPrior


class SimulationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Schedules


@dataclass
class NoiseSchedule:
    """beta(t), sigma(t), f(t) for the noising SDE plus the cosine noise scale.

    ``kind`` selects the diffusion scale: "vp" uses sigma0 sqrt(beta(t));
    "cosine" uses the shifted cosine law with (sigma_min, sigma_max, shift,
    exponent). ``*_at`` accessors give the generative-time values (flipped to
    T - t when reverse_time is set); plain accessors are the schedule in its
    own clock.
    """

    beta_min: float = 0.01
    beta_max: float = 10.0
    sigma0: float = 1.0
    horizon: float = 1.0
    kind: str = "vp"
    sigma_min: float = 0.01
    sigma_max: float = 2.0
    shift: float = 0.0
    exponent: float = 1.0
    reverse_time: bool = True

    def __post_init__(self):
        if self.beta_min < 0 or self.beta_max < self.beta_min:
            raise ValueError("need 0 <= beta_min <= beta_max")
        if self.sigma0 <= 0:
            raise ValueError("sigma0 must be positive")
        if self.kind not in ("vp", "cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "cosine" and not (self.sigma_max > self.sigma_min > 0):
            raise ValueError("need sigma_max > sigma_min > 0")

    def beta(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=DTYPE)
        return self.beta_min + t / self.horizon * (self.beta_max - self.beta_min)

    def f(self, t) -> torch.Tensor:
        return -0.5 * self.beta(t)

    def sigma(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=DTYPE)
        if self.kind == "vp":
            return self.sigma0 * torch.sqrt(self.beta(t))
        phase = 0.5 * math.pi * (1.0 + self.shift - t / self.horizon) / (1.0 + self.shift)
        return (
            0.5 * (self.sigma_max - self.sigma_min) * torch.cos(phase) ** self.exponent
            + 0.5 * self.sigma_min
        )

    def _gen_clock(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=DTYPE)
        return self.horizon - t if self.reverse_time else t

    def beta_at(self, t) -> torch.Tensor:
        return self.beta(self._gen_clock(t))

    def f_at(self, t) -> torch.Tensor:
        return self.f(self._gen_clock(t))

    def sigma_at(self, t) -> torch.Tensor:
        return self.sigma(self._gen_clock(t))


@dataclass
class Discretization:
    """Uniform mesh 0 = t_0 < ... < t_N = T."""

    n_steps: int
    horizon: float = 1.0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("need at least one step")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> torch.Tensor:
        return torch.arange(self.n_steps + 1, dtype=DTYPE) * self.dt


# ---------------------------------------------------------------------------
# Gaussian kernels


def gaussian_logpdf(x: torch.Tensor, mean: torch.Tensor, var) -> torch.Tensor:
    """log N(x; mean, var*I) summed over the last axis."""
    var = torch.as_tensor(var, dtype=DTYPE)
    d = x.shape[-1]
    return -0.5 * ((x - mean) ** 2).sum(-1) / var - 0.5 * d * (LOG_2PI + torch.log(var))


@dataclass
class GaussianKernel:
    """Conditional N(mean_map(x_cond), var*I); linear kernels carry ``coef``."""

    mean_map: Callable[[torch.Tensor], torch.Tensor]
    var: float
    coef: float | None = None

    def mean(self, x_cond: torch.Tensor) -> torch.Tensor:
        return self.mean_map(x_cond)

    def log_density(self, x: torch.Tensor, x_cond: torch.Tensor) -> torch.Tensor:
        return gaussian_logpdf(x, self.mean_map(x_cond), self.var)

    @classmethod
    def linear(cls, coef: float, var: float) -> "GaussianKernel":
        return cls(mean_map=lambda x: coef * x, var=var, coef=coef)


def kalman_time_adjoint(prior_var: float, a: float, q: float) -> GaussianKernel:
    """Exact backward kernel of x1 = a x0 + N(0, q) with x0 ~ N(0, prior_var).

    Returns N(K x1, post_var) with K = prior_var a / (a^2 prior_var + q).
    """
    if prior_var <= 0 or q <= 0:
        raise ValueError("prior_var and q must be positive")
    denom = a**2 * prior_var + q
    gain = prior_var * a / denom
    post_var = prior_var - prior_var**2 * a**2 / denom
    return GaussianKernel.linear(coef=gain, var=post_var)


# ---------------------------------------------------------------------------
# Euler-Maruyama kernels of the generative chain


def em_forward_step(
    x: torch.Tensor,
    t,
    dt: float,
    schedule: NoiseSchedule,
    control: Callable[[torch.Tensor, torch.Tensor], torch.Tensor] | None,
    noise: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """One EM step of the controlled generative SDE plus its log-kernel.

    Mean is x + (sigma(t) u(x,t) - f(t) x) dt, variance sigma(t)^2 dt; the
    returned log-density is the Gaussian kernel evaluated at the new state.
    """
    t = torch.as_tensor(t, dtype=DTYPE)
    s = schedule.sigma_at(t)
    f = schedule.f_at(t)
    drift = -f * x
    if control is not None:
        drift = drift + s * control(x, t)
    mean = x + drift * dt
    x_next = mean + s * math.sqrt(dt) * noise
    return x_next, gaussian_logpdf(x_next, mean, s**2 * dt)


def em_backward_logdensity(
    x: torch.Tensor,
    x_next: torch.Tensor,
    t_next,
    dt: float,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Surrogate right-point EM reversal: log N(x; x'(1 - beta(t')dt/2), sigma(t')^2 dt)."""
    t_next = torch.as_tensor(t_next, dtype=DTYPE)
    f = schedule.f_at(t_next)
    s = schedule.sigma_at(t_next)
    mean = x_next + f * x_next * dt
    return gaussian_logpdf(x, mean, s**2 * dt)


# ---------------------------------------------------------------------------
# Trajectory simulation


@dataclass
class Trajectory:
    """A batch of discrete forward paths with per-step kernel log-densities."""

    states: torch.Tensor  # (N+1, B, D)
    times: torch.Tensor  # (N+1,)
    log_fwd: torch.Tensor  # (N, B)
    log_bwd: torch.Tensor  # (N, B)
    noises: torch.Tensor  # (N, B, D)

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def batch(self) -> int:
        return self.states.shape[1]


BackwardLogDensity = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, float], torch.Tensor]


def simulate_forward(
    control: Callable[[torch.Tensor, torch.Tensor], torch.Tensor] | None,
    prior: GaussianPrior,
    schedule: NoiseSchedule,
    disc: Discretization,
    rng: RngState,
    batch: int,
    backward: BackwardLogDensity | GaussianKernel | None = None,
) -> Trajectory:
    """Draw x0 from the prior and run N EM steps, recording both kernels.

    ``backward`` overrides the surrogate EM reversal (e.g. with an exact
    time-adjoint kernel); by default em_backward_logdensity is used. Raises
    SimulationError with the step index if an entire batch goes non-finite;
    isolated non-finite samples propagate and are dropped downstream.
    """
    times = disc.times
    dt = disc.dt
    if isinstance(backward, GaussianKernel):
        kernel = backward
        backward = lambda x, x_next, t_next, dt: kernel.log_density(x, x_next)

    x = prior.sample(rng.child(0), batch)
    states = [x]
    log_fwd, log_bwd, noises = [], [], []
    for n in range(disc.n_steps):
        noise = rng.child(n + 1).normal(batch, prior.dim)
        x_next, lf = em_forward_step(x, times[n], dt, schedule, control, noise)
        if not torch.isfinite(x_next).any():
            raise SimulationError(f"state became non-finite at step {n}")
        if backward is None:
            lb = em_backward_logdensity(x, x_next, times[n + 1], dt, schedule)
        else:
            lb = backward(x, x_next, times[n + 1], dt)
        states.append(x_next)
        log_fwd.append(lf)
        log_bwd.append(lb)
        noises.append(noise)
        x = x_next
    return Trajectory(
        states=torch.stack(states),
        times=times,
        log_fwd=torch.stack(log_fwd),
        log_bwd=torch.stack(log_bwd),
        noises=torch.stack(noises),
    )


def simulate_backward(
    prior_dim: int,
    schedule: NoiseSchedule,
    disc: Discretization,
    rng: RngState,
    x_final: torch.Tensor,
) -> Trajectory:
    """Run the surrogate EM reversal from given terminal states down to t=0.

    Used for forward (upper-bound) weights over target samples; records the
    same per-step kernels as simulate_forward, indexed in forward order.
    """
    times = disc.times
    dt = disc.dt
    x = x_final
    rev_states = [x]
    log_bwd_rev, noise_rev = [], []
    for k in range(disc.n_steps, 0, -1):
        t_next = times[k]
        f = schedule.f_at(t_next)
        s = schedule.sigma_at(t_next)
        noise = rng.child(k).normal(x.shape[0], prior_dim)
        mean = x + f * x * dt
        x_prev = mean + s * math.sqrt(dt) * noise
        log_bwd_rev.append(gaussian_logpdf(x_prev, mean, s**2 * dt))
        rev_states.append(x_prev)
        noise_rev.append(noise)
        x = x_prev
    states = list(reversed(rev_states))
    log_bwd = list(reversed(log_bwd_rev))
    log_fwd = []
    for n in range(disc.n_steps):
        s = schedule.sigma_at(times[n])
        f = schedule.f_at(times[n])
        mean = states[n] - f * states[n] * dt
        log_fwd.append(gaussian_logpdf(states[n + 1], mean, s**2 * dt))
    return Trajectory(
        states=torch.stack(states),
        times=times,
        log_fwd=torch.stack(log_fwd),
        log_bwd=torch.stack(log_bwd),
        noises=torch.stack(list(reversed(noise_rev))),
    )


# ---------------------------------------------------------------------------
# Probability-flow integration


@dataclass
class AugmentedState:
    """State plus accumulated log-volume and the (bit-reproducible) end time."""

    x: torch.Tensor
    ell: torch.Tensor
    t: torch.Tensor


def _as_time(t, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=DTYPE)
    if t.dim() == 0:
        return t
    return t  # (B,) per-sample times broadcast against (B, D) states via unsqueeze


def _bc(v: torch.Tensor) -> torch.Tensor:
    """Broadcast a scalar or (B,) time-like factor against (B, D) states."""
    return v.unsqueeze(-1) if v.dim() == 1 else v


class _StageEval:
    """Evaluates drift and (optionally) its divergence at solver stages."""

    def __init__(self, drift, with_volume, probe, exact, create_graph):
        self.drift = drift
        self.with_volume = with_volume
        self.probe = probe
        self.exact = exact
        self.create_graph = create_graph

    def __call__(self, x, t):
        if not self.with_volume:
            return self.drift(x, t), None
        if not x.requires_grad:
            x = x.detach().requires_grad_(True)
        out = self.drift(x, t)
        if self.exact:
            div = torch.zeros(x.shape[:-1], dtype=DTYPE)
            for j in range(x.shape[-1]):
                basis = torch.zeros_like(x)
                basis[..., j] = 1.0
                g = torch.autograd.grad(
                    out, x, grad_outputs=basis,
                    create_graph=self.create_graph, retain_graph=True,
                )[0]
                div = div + g[..., j]
        else:
            g = torch.autograd.grad(
                out, x, grad_outputs=self.probe,
                create_graph=self.create_graph, retain_graph=True,
            )[0]
            div = (g * self.probe).sum(-1)
        return out, div


def integrate_field(
    drift: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    x0: torch.Tensor,
    t0,
    d,
    substeps: int = 1,
    solver: str = "rk4",
    with_volume: bool = False,
    probes: int = 0,
    rng: RngState | None = None,
    probe: torch.Tensor | None = None,
    probe_list: list[torch.Tensor] | None = None,
    create_graph: bool = False,
) -> AugmentedState:
    """Advance (x, ell) under dx/dt = drift, dell/dt = div drift over [t0, t0+d].

    Divergence handling when with_volume: probes=0 computes the exact trace;
    a fixed ``probe`` (B, D) is shared across all substeps (distillation);
    ``probe_list`` supplies one probe per substep; otherwise ``probes`` fresh
    Rademacher draws per substep come from ``rng``.

    Time advances by accumulation (t += h); chaining a second call from the
    returned ``t`` reproduces a single longer call bit-exactly.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    if solver not in ("rk4", "euler"):
        raise ValueError(f"unknown solver {solver!r}")

    x = x0
    ell = torch.zeros(x.shape[:-1], dtype=DTYPE)
    t = torch.as_tensor(t0, dtype=DTYPE)
    d = torch.as_tensor(d, dtype=DTYPE)
    h = d / substeps
    hb = _bc(h) if h.dim() else h

    with torch.enable_grad():
        for i in range(substeps):
            if with_volume and probes > 0 and probe is None and probe_list is None:
                if rng is None:
                    raise ValueError("Hutchinson volume accumulation needs an RngState")
                sub_probe = rng.child(i).rademacher(*x.shape)
            elif probe_list is not None:
                sub_probe = probe_list[i]
            else:
                sub_probe = probe
            stage = _StageEval(
                drift, with_volume, sub_probe,
                exact=with_volume and probes == 0 and probe is None and probe_list is None,
                create_graph=create_graph,
            )
            if solver == "euler":
                k1, v1 = stage(x, t)
                x = x + hb * k1
                if with_volume:
                    ell = ell + h * v1
            else:
                k1, v1 = stage(x, t)
                k2, v2 = stage(x + 0.5 * hb * k1, t + 0.5 * h)
                k3, v3 = stage(x + 0.5 * hb * k2, t + 0.5 * h)
                k4, v4 = stage(x + hb * k3, t + h)
                x = x + (hb / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                if with_volume:
                    ell = ell + (h / 6.0) * (v1 + 2.0 * v2 + 2.0 * v3 + v4)
            t = t + h
    return AugmentedState(x=x, ell=ell, t=t)


def pf_drift(net, x: torch.Tensor, t, d, schedule: NoiseSchedule) -> torch.Tensor:
    """Probability-flow drift b = sigma(t) u(x,t,d) / 2 - f(t) x."""
    t = torch.as_tensor(t, dtype=DTYPE)
    d = torch.as_tensor(d, dtype=DTYPE)
    s = schedule.sigma_at(t)
    f = schedule.f_at(t)
    return 0.5 * _bc(s) * net(x, t, d) - _bc(f) * x


def pf_field(net, schedule: NoiseSchedule, d):
    """Drift closure of the step-conditioned PF ODE at step size d."""
    d = torch.as_tensor(d, dtype=DTYPE)

    def drift(x, t):
        return pf_drift(net, x, t, d, schedule)

    return drift


def integrate_pf(
    net,
    schedule: NoiseSchedule,
    x0: torch.Tensor,
    t_start,
    d,
    substeps: int = 1,
    with_volume: bool = False,
    probes: int = 0,
    rng: RngState | None = None,
    solver: str = "rk4",
    probe: torch.Tensor | None = None,
    create_graph: bool = False,
) -> AugmentedState:
    """Advance the step-conditioned PF ODE (and its log-volume) over [t, t+d]."""
    state = integrate_field(
        pf_field(net, schedule, d),
        x0,
        t_start,
        d,
        substeps=substeps,
        solver=solver,
        with_volume=with_volume,
        probes=probes,
        rng=rng,
        probe=probe,
        create_graph=create_graph,
    )
    if not torch.isfinite(state.x).any() or (
        with_volume and not torch.isfinite(state.ell).any()
    ):
        raise SimulationError("probability-flow state became non-finite")
    return state


def pf_transport(
    net,
    schedule: NoiseSchedule,
    x0: torch.Tensor,
    n_steps: int,
    substeps: int = 1,
    with_volume: bool = True,
    probes: int = 0,
    rng: RngState | None = None,
    solver: str = "rk4",
) -> tuple[torch.Tensor, torch.Tensor]:
    """Chain n_steps conditioned PF segments over the full horizon.

    Returns the transported batch and the accumulated log-volume.
    """
    d = schedule.horizon / n_steps
    x = x0
    ell = torch.zeros(x0.shape[:-1], dtype=DTYPE)
    t = torch.zeros((), dtype=DTYPE)
    for k in range(n_steps):
        seg = integrate_pf(
            net, schedule, x, t, d,
            substeps=substeps, with_volume=with_volume, probes=probes,
            rng=rng.child(k) if rng is not None else None, solver=solver,
        )
        x, t = seg.x, seg.t
        if with_volume:
            ell = ell + seg.ell
    return x, ell


def pf_transport_reverse(
    net,
    schedule: NoiseSchedule,
    y: torch.Tensor,
    n_steps: int,
    substeps: int = 1,
    with_volume: bool = True,
    probes: int = 0,
    rng: RngState | None = None,
    solver: str = "rk4",
) -> tuple[torch.Tensor, torch.Tensor]:
    """Invert the conditioned PF transport: map y at t=T back to t=0.

    The returned log-volume is that of the reverse map, i.e. the negated
    forward log|det|.
    """
    d = schedule.horizon / n_steps
    x = y
    ell = torch.zeros(y.shape[:-1], dtype=DTYPE)
    for k in range(n_steps - 1, -1, -1):
        t_end = (k + 1) * d
        fwd = pf_field(net, schedule, d)

        def rev_drift(z, s, t_end=t_end):
            return -fwd(z, t_end - s)

        seg = integrate_field(
            rev_drift, x, 0.0, d,
            substeps=substeps, solver=solver, with_volume=with_volume,
            probes=probes, rng=rng.child(k) if rng is not None else None,
        )
        x = seg.x
        if with_volume:
            ell = ell + seg.ell
    return x, ell
