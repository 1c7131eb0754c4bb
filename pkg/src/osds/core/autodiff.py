"""Gradients, directional derivatives, and divergence estimators.

Everything runs in float64. ``grad`` differentiates scalar losses with
respect to a ParameterVector; ``jvp`` provides forward-mode directional
derivatives (built on double backward, so it can itself be differentiated);
divergences come either from Hutchinson probes or, for low dimensions, an
exact sweep of coordinate vjps.
"""

from __future__ import annotations

from collections.abc import Callable

import torch

from .params import ParameterVector
from .rng import DTYPE, RngState


class NonFiniteError(RuntimeError):
    pass


def grad(
    loss: Callable[[ParameterVector], torch.Tensor],
    at: ParameterVector,
) -> ParameterVector:
    """Gradient of a scalar loss with respect to every segment of ``at``."""
    leaves = at.map(lambda v: v.detach().clone().requires_grad_(True))
    value = loss(leaves)
    if value.dim() != 0:
        raise ValueError("loss must evaluate to a scalar")
    if not torch.isfinite(value):
        raise NonFiniteError(f"loss is non-finite ({value.item()})")
    grads = torch.autograd.grad(value, list(leaves.values()), allow_unused=True)
    out = {}
    for name, g, v in zip(leaves, grads, leaves.values()):
        g = torch.zeros_like(v) if g is None else g
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in segment {name!r}")
        out[name] = g.detach()
    return ParameterVector(out)


def value_and_grad(
    loss: Callable[[ParameterVector], torch.Tensor],
    at: ParameterVector,
) -> tuple[torch.Tensor, ParameterVector]:
    leaves = at.map(lambda v: v.detach().clone().requires_grad_(True))
    value = loss(leaves)
    if not torch.isfinite(value):
        raise NonFiniteError(f"loss is non-finite ({value.item()})")
    grads = torch.autograd.grad(value, list(leaves.values()), allow_unused=True)
    out = {
        name: (torch.zeros_like(v) if g is None else g.detach())
        for name, g, v in zip(leaves, grads, leaves.values())
    }
    return value.detach(), ParameterVector(out)


def jvp(
    field: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    v: torch.Tensor,
    create_graph: bool = False,
) -> torch.Tensor:
    """(d field / d x)(x) . v via double backward."""
    if x.shape != v.shape:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)} vs v {tuple(v.shape)}")
    _, tangent = torch.autograd.functional.jvp(
        field, x, v=v, create_graph=create_graph, strict=False
    )
    return tangent


def vjp_divergence(
    out: torch.Tensor,
    x: torch.Tensor,
    probe: torch.Tensor,
    create_graph: bool = False,
) -> torch.Tensor:
    """probe^T (d out / d x) probe for a batched field output already in graph."""
    g = torch.autograd.grad(
        out, x, grad_outputs=probe, create_graph=create_graph, retain_graph=True
    )[0]
    return (g * probe).sum(-1)


def divergence(
    field: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    probes: int = 0,
    rng: RngState | None = None,
    probe_kind: str = "rademacher",
    create_graph: bool = False,
    probe: torch.Tensor | None = None,
) -> torch.Tensor:
    """Divergence of a batched field at x, shape (B, D) -> (B,).

    probes=0 computes the exact trace with D coordinate vjps; otherwise the
    Hutchinson estimate averaged over ``probes`` draws (or the explicitly
    supplied ``probe``).
    """
    with torch.enable_grad():
        if not x.requires_grad:
            x = x.detach().requires_grad_(True)
        out = field(x)
        if probe is not None:
            return vjp_divergence(out, x, probe, create_graph=create_graph)
        if probes == 0:
            acc = torch.zeros(x.shape[:-1], dtype=DTYPE)
            for j in range(x.shape[-1]):
                basis = torch.zeros_like(x)
                basis[..., j] = 1.0
                g = torch.autograd.grad(
                    out, x, grad_outputs=basis, create_graph=create_graph, retain_graph=True
                )[0]
                acc = acc + g[..., j]
            return acc
        if rng is None:
            raise ValueError("Hutchinson estimation needs an RngState")
        acc = torch.zeros(x.shape[:-1], dtype=DTYPE)
        for k in range(probes):
            eps = _draw_probe(rng.child(k), x.shape, probe_kind)
            acc = acc + vjp_divergence(out, x, eps, create_graph=create_graph)
        return acc / probes


def _draw_probe(rng: RngState, shape: torch.Size, kind: str) -> torch.Tensor:
    if kind == "rademacher":
        return rng.rademacher(*shape)
    if kind == "gaussian":
        return rng.normal(*shape)
    raise ValueError(f"unknown probe kind {kind!r}")


def hutchinson_divergence(
    field: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    probes: int,
    rng: RngState,
    probe_kind: str = "rademacher",
) -> torch.Tensor:
    """Unbiased trace-of-Jacobian estimate (1/probes) sum eps^T J eps at one point."""
    if probes < 1:
        raise ValueError("probes must be >= 1")
    batched = x.dim() > 1
    xb = x if batched else x.unsqueeze(0)
    fieldb = field if batched else (lambda z: field(z.squeeze(0)).unsqueeze(0))
    est = divergence(fieldb, xb, probes=probes, rng=rng, probe_kind=probe_kind)
    return est if batched else est.squeeze(0)
