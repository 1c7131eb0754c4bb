"""Unnormalized target densities, the Gaussian prior, and reference samplers.

All densities are evaluated pointwise in log space on float64 batches of
shape (B, D); gradients are analytic. ``exact_log_z`` is present only for
families where the normalizer is tractable.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import DTYPE, RngState

LOG_2PI = math.log(2.0 * math.pi)


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 1:
        return x.unsqueeze(0), False
    return x, True


@dataclass
class TargetDensity:
    """Pointwise-evaluable unnormalized density rho with analytic score."""

    dim: int
    _log_rho: Callable[[torch.Tensor], torch.Tensor]
    _grad_log_rho: Callable[[torch.Tensor], torch.Tensor]
    exact_log_z: float | None = None
    reference_sampler: Callable[[RngState, int], torch.Tensor] | None = None
    name: str = ""

    def log_rho(self, x: torch.Tensor) -> torch.Tensor:
        xb, was_batched = _batched(x)
        out = self._log_rho(xb)
        return out if was_batched else out.squeeze(0)

    def grad_log_rho(self, x: torch.Tensor) -> torch.Tensor:
        xb, was_batched = _batched(x)
        out = self._grad_log_rho(xb)
        return out if was_batched else out.squeeze(0)

    def sample_reference(self, rng: RngState, n: int) -> torch.Tensor:
        if self.reference_sampler is None:
            raise ValueError(f"target {self.name!r} has no reference sampler")
        return self.reference_sampler(rng, n)


@dataclass
class GaussianPrior:
    """Isotropic normal N(mean, scale^2 I); the sampler's source distribution."""

    dim: int
    scale: float
    mean: torch.Tensor | None = None

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("prior scale must be positive")
        if self.mean is None:
            self.mean = torch.zeros(self.dim, dtype=DTYPE)
        else:
            self.mean = torch.as_tensor(self.mean, dtype=DTYPE).reshape(self.dim)

    def log_density(self, x: torch.Tensor) -> torch.Tensor:
        xb, was_batched = _batched(x)
        var = self.scale**2
        out = -0.5 * ((xb - self.mean) ** 2).sum(-1) / var - 0.5 * self.dim * (
            LOG_2PI + math.log(var)
        )
        return out if was_batched else out.squeeze(0)

    def sample(self, rng: RngState, n: int) -> torch.Tensor:
        return self.mean + self.scale * rng.normal(n, self.dim)


# ---------------------------------------------------------------------------
# Gaussian mixtures


def gmm_target(
    modes: list[tuple], dim: int, name: str = "gmm"
) -> TargetDensity:
    """Mixture of isotropic Gaussians, rho = sum w_i N(mean_i, scale_i^2 I).

    Each mode is (mean, scale, weight) with positive scale and weight. The
    components are normalized, so exact_log_z = log(sum of weights).
    """
    if not modes:
        raise ValueError("mode list is empty")
    means = torch.stack(
        [torch.as_tensor(m, dtype=DTYPE).reshape(dim) for m, _, _ in modes]
    )
    scales = torch.tensor([s for _, s, _ in modes], dtype=DTYPE)
    weights = torch.tensor([w for _, _, w in modes], dtype=DTYPE)
    if (scales <= 0).any() or (weights <= 0).any():
        raise ValueError("mode scales and weights must be positive")
    log_w = torch.log(weights)
    log_norm = -0.5 * dim * (LOG_2PI + 2.0 * torch.log(scales))

    def component_logs(x):
        # (B, K)
        d2 = ((x.unsqueeze(1) - means) ** 2).sum(-1)
        return log_w + log_norm - 0.5 * d2 / scales**2

    def log_rho(x):
        return torch.logsumexp(component_logs(x), dim=-1)

    def grad_log_rho(x):
        r = torch.softmax(component_logs(x), dim=-1)  # responsibilities
        pulls = (means - x.unsqueeze(1)) / scales.unsqueeze(-1) ** 2
        return (r.unsqueeze(-1) * pulls).sum(1)

    probs = weights / weights.sum()

    def sampler(rng: RngState, n: int) -> torch.Tensor:
        idx = torch.multinomial(
            probs, n, replacement=True, generator=rng._generator()
        )
        return means[idx] + scales[idx].unsqueeze(-1) * rng.normal(n, dim)

    return TargetDensity(
        dim=dim,
        _log_rho=log_rho,
        _grad_log_rho=grad_log_rho,
        exact_log_z=float(torch.log(weights.sum())),
        reference_sampler=sampler,
        name=name,
    )


def random_gmm_target(
    n_modes: int = 40,
    dim: int = 2,
    box: float = 40.0,
    scale: float = 1.0,
    weight: float = 1.0,
    seed: int = 0,
) -> TargetDensity:
    """Equal-weight mixture with mode centers uniform in [-box, box]^dim."""
    rng = RngState(seed, stream=0xA11CE)
    means = (rng.uniform(n_modes, dim) * 2.0 - 1.0) * box
    modes = [(means[i], scale, weight) for i in range(n_modes)]
    return gmm_target(modes, dim, name=f"gmm{n_modes}")


# ---------------------------------------------------------------------------
# Funnel


def funnel_target(dim: int = 10) -> TargetDensity:
    """Neal's funnel: x1 ~ N(0, 9), x_i | x1 ~ N(0, exp(x1)) for i >= 2."""
    if dim < 2:
        raise ValueError("funnel needs dim >= 2")
    v1 = 9.0

    def log_rho(x):
        x1 = x[:, 0]
        rest = x[:, 1:]
        head = -0.5 * x1**2 / v1 - 0.5 * math.log(2.0 * math.pi * v1)
        tail = -0.5 * (rest**2).sum(-1) * torch.exp(-x1) - 0.5 * (dim - 1) * (
            LOG_2PI + x1
        )
        return head + tail

    def grad_log_rho(x):
        x1 = x[:, 0]
        rest = x[:, 1:]
        g = torch.empty_like(x)
        g[:, 0] = (
            -x1 / v1 + 0.5 * (rest**2).sum(-1) * torch.exp(-x1) - 0.5 * (dim - 1)
        )
        g[:, 1:] = -rest * torch.exp(-x1).unsqueeze(-1)
        return g

    def sampler(rng: RngState, n: int) -> torch.Tensor:
        x1 = 3.0 * rng.child(1).normal(n)
        rest = rng.child(2).normal(n, dim - 1) * torch.exp(0.5 * x1).unsqueeze(-1)
        return torch.cat([x1.unsqueeze(-1), rest], dim=-1)

    return TargetDensity(
        dim=dim,
        _log_rho=log_rho,
        _grad_log_rho=grad_log_rho,
        exact_log_z=0.0,
        reference_sampler=sampler,
        name="funnel",
    )


# ---------------------------------------------------------------------------
# Many-well


def _double_well_log_z(delta: float, nodes: int = 200) -> float:
    """log of integral exp(-x^4 + delta x^2) dx by Gauss-Hermite quadrature."""
    x, w = np.polynomial.hermite.hermgauss(nodes)
    # weight function is exp(-x^2); fold it back in
    logs = np.log(w) + (-(x**4) + (delta + 1.0) * x**2)
    m = logs.max()
    return float(m + np.log(np.exp(logs - m).sum()))


def _double_well_grid_cdf(delta: float, half_width: float = 4.0, n: int = 8193):
    xs = np.linspace(-half_width, half_width, n)
    dens = np.exp(-(xs**4) + delta * xs**2)
    cdf = np.concatenate([[0.0], np.cumsum((dens[1:] + dens[:-1]) * 0.5)])
    cdf /= cdf[-1]
    return xs, cdf


def manywell_target(
    dim: int = 5, n_bimodal: int = 5, delta: float = 4.0
) -> TargetDensity:
    """Separable many-well density with 2^n_bimodal modes.

    log rho(x) = sum_{i<m} (-x_i^4 + delta x_i^2) - 0.5 sum_{i>=m} x_i^2,
    modes at x_i = +-sqrt(delta/2) in each double-well coordinate.
    """
    m = min(n_bimodal, dim)
    dw_log_z = _double_well_log_z(delta)
    exact_log_z = m * dw_log_z + 0.5 * (dim - m) * LOG_2PI
    grid_x, grid_cdf = _double_well_grid_cdf(delta)

    def log_rho(x):
        dw = x[:, :m]
        gauss = x[:, m:]
        return (-(dw**4) + delta * dw**2).sum(-1) - 0.5 * (gauss**2).sum(-1)

    def grad_log_rho(x):
        g = torch.empty_like(x)
        g[:, :m] = -4.0 * x[:, :m] ** 3 + 2.0 * delta * x[:, :m]
        g[:, m:] = -x[:, m:]
        return g

    def sampler(rng: RngState, n: int) -> torch.Tensor:
        u = rng.child(1).uniform(n, m).numpy()
        dw = np.interp(u, grid_cdf, grid_x)
        out = torch.empty(n, dim, dtype=DTYPE)
        out[:, :m] = torch.from_numpy(dw)
        if dim > m:
            out[:, m:] = rng.child(2).normal(n, dim - m)
        return out

    return TargetDensity(
        dim=dim,
        _log_rho=log_rho,
        _grad_log_rho=grad_log_rho,
        exact_log_z=exact_log_z,
        reference_sampler=sampler,
        name="manywell",
    )


# ---------------------------------------------------------------------------
# Bayesian logistic regression


class CsvFormatError(ValueError):
    pass


@dataclass
class LogisticRegressionData:
    """Design matrix, binary labels, and the Gaussian prior scale."""

    features: torch.Tensor  # (n, p)
    labels: torch.Tensor  # (n,) in {0, 1}
    prior_scale: float = 1.0

    def __post_init__(self):
        if self.features.dim() != 2:
            raise ValueError("features must be a matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("label count must match row count")
        if not torch.isfinite(self.features).all():
            raise ValueError("features contain non-finite entries")
        uniq = set(self.labels.tolist())
        if not uniq <= {0.0, 1.0}:
            raise ValueError(f"labels must be binary, got {sorted(uniq)}")

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


def load_csv(path: str, standardize: bool = True) -> LogisticRegressionData:
    """Read a headered CSV whose last column is the binary label.

    With ``standardize`` the feature columns are shifted/scaled to zero mean
    and unit variance (constant columns are only centered).
    """
    rows: list[list[float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        width = len(header)
        for i, raw in enumerate(reader, start=2):
            if len(raw) != width:
                raise CsvFormatError(
                    f"{path}: row {i} has {len(raw)} cells, expected {width}"
                )
            parsed = []
            for j, cell in enumerate(raw):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise CsvFormatError(
                        f"{path}: row {i}, column {j + 1} ({header[j]!r}): "
                        f"non-numeric cell {cell!r}"
                    ) from None
            rows.append(parsed)
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    data = torch.tensor(rows, dtype=DTYPE)
    features, labels = data[:, :-1], data[:, -1]
    bad = [i for i, v in enumerate(labels.tolist(), start=2) if v not in (0.0, 1.0)]
    if bad:
        raise CsvFormatError(f"{path}: non-binary label in row {bad[0]}")
    if standardize:
        mean = features.mean(0)
        std = features.std(0, unbiased=False)
        std = torch.where(std > 0, std, torch.ones_like(std))
        features = (features - mean) / std
    return LogisticRegressionData(features=features, labels=labels)


def logistic_posterior(data: LogisticRegressionData) -> TargetDensity:
    """Posterior over [weights, intercept] with prior N(0, prior_scale^2 I)."""
    X, y = data.features, data.labels
    dim = data.n_features + 1
    var = data.prior_scale**2
    prior_const = -0.5 * dim * (LOG_2PI + math.log(var))

    def logits(w):
        if w.shape[-1] != dim:
            raise ValueError(f"expected parameter dimension {dim}, got {w.shape[-1]}")
        return w[:, :-1] @ X.T + w[:, -1:]

    def log_rho(w):
        z = logits(w)
        loglik = -(
            y * torch.nn.functional.softplus(-z)
            + (1.0 - y) * torch.nn.functional.softplus(z)
        ).sum(-1)
        return loglik + prior_const - 0.5 * (w**2).sum(-1) / var

    def grad_log_rho(w):
        z = logits(w)
        resid = y - torch.sigmoid(z)  # (B, n)
        gw = resid @ X
        gb = resid.sum(-1, keepdim=True)
        return torch.cat([gw, gb], dim=-1) - w / var

    return TargetDensity(
        dim=dim,
        _log_rho=log_rho,
        _grad_log_rho=grad_log_rho,
        exact_log_z=None,
        reference_sampler=None,
        name="logistic",
    )
