"""Named float64 parameter collections and flatten/unflatten round-trips."""

from __future__ import annotations

from collections import OrderedDict
from collections.abc import Callable, Iterator, Mapping

import torch

from .rng import DTYPE


class ParameterVector(Mapping[str, torch.Tensor]):
    """An ordered, named set of float64 tensors (the sampler's theta).

    Values are treated as immutable; arithmetic helpers return new vectors
    with the same segment structure. flatten() then unflatten() is the
    identity.
    """

    def __init__(self, segments: Mapping[str, torch.Tensor]):
        items: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        for name, value in segments.items():
            if name in items:
                raise ValueError(f"duplicate segment name: {name!r}")
            items[name] = value.to(DTYPE)
        self._segments = items

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._segments[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._segments)

    def __len__(self) -> int:
        return len(self._segments)

    @property
    def n_params(self) -> int:
        return sum(v.numel() for v in self._segments.values())

    def flatten(self) -> torch.Tensor:
        return torch.cat([v.reshape(-1) for v in self._segments.values()])

    def unflatten(self, flat: torch.Tensor) -> "ParameterVector":
        if flat.numel() != self.n_params:
            raise ValueError(f"expected {self.n_params} entries, got {flat.numel()}")
        out: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        offset = 0
        for name, value in self._segments.items():
            n = value.numel()
            out[name] = flat[offset : offset + n].reshape(value.shape)
            offset += n
        return ParameterVector(out)

    def map(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> "ParameterVector":
        return ParameterVector(OrderedDict((k, fn(v)) for k, v in self._segments.items()))

    def zip_map(
        self, fn: Callable[..., torch.Tensor], *others: "ParameterVector"
    ) -> "ParameterVector":
        for o in others:
            if list(o) != list(self):
                raise ValueError("segment structure mismatch")
        out = OrderedDict(
            (k, fn(v, *(o[k] for o in others))) for k, v in self._segments.items()
        )
        return ParameterVector(out)

    def detach(self) -> "ParameterVector":
        return self.map(lambda v: v.detach())

    def clone(self) -> "ParameterVector":
        return self.map(lambda v: v.detach().clone())

    def zeros_like(self) -> "ParameterVector":
        return self.map(torch.zeros_like)

    def norm(self) -> torch.Tensor:
        return torch.sqrt(sum((v**2).sum() for v in self._segments.values()))

    def requires_grad_(self, flag: bool = True) -> "ParameterVector":
        for v in self._segments.values():
            v.requires_grad_(flag)
        return self

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParameterVector":
        return cls(OrderedDict(module.named_parameters()))

    def copy_into_module(self, module: torch.nn.Module) -> None:
        with torch.no_grad():
            for name, p in module.named_parameters():
                p.copy_(self._segments[name])
