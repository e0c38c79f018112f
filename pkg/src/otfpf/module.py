"""Minimal parameter-owning module base.

Parameters are discovered by walking attributes (Parameter, Module, or
lists/tuples of Modules) in insertion order, which makes walk order, and
therefore checkpoint layout and initialization, deterministic.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import DTYPE, Parameter


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            path = f"{prefix}.{attr}" if prefix else attr
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def assign_names(self, prefix: str = "") -> None:
        seen: set[str] = set()
        for name, p in self.named_parameters(prefix):
            if name in seen:
                raise ValueError(f"duplicate parameter name {name!r}")
            seen.add(name)
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal draw truncated to two standard deviations by resampling."""
    out = rng.standard_normal(shape) * std
    for _ in range(8):
        mask = np.abs(out) > 2.0 * std
        if not mask.any():
            break
        out[mask] = rng.standard_normal(int(mask.sum())) * std
    np.clip(out, -2.0 * std, 2.0 * std, out=out)
    return out.astype(DTYPE)
