"""Finite scalar quantization with a straight-through gradient contract.

Each latent dimension i is squashed into (-1, 1) and snapped to one of
``levels[i]`` uniformly spaced bin midpoints ``-1 + (2k + 1) / L``. The
implicit codebook is the product grid; flat indices use big-endian
mixed-radix order so ``code[0]`` is the most significant digit.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import Tensor, nn


def _check_levels(levels: Sequence[int]) -> tuple[int, ...]:
    levels = tuple(int(l) for l in levels)
    if len(levels) == 0:
        raise ValueError("levels must be non-empty")
    if any(l < 2 for l in levels):
        raise ValueError(f"every level must be >= 2, got {levels}")
    return levels


def codebook_size(levels: Sequence[int]) -> int:
    """Number of distinct codes, i.e. the product of per-dimension levels."""
    return math.prod(_check_levels(levels))


def bound(z: Tensor) -> Tensor:
    """Squash each component into (-1, 1) with tanh.

    Odd, monotone and differentiable, so the origin is a fixed point and
    gradients never vanish identically inside the grid range.
    """
    if not torch.isfinite(z).all():
        raise ValueError("bound() requires finite inputs")
    return torch.tanh(z)


def grid_values(levels: Sequence[int], dim: int) -> Tensor:
    """All quantizer outputs for one dimension: ``-1 + (2k + 1) / L``."""
    levels = _check_levels(levels)
    l = levels[dim]
    return -1.0 + (2.0 * torch.arange(l, dtype=torch.float64) + 1.0) / l


def snap_to_grid(z_b: Tensor, levels: Sequence[int]) -> tuple[Tensor, Tensor]:
    """Snap a bounded latent to the nearest grid point per dimension.

    Exact midpoints between two grid points resolve to the lower code so
    the result is deterministic across platforms. The returned values are
    exactly on-grid in the forward pass while gradients pass through to
    ``z_b`` unchanged (straight-through).
    """
    levels = _check_levels(levels)
    if z_b.shape[-1] != len(levels):
        raise ValueError(
            f"last dim {z_b.shape[-1]} does not match {len(levels)} levels"
        )
    lv = torch.tensor(levels, dtype=z_b.dtype, device=z_b.device)
    # nearest k for -1 + (2k+1)/L with round-half-down = ceil(x - 1/2)
    code = torch.ceil((z_b + 1.0) * lv / 2.0 - 1.0)
    code = code.clamp(torch.zeros_like(lv), lv - 1.0)
    quant = -1.0 + (2.0 * code + 1.0) / lv
    value = z_b + (quant - z_b).detach()
    return code.long(), value


def quantize(z: Tensor, levels: Sequence[int]) -> tuple[Tensor, Tensor]:
    """Bound then snap: returns (codes, dequantized values with STE)."""
    return snap_to_grid(bound(z), levels)


def dequantize(code: Tensor, levels: Sequence[int]) -> Tensor:
    """Grid value for each code component (no gradient path)."""
    levels = _check_levels(levels)
    if code.shape[-1] != len(levels):
        raise ValueError(
            f"last dim {code.shape[-1]} does not match {len(levels)} levels"
        )
    lv = torch.tensor(levels, dtype=torch.float32, device=code.device)
    _check_code_range(code, levels)
    return -1.0 + (2.0 * code.float() + 1.0) / lv


def _check_code_range(code: Tensor, levels: tuple[int, ...]) -> None:
    lv = torch.tensor(levels, dtype=torch.long, device=code.device)
    if (code < 0).any() or (code >= lv).any():
        raise ValueError(f"code components out of range for levels {levels}")


def code_to_index(code: Tensor, levels: Sequence[int]) -> Tensor:
    """Flatten a code to its big-endian mixed-radix index in [0, size)."""
    levels = _check_levels(levels)
    if code.shape[-1] != len(levels):
        raise ValueError(
            f"last dim {code.shape[-1]} does not match {len(levels)} levels"
        )
    code = code.long()
    _check_code_range(code, levels)
    index = torch.zeros(code.shape[:-1], dtype=torch.long, device=code.device)
    for i, l in enumerate(levels):
        index = index * l + code[..., i]
    return index


def index_to_code(index: Tensor, levels: Sequence[int]) -> Tensor:
    """Inverse of :func:`code_to_index`."""
    levels = _check_levels(levels)
    index = torch.as_tensor(index, dtype=torch.long)
    size = math.prod(levels)
    if (index < 0).any() or (index >= size).any():
        raise ValueError(f"index out of range [0, {size})")
    digits = []
    rem = index
    for l in reversed(levels):
        digits.append(rem % l)
        rem = torch.div(rem, l, rounding_mode="floor")
    return torch.stack(list(reversed(digits)), dim=-1)


class FiniteScalarQuantizer(nn.Module):
    """Parameter-free FSQ bottleneck over the last tensor dimension."""

    def __init__(self, levels: Sequence[int]):
        super().__init__()
        self.levels = _check_levels(levels)
        self.dim = len(self.levels)
        self.size = math.prod(self.levels)

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (codes, straight-through values, flat indices)."""
        codes, values = quantize(z, self.levels)
        return codes, values, code_to_index(codes, self.levels)

    def indices_to_values(self, indices: Tensor) -> Tensor:
        """Exact grid values for flat indices (used when decoding stored tokens)."""
        return dequantize(index_to_code(indices, self.levels), self.levels)

    def extra_repr(self) -> str:
        return f"levels={list(self.levels)}, size={self.size}"
