"""2D rotary position encoding over token-grid (row, col) positions.

Each attention head's dimension is split evenly between the row and column
axes; within an axis, consecutive dimension pairs are rotated by
``position * base^(-2j/m)``.  An odd per-axis trailing dimension passes
through unrotated.
"""

from __future__ import annotations

import torch


def _rotate_half(x: torch.Tensor, pos: torch.Tensor, base: float) -> torch.Tensor:
    """Rotate consecutive pairs of the last dim by pos-dependent angles.

    x: (..., N, m);  pos: (N,) float.
    """
    m = x.shape[-1]
    pairs = m // 2
    if pairs == 0:
        return x
    j = torch.arange(pairs, dtype=x.dtype, device=x.device)
    theta = base ** (-2.0 * j / m)
    ang = pos[:, None] * theta[None, :]
    cos, sin = ang.cos(), ang.sin()
    x1 = x[..., 0 : 2 * pairs : 2]
    x2 = x[..., 1 : 2 * pairs : 2]
    out = torch.empty_like(x)
    out[..., 0 : 2 * pairs : 2] = x1 * cos - x2 * sin
    out[..., 1 : 2 * pairs : 2] = x1 * sin + x2 * cos
    if m > 2 * pairs:
        out[..., 2 * pairs :] = x[..., 2 * pairs :]
    return out


def apply_rope_2d(x: torch.Tensor, positions: torch.Tensor, base: float = 100.0) -> torch.Tensor:
    """Apply 2D RoPE to per-head projections.

    x: (heads, N, head_dim); positions: (N, 2) integer (row, col).
    The first half of head_dim rotates with the row index, the second with
    the column index.
    """
    hd = x.shape[-1]
    half = hd // 2
    pos = positions.to(x.dtype)
    out = torch.empty_like(x)
    out[..., :half] = _rotate_half(x[..., :half], pos[:, 0], base)
    out[..., half:] = _rotate_half(x[..., half:], pos[:, 1], base)
    return out
