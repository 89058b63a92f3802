"""Invertible pixel-permutation transforms used by the transformed training branch.

Every transform works on numpy arrays laid out ``H x W`` or ``H x W x C`` and on
torch tensors laid out ``... x H x W`` (the usual NCHW convention).
"""
from __future__ import annotations

from enum import Enum
from typing import Sequence, Tuple, Union

import numpy as np
import torch

Array = Union[np.ndarray, torch.Tensor]


class TransformKind(str, Enum):
    IDENTITY = "identity"
    ROT90CW = "rot90cw"
    ROT180 = "rot180"
    ROT270CW = "rot270cw"
    HFLIP = "hflip"
    VFLIP = "vflip"

    @property
    def inverse(self) -> "TransformKind":
        return _INVERSE.get(self, self)

    @property
    def is_rotation(self) -> bool:
        return self in (TransformKind.ROT90CW, TransformKind.ROT180, TransformKind.ROT270CW)


_INVERSE = {
    TransformKind.ROT90CW: TransformKind.ROT270CW,
    TransformKind.ROT270CW: TransformKind.ROT90CW,
}

# number of counter-clockwise quarter turns, as np.rot90/torch.rot90 count them
_CCW_TURNS = {
    TransformKind.ROT90CW: -1,
    TransformKind.ROT180: 2,
    TransformKind.ROT270CW: 1,
}


def _spatial_axes(x: Array, axes: Sequence[int] | None) -> Tuple[int, int]:
    if axes is not None:
        return tuple(axes)  # type: ignore[return-value]
    if isinstance(x, torch.Tensor):
        return (-2, -1)
    if x.ndim not in (2, 3):
        raise ValueError(f"expected a 2D or 3D array, got shape {x.shape}")
    return (0, 1)


def apply_transform(x: Array, kind: TransformKind | str, axes: Sequence[int] | None = None) -> Array:
    """Apply ``kind`` to the spatial axes of ``x``.

    Rotations require square spatial dims; use :func:`pad_to_square` first otherwise.
    """
    kind = TransformKind(kind)
    ax = _spatial_axes(x, axes)
    h, w = x.shape[ax[0]], x.shape[ax[1]]
    if kind.is_rotation and h != w:
        raise ValueError(f"rotation {kind.value} needs a square image, got {h}x{w}")

    if kind is TransformKind.IDENTITY:
        return x.clone() if isinstance(x, torch.Tensor) else x.copy()
    if isinstance(x, torch.Tensor):
        if kind is TransformKind.HFLIP:
            return torch.flip(x, dims=(ax[1],))
        if kind is TransformKind.VFLIP:
            return torch.flip(x, dims=(ax[0],))
        return torch.rot90(x, _CCW_TURNS[kind], dims=ax)
    if kind is TransformKind.HFLIP:
        return np.ascontiguousarray(np.flip(x, axis=ax[1]))
    if kind is TransformKind.VFLIP:
        return np.ascontiguousarray(np.flip(x, axis=ax[0]))
    return np.ascontiguousarray(np.rot90(x, _CCW_TURNS[kind], axes=ax))


def invert_transform(x: Array, kind: TransformKind | str, axes: Sequence[int] | None = None) -> Array:
    return apply_transform(x, TransformKind(kind).inverse, axes)


def pad_to_square(x: Array, axes: Sequence[int] | None = None) -> Tuple[Array, Tuple[int, int]]:
    """Zero-pad the bottom/right of ``x`` so its spatial dims are equal.

    Returns the padded array and the original ``(h, w)`` for :func:`crop_to`.
    """
    ax = _spatial_axes(x, axes)
    h, w = x.shape[ax[0]], x.shape[ax[1]]
    n = max(h, w)
    if h == w:
        return x, (h, w)
    if isinstance(x, torch.Tensor):
        ndim = x.dim()
        a0, a1 = ax[0] % ndim, ax[1] % ndim
        out = x.new_zeros([n if i in (a0, a1) else s for i, s in enumerate(x.shape)])
        idx = [slice(None)] * ndim
        idx[a0], idx[a1] = slice(0, h), slice(0, w)
        out[tuple(idx)] = x
        return out, (h, w)
    pad = [(0, 0)] * x.ndim
    pad[ax[0]] = (0, n - h)
    pad[ax[1]] = (0, n - w)
    return np.pad(x, pad), (h, w)


def crop_to(x: Array, size: Tuple[int, int], axes: Sequence[int] | None = None) -> Array:
    ax = _spatial_axes(x, axes)
    ndim = x.dim() if isinstance(x, torch.Tensor) else x.ndim
    idx = [slice(None)] * ndim
    idx[ax[0] % ndim] = slice(0, size[0])
    idx[ax[1] % ndim] = slice(0, size[1])
    return x[tuple(idx)]


def apply_padded(x: Array, kind: TransformKind | str, axes: Sequence[int] | None = None) -> Tuple[Array, Tuple[int, int]]:
    """Pad to square (if needed) and transform; pair with :func:`invert_padded`."""
    padded, size = pad_to_square(x, axes)
    return apply_transform(padded, kind, axes), size


def invert_padded(x: Array, kind: TransformKind | str, size: Tuple[int, int], axes: Sequence[int] | None = None) -> Array:
    return crop_to(invert_transform(x, kind, axes), size, axes)
