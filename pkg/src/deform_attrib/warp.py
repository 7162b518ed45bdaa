"""Resampling an image through a displacement field.

Fields are in pixel units with the component axis ordered like the array
axes: (row, column) for 2-D and (depth, row, column) for 3-D. An output
pixel ``p`` takes the value of the input at ``p + field[:, p]``, using
bilinear (2-D) or trilinear (3-D) interpolation. Interpolation corners that
fall outside the grid contribute 0, so a sample point half a pixel past the
border gets half the border value rather than a hard cutoff.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import torch

from .diffcore import ShapeError


@dataclass
class Image:
    """An intensity grid with its class label (0 healthy, 1 diseased)."""

    data: np.ndarray
    label: int
    subject_id: str = ""

    def __post_init__(self):
        if self.data.ndim not in (2, 3):
            raise ValueError(f"Image must be 2-D or 3-D, got {self.data.ndim}-D")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


def _as_batched(image: torch.Tensor, field: torch.Tensor):
    """Bring image to (N, C, *S) and field to (N, D, *S)."""
    if image.dim() in (2, 3) and field.dim() == image.dim() + 1:
        return image[None, None], field[None], True
    if image.dim() == field.dim():
        return image, field, False
    raise ShapeError(
        f"apply_deformation: cannot pair image {tuple(image.shape)} with field {tuple(field.shape)}"
    )


def apply_deformation(image, field):
    """Warp ``image`` by ``field``: ``out(p) = image(p + field(p))``.

    Accepts either an unbatched pair (image ``(*S)``, field ``(D, *S)``) or
    batched tensors (image ``(N, C, *S)``, field ``(N, D, *S)``). Numpy
    inputs give a numpy result; tensors stay on the autograd graph.
    """
    as_numpy = isinstance(image, np.ndarray) or isinstance(field, np.ndarray)
    img = torch.as_tensor(image)
    fld = torch.as_tensor(field)
    if fld.dtype != img.dtype:
        fld = fld.to(img.dtype)
    img_b, fld_b, unbatched = _as_batched(img, fld)

    spatial = tuple(img_b.shape[2:])
    nd = len(spatial)
    if nd not in (2, 3):
        raise ShapeError(f"apply_deformation: only 2-D and 3-D images, got spatial {spatial}")
    if fld_b.shape[1] != nd:
        raise ShapeError(
            f"apply_deformation: field has {fld_b.shape[1]} components for a {nd}-D image"
        )
    if tuple(fld_b.shape[2:]) != spatial or fld_b.shape[0] != img_b.shape[0]:
        raise ShapeError(
            f"apply_deformation: image {tuple(img_b.shape)} and field {tuple(fld_b.shape)} differ"
        )

    out = _resample(img_b, fld_b)
    if unbatched:
        out = out[0, 0]
    if as_numpy:
        return out.detach().numpy()
    return out


def _resample(img: torch.Tensor, fld: torch.Tensor) -> torch.Tensor:
    n, c = img.shape[:2]
    spatial = img.shape[2:]
    nd = len(spatial)
    grids = torch.meshgrid(
        *[torch.arange(s, dtype=fld.dtype) for s in spatial], indexing="ij"
    )
    coords = [grids[d] + fld[:, d] for d in range(nd)]  # each (N, *S)
    base = [torch.floor(q) for q in coords]
    frac = [q - b for q, b in zip(coords, base)]
    base = [b.long() for b in base]

    flat = img.reshape(n, c, -1)
    strides = [int(np.prod(spatial[d + 1:])) for d in range(nd)]
    out = torch.zeros_like(img).reshape(n, c, -1)
    for corner in itertools.product((0, 1), repeat=nd):
        weight = torch.ones_like(frac[0])
        valid = torch.ones_like(base[0], dtype=torch.bool)
        index = torch.zeros_like(base[0])
        for d, offset in enumerate(corner):
            idx = base[d] + offset
            weight = weight * (frac[d] if offset else 1 - frac[d])
            valid = valid & (idx >= 0) & (idx < spatial[d])
            index = index + idx.clamp(0, spatial[d] - 1) * strides[d]
        index = index.reshape(n, 1, -1).expand(n, c, -1)
        vals = torch.gather(flat, 2, index)
        w = (weight * valid).reshape(n, 1, -1)
        out = out + w * vals
    return out.reshape(img.shape)


def difference_map(x1, x_hat0):
    """Signed change ``x_hat0 - x1`` produced by removing disease evidence."""
    if tuple(x1.shape) != tuple(x_hat0.shape):
        raise ShapeError(
            f"difference_map: shapes {tuple(x1.shape)} and {tuple(x_hat0.shape)} differ"
        )
    return x_hat0 - x1


def identity_field(spatial_shape, dtype=np.float32) -> np.ndarray:
    return np.zeros((len(spatial_shape), *spatial_shape), dtype=dtype)
