"""Differentiable tensor primitives used by the networks and losses.

Tensors are plain ``torch.Tensor`` objects; reverse-mode propagation is
torch's autograd. This module adds the pieces the rest of the package
relies on: shape-checked primitives that work for 2-D and 3-D images,
a ``backward`` that refuses to replay a consumed graph, input gradients
with create-graph semantics (for the gradient penalty), and the DFT1
binary tensor format.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

LEAKY_SLOPE = 0.2

DFT1_MAGIC = b"DFT1"
DFT1_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class GraphError(RuntimeError):
    """Backward requested on a graph that cannot (or can no longer) provide it."""


def _shape_fail(op: str, *tensors: torch.Tensor, detail: str = "") -> ShapeError:
    shapes = ", ".join(str(tuple(t.shape)) for t in tensors)
    msg = f"{op}: incompatible shapes {shapes}"
    if detail:
        msg += f" ({detail})"
    return ShapeError(msg)


def tensor(data, requires_grad: bool = False, dtype=torch.float32) -> torch.Tensor:
    return torch.tensor(np.asarray(data), dtype=dtype, requires_grad=requires_grad)


# -- forward primitives -----------------------------------------------------

def _spatial_ndim(x: torch.Tensor, op: str) -> int:
    nd = x.dim() - 2
    if nd not in (1, 2, 3):
        raise _shape_fail(op, x, detail="expected (N, C, *spatial) with 1-3 spatial dims")
    return nd


def conv(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
         stride: int = 1, padding: int = 0) -> torch.Tensor:
    """N-d cross-correlation; ``weight`` is (C_out, C_in, *kernel)."""
    nd = _spatial_ndim(x, "conv")
    if weight.dim() != nd + 2 or weight.shape[1] != x.shape[1]:
        raise _shape_fail("conv", x, weight, detail="weight must be (C_out, C_in, *kernel)")
    fn = {1: F.conv1d, 2: F.conv2d, 3: F.conv3d}[nd]
    return fn(x, weight, bias, stride=stride, padding=padding)


def conv_transpose(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
                   stride: int = 2, padding: int = 0) -> torch.Tensor:
    """Transposed convolution; ``weight`` is (C_in, C_out, *kernel)."""
    nd = _spatial_ndim(x, "conv_transpose")
    if weight.dim() != nd + 2 or weight.shape[0] != x.shape[1]:
        raise _shape_fail("conv_transpose", x, weight,
                          detail="weight must be (C_in, C_out, *kernel)")
    fn = {1: F.conv_transpose1d, 2: F.conv_transpose2d, 3: F.conv_transpose3d}[nd]
    return fn(x, weight, bias, stride=stride, padding=padding)


def upsample(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Nearest-neighbour upsampling of every spatial axis."""
    _spatial_ndim(x, "upsample")
    return F.interpolate(x, scale_factor=factor, mode="nearest")


def avg_pool(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    nd = _spatial_ndim(x, "avg_pool")
    if any(s % factor for s in x.shape[2:]):
        raise _shape_fail("avg_pool", x, detail=f"spatial dims not divisible by {factor}")
    fn = {1: F.avg_pool1d, 2: F.avg_pool2d, 3: F.avg_pool3d}[nd]
    return fn(x, factor)


def leaky_relu(x: torch.Tensor, slope: float = LEAKY_SLOPE) -> torch.Tensor:
    return F.leaky_relu(x, slope)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[1]:
        raise _shape_fail("linear", x, weight)
    return F.linear(x, weight, bias)


def _broadcastable(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise _shape_fail(op, a, b) from None


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcastable("add", a, b)
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcastable("mul", a, b)
    return a * b


def sum(x: torch.Tensor, axis=None) -> torch.Tensor:  # noqa: A001
    return x.sum() if axis is None else x.sum(dim=axis)


def mean(x: torch.Tensor, axis=None) -> torch.Tensor:
    if x.numel() == 0:
        raise _shape_fail("mean", x, detail="empty tensor")
    return x.mean() if axis is None else x.mean(dim=axis)


def abs(x: torch.Tensor) -> torch.Tensor:  # noqa: A001
    return x.abs()


def sqrt(x: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(x)


def norm(x: torch.Tensor, axis) -> torch.Tensor:
    """Euclidean norm over ``axis`` with a zero subgradient at the origin.

    ``torch.linalg.norm`` yields NaN gradients for all-zero vectors, which
    happen constantly here (identity fields, constant critics).
    """
    sq = (x * x).sum(dim=axis)
    nonzero = sq > 0
    safe = torch.where(nonzero, sq, torch.ones_like(sq))
    return torch.where(nonzero, torch.sqrt(safe), torch.zeros_like(sq))


def concatenate(tensors: Sequence[torch.Tensor], axis: int = 1) -> torch.Tensor:
    ref = tensors[0]
    for t in tensors[1:]:
        if t.dim() != ref.dim() or any(
            i != axis % ref.dim() and s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape))
        ):
            raise _shape_fail("concatenate", *tensors, detail=f"axis={axis}")
    return torch.cat(list(tensors), dim=axis)


def slice_axis(x: torch.Tensor, axis: int, start: int, stop: int) -> torch.Tensor:
    n = x.shape[axis]
    if not 0 <= start <= stop <= n:
        raise _shape_fail("slice", x, detail=f"[{start}:{stop}] on axis {axis} of size {n}")
    return x.narrow(axis, start, stop - start)


# -- graph control ----------------------------------------------------------

def backward(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf that requires gradients."""
    if loss.numel() != 1 or loss.dim() != 0:
        raise GraphError(f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise GraphError("backward: loss was not recorded on a graph")
    if getattr(loss, "_diffcore_consumed", False):
        raise GraphError("backward: graph already consumed; record the loss again")
    loss.backward()
    loss._diffcore_consumed = True


def input_gradient(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    """Gradient of scalar ``f(x)`` wrt ``x``, itself differentiable.

    ``x`` is detached and re-marked as a leaf, so callers may pass any tensor.
    """
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        y = f(x)
        if y.numel() != 1:
            raise GraphError("input_gradient: f must be scalar-valued")
        if not y.requires_grad:
            raise GraphError("input_gradient: f(x) does not depend on x through a recorded graph")
        (g,) = torch.autograd.grad(y, x, create_graph=True, allow_unused=True)
    if g is None:
        g = torch.zeros_like(x)
    return g


# -- DFT1 serialization -----------------------------------------------------
# layout: b"DFT1" | u8 version | u8 dtype code | u8 ndim | ndim x u32 LE dims | payload

def to_bytes(array) -> bytes:
    if isinstance(array, torch.Tensor):
        array = array.detach().cpu().numpy()
    array = np.asarray(array)
    if array.dtype.kind != "f":
        array = array.astype("<f4")
    dt = array.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise ValueError(f"DFT1: unsupported dtype {array.dtype}")
    if array.ndim > 255:
        raise ValueError("DFT1: too many dimensions")
    buf = io.BytesIO()
    buf.write(DFT1_MAGIC)
    buf.write(struct.pack("<BBB", DFT1_VERSION, _DTYPE_CODES[dt], array.ndim))
    buf.write(struct.pack(f"<{array.ndim}I", *array.shape))
    buf.write(np.ascontiguousarray(array, dtype=dt).tobytes())
    return buf.getvalue()


def from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != DFT1_MAGIC:
        raise ValueError("DFT1: bad magic")
    version, code, ndim = struct.unpack_from("<BBB", blob, 4)
    if version != DFT1_VERSION:
        raise ValueError(f"DFT1: unsupported version {version}")
    if code not in _CODE_DTYPES:
        raise ValueError(f"DFT1: unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}I", blob, 7)
    offset = 7 + 4 * ndim
    dt = _CODE_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(blob) - offset != expected:
        raise ValueError(f"DFT1: payload is {len(blob) - offset} bytes, expected {expected}")
    return np.frombuffer(blob, dtype=dt, offset=offset).reshape(dims).copy()


def save_tensor(path, array) -> None:
    Path(path).write_bytes(to_bytes(array))


def load_tensor(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())
