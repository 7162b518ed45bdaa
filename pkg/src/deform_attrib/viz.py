"""Quiver plots of displacement fields and signed difference maps.

Quivers are written as SVG so arrow geometry can be read back: each arrow
is one ``<line>`` whose ``data-p`` / ``data-phi`` attributes carry the pixel
and its displacement. The viewBox puts pixel ``(row, col)`` at
``(x=col, y=row)``.

Difference maps use a diverging colormap centred on neutral gray: green
where the modification darkens the image, pink where it brightens it. The
two hues mirror each other channel-wise (``c -> 254 - c``), so negating a
map swaps green and pink exactly.
"""

from __future__ import annotations

import base64
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image as PILImage

NEUTRAL = 127
LEVELS = 127
# per-channel direction of the pink end; green is the mirror image
_PINK_DIR = np.array([1.0, -0.6, 0.55])


@dataclass
class QuiverStyle:
    scale: float = 1.0
    stride: int | None = None
    cmap: str = "viridis"
    max_length: float | None = None  # colour saturates here; default: longest arrow

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("arrow scale must be positive")
        if self.stride is not None and self.stride < 1:
            raise ValueError("stride must be >= 1")


def default_stride(shape) -> int:
    """Smallest stride giving at most 32 arrows along every axis."""
    return max(1, math.ceil(max(shape) / 32))


def _select_slice(image, field, slice_index):
    image = np.asarray(image)
    field = np.asarray(field)
    if image.ndim == 3:
        if slice_index is None:
            raise ValueError("3-D input needs a slice index")
        # in-plane components are (row, col) = components 1 and 2
        return image[slice_index], field[1:, slice_index]
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D or 3-D image, got {image.ndim}-D")
    return image, field


def _png_bytes(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    PILImage.fromarray(rgb).save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def _gray_rgb(image, lo=None, hi=None) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    lo = float(image.min()) if lo is None else lo
    hi = float(image.max()) if hi is None else hi
    scaled = np.clip((image - lo) / (hi - lo), 0, 1) if hi > lo else np.zeros_like(image)
    g = np.round(scaled * 255).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=-1)


def render_quiver(image, field, style: QuiverStyle | None = None, slice_index=None) -> str:
    """SVG of ``field`` drawn over ``image``.

    One arrow per ``stride``-th pixel ``p`` runs from ``p`` to
    ``p + scale * field(p)`` and is coloured by ``|field(p)|``.
    """
    style = style or QuiverStyle()
    image, field = _select_slice(image, field, slice_index)
    if field.shape != (2, *image.shape):
        raise ValueError(f"field {field.shape} does not match image {image.shape}")
    h, w = image.shape
    stride = style.stride or default_stride(image.shape)
    field = field.astype(np.float64)
    lengths = np.hypot(field[0], field[1])
    top = style.max_length if style.max_length is not None else float(lengths.max())
    cmap = colormaps[style.cmap]

    png = base64.b64encode(_png_bytes(_gray_rgb(image))).decode("ascii")
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" '
        f'viewBox="-0.5 -0.5 {w} {h}" width="{8 * w}" height="{8 * h}" '
        f'data-scale="{style.scale!r}" data-stride="{stride}">',
        '<defs><marker id="head" viewBox="0 0 10 10" refX="10" refY="5" markerWidth="4" '
        'markerHeight="4" orient="auto-start-reverse"><path d="M0,0 L10,5 L0,10 z" '
        'fill="context-stroke"/></marker></defs>',
        f'<image x="-0.5" y="-0.5" width="{w}" height="{h}" preserveAspectRatio="none" '
        f'style="image-rendering:pixelated" xlink:href="data:image/png;base64,{png}"/>',
        '<g stroke-width="0.15" stroke-linecap="round">',
    ]
    for r in range(0, h, stride):
        for c in range(0, w, stride):
            dr, dc = float(field[0, r, c]), float(field[1, r, c])
            y2 = r + style.scale * dr
            x2 = c + style.scale * dc
            t = lengths[r, c] / top if top > 0 else 0.0
            rgba = cmap(min(1.0, t))
            color = "#{:02x}{:02x}{:02x}".format(*(int(round(255 * v)) for v in rgba[:3]))
            head = ' marker-end="url(#head)"' if (dr or dc) else ""
            out.append(
                f'<line x1="{c}" y1="{r}" x2="{x2!r}" y2="{y2!r}" stroke="{color}"{head} '
                f'data-p="{r},{c}" data-phi="{dr!r},{dc!r}"/>'
            )
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def difference_rgb(diff, percentile: float = 99.0) -> np.ndarray:
    """Diverging uint8 RGB rendering of a signed map.

    Magnitudes saturate at the given percentile of ``|diff|``; an all-zero
    map renders as uniform neutral gray.
    """
    d = np.asarray(diff, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise ValueError("difference map contains non-finite values")
    top = float(np.percentile(np.abs(d), percentile)) if d.size else 0.0
    if top > 0:
        level = np.round(np.clip(np.abs(d) / top, 0, 1) * LEVELS)
    else:
        level = np.zeros_like(d)
    offsets = np.round(level[..., None] * np.abs(_PINK_DIR)) * np.sign(_PINK_DIR)
    sign = np.sign(d)[..., None]
    rgb = NEUTRAL + sign * offsets
    return rgb.astype(np.uint8)


def swap_hues(rgb: np.ndarray) -> np.ndarray:
    """Turn green pixels into the equally strong pink and vice versa."""
    return (2 * NEUTRAL - rgb.astype(np.int16)).astype(np.uint8)


def render_difference(diff, path=None, percentile: float = 99.0) -> np.ndarray:
    """Render a difference map (middle slice for 3-D); optionally save as PNG."""
    d = np.asarray(diff)
    if d.ndim == 3:
        d = d[d.shape[0] // 2]
    rgb = difference_rgb(d, percentile)
    if path is not None:
        Path(path).write_bytes(_png_bytes(rgb))
    return rgb


def save_gray_png(path, image, lo=0.0, hi=1.0) -> None:
    Path(path).write_bytes(_png_bytes(_gray_rgb(image, lo, hi)))


def side_by_side(image, modified, diff, path=None, percentile: float = 99.0) -> np.ndarray:
    """Original, modified image and difference map in one row."""
    lo = float(min(np.min(image), np.min(modified)))
    hi = float(max(np.max(image), np.max(modified)))
    gap = np.full((image.shape[0], 2, 3), 255, dtype=np.uint8)
    panel = np.concatenate(
        [_gray_rgb(image, lo, hi), gap, _gray_rgb(modified, lo, hi), gap,
         difference_rgb(diff, percentile)], axis=1,
    )
    if path is not None:
        Path(path).write_bytes(_png_bytes(panel))
    return panel


def parse_quiver(svg: str) -> list[dict]:
    """Arrows of an SVG written by :func:`render_quiver`."""
    import xml.etree.ElementTree as ET

    root = ET.fromstring(svg)
    arrows = []
    for el in root.iter("{http://www.w3.org/2000/svg}line"):
        r, c = (int(v) for v in el.get("data-p").split(","))
        dr, dc = (float(v) for v in el.get("data-phi").split(","))
        arrows.append({
            "p": (r, c), "phi": (dr, dc),
            "start": (float(el.get("y1")), float(el.get("x1"))),
            "end": (float(el.get("y2")), float(el.get("x2"))),
            "stroke": el.get("stroke"),
        })
    return arrows
