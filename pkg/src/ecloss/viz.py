"""Bilinear upsampling, heatmap overlays and binary PPM/PGM files."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ParseError

__all__ = [
    "HeatmapStyle",
    "JET",
    "bilinear_matrix",
    "upsample_bilinear",
    "colormap",
    "render_overlay",
    "to_bytes",
    "write_image",
    "read_image",
    "grid",
]


def bilinear_matrix(n_in, n_out):
    """``(n_out, n_in)`` interpolation weights, pixel-centre convention.

    Output pixel ``o`` samples source coordinate ``(o + 0.5) * n_in / n_out - 0.5``,
    clamped to ``[0, n_in - 1]`` (no corner alignment).
    """
    if n_out < n_in:
        raise DomainError(f"cannot downscale {n_in} -> {n_out}")
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample_bilinear(x, height, width):
    """Resize the last two axes of ``x`` to ``(height, width)``."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    if height < h or width < w:
        raise DomainError(f"cannot downscale {h}x{w} -> {height}x{width}")
    ry = bilinear_matrix(h, height)
    rx = bilinear_matrix(w, width)
    return ry @ x @ rx.T


@dataclass(frozen=True)
class HeatmapStyle:
    """Piecewise-linear colormap ``[(value, r, g, b), ...]`` and blend weight."""

    colormap: tuple
    overlay_alpha: float = 0.5

    def __post_init__(self):
        vals = [p[0] for p in self.colormap]
        if len(vals) < 2 or vals[0] != 0.0 or vals[-1] != 1.0:
            raise DomainError("colormap control points must span [0, 1]")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise DomainError("colormap control values must be strictly increasing")
        if not 0.0 <= self.overlay_alpha <= 1.0:
            raise DomainError("overlay_alpha must lie in [0, 1]")


JET = HeatmapStyle(
    colormap=(
        (0.0, 0.0, 0.0, 1.0),
        (0.25, 0.0, 1.0, 1.0),
        (0.5, 0.0, 1.0, 0.0),
        (0.75, 1.0, 1.0, 0.0),
        (1.0, 1.0, 0.0, 0.0),
    ),
    overlay_alpha=0.5,
)


def colormap(values, style=JET):
    """Map values in ``[0, 1]`` to RGB, shape ``values.shape + (3,)``."""
    pts = np.asarray(style.colormap, dtype=np.float64)
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.interp(v, pts[:, 0], pts[:, c]) for c in (1, 2, 3)], axis=-1)


def render_overlay(image, tmap, style=JET):
    """Blend a thresholded activation map onto a grayscale image.

    Pixels where the map is zero keep the image; elsewhere the colour for
    ``value / max`` is mixed in at ``style.overlay_alpha``.
    """
    img = np.asarray(image, dtype=np.float64)
    values = np.asarray(getattr(tmap, "values", tmap), dtype=np.float64)
    if img.ndim != 2 or img.shape != values.shape:
        raise DomainError(f"image {img.shape} and map {values.shape} must be equal 2-D shapes")
    out = np.repeat(img[..., None], 3, axis=-1)
    on = values > 0
    if on.any():
        colour = colormap(values / values.max(), style)
        a = style.overlay_alpha
        out[on] = a * colour[on] + (1.0 - a) * out[on]
    return out


def grid(images, columns, pad=1, fill=1.0):
    """Tile equally sized images (2-D or H x W x 3) into one mosaic."""
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise DomainError("no images to tile")
    shape = images[0].shape
    if any(im.shape != shape for im in images):
        raise DomainError("all tiles must share a shape")
    rows = -(-len(images) // columns)
    h, w = shape[:2]
    out = np.full((rows * (h + pad) - pad, columns * (w + pad) - pad, *shape[2:]), fill)
    for n, im in enumerate(images):
        r, c = divmod(n, columns)
        out[r * (h + pad):r * (h + pad) + h, c * (w + pad):c * (w + pad) + w] = im
    return out


def to_bytes(pixels):
    """Encode ``[0, 1]`` pixels as binary PGM (2-D) or PPM (H x W x 3)."""
    p = np.asarray(pixels, dtype=np.float64)
    if p.ndim == 2:
        magic = "P5"
    elif p.ndim == 3 and p.shape[2] == 3:
        magic = "P6"
    else:
        raise DomainError(f"expected H x W or H x W x 3 pixels, got {p.shape}")
    if np.any(~np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
        raise DomainError("pixel values must lie in [0, 1]")
    q = np.floor(p * 255.0 + 0.5).astype(np.uint8)
    header = f"{magic} {p.shape[1]} {p.shape[0]} 255\n".encode("ascii")
    return header + q.tobytes()


def write_image(pixels, path):
    data = to_bytes(pixels)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc.strerror or exc}") from exc


def read_image(path):
    """Read a binary PGM/PPM written by :func:`write_image`; values in ``[0, 1]``."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated header", pos)
        tokens.append(data[start:pos])
    pos += 1
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"unsupported magic {magic!r}", 0)
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ParseError("only maxval 255 is supported", 0)
    ch = 3 if magic == b"P6" else 1
    body = data[pos:pos + w * h * ch]
    if len(body) != w * h * ch:
        raise ParseError("truncated pixel data", len(data))
    arr = np.frombuffer(body, dtype=np.uint8).astype(np.float64) / 255.0
    return arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)
