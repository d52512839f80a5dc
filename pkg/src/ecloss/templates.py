"""Activation templates: one-peak, two-peak and negative grids.

A template is an ``height x width`` grid matching the spatial size of the
constrained feature map.  Coordinates are zero-based ``(row, col)``.

Template kinds are plain tuples::

    ("negative",)
    ("one_peak", i, j)
    ("two_peak", i1, j1, i2, j2)     # (i1, j1) < (i2, j2) in row-major order
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from math import comb

import numpy as np

from .errors import DomainError, ParseError

__all__ = [
    "TemplateParams",
    "ActivationTemplate",
    "TemplateSet",
    "make_one_peak",
    "make_negative",
    "combine_two_peak",
    "build_full_set",
    "subsample_even",
    "full_set_size",
    "serialize",
    "deserialize",
    "save",
    "load",
]

NEGATIVE = ("negative",)


@dataclass(frozen=True)
class TemplateParams:
    height: int
    width: int
    tau: float = 1e-3
    radius: float = 4.0

    def __post_init__(self):
        if int(self.height) != self.height or self.height < 1:
            raise DomainError(f"height must be a positive integer, got {self.height!r}")
        if int(self.width) != self.width or self.width < 1:
            raise DomainError(f"width must be a positive integer, got {self.width!r}")
        if not self.tau > 0:
            raise DomainError(f"tau must be > 0, got {self.tau!r}")
        if not self.radius > 0:
            raise DomainError(f"radius must be > 0, got {self.radius!r}")

    @property
    def shape(self):
        return (self.height, self.width)


@dataclass(frozen=True, eq=False)
class ActivationTemplate:
    values: np.ndarray
    kind: tuple

    @property
    def peaks(self):
        """Peak coordinates as a list of ``(i, j)`` pairs."""
        k = self.kind
        return [tuple(k[n:n + 2]) for n in range(1, len(k), 2)]

    def __eq__(self, other):
        if not isinstance(other, ActivationTemplate):
            return NotImplemented
        return self.kind == other.kind and np.array_equal(self.values, other.values)

    __hash__ = None


def _one_peak_values(params, i, j):
    u = np.arange(params.height, dtype=np.float64)[:, None]
    v = np.arange(params.width, dtype=np.float64)[None, :]
    dist = np.sqrt((u - i) ** 2 + (v - j) ** 2)
    return params.tau * np.maximum(1.0 - dist / params.radius, -1.0)


def _check_coord(params, peak):
    i, j = peak
    if not (0 <= i < params.height and 0 <= j < params.width):
        raise DomainError(f"peak {peak!r} outside {params.height}x{params.width} grid")
    return int(i), int(j)


def _values_for_kind(params, kind):
    tag = kind[0]
    if tag == "negative":
        return np.full(params.shape, -params.tau)
    if tag == "one_peak":
        i, j = _check_coord(params, kind[1:3])
        return _one_peak_values(params, i, j)
    if tag == "two_peak":
        a = _check_coord(params, kind[1:3])
        b = _check_coord(params, kind[3:5])
        if a == b:
            raise DomainError(f"two-peak template with identical peaks {a!r}")
        return np.maximum(_one_peak_values(params, *a), _one_peak_values(params, *b))
    raise DomainError(f"unknown template kind {kind!r}")


def _frozen(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def make_one_peak(params: TemplateParams, peak) -> ActivationTemplate:
    """Template with value ``tau`` at ``peak`` decaying linearly to ``-tau``.

    The value at ``(u, v)`` is ``tau * max(1 - ||(u, v) - peak|| / radius, -1)``.
    """
    i, j = _check_coord(params, peak)
    return ActivationTemplate(_frozen(_one_peak_values(params, i, j)), ("one_peak", i, j))


def make_negative(params: TemplateParams) -> ActivationTemplate:
    return ActivationTemplate(_frozen(np.full(params.shape, -params.tau)), NEGATIVE)


def combine_two_peak(a: ActivationTemplate, b: ActivationTemplate) -> ActivationTemplate:
    """Elementwise maximum of two one-peak templates.

    The resulting kind lists the peaks in row-major order, so the operation is
    commutative down to the kind tag.
    """
    if a.kind[0] != "one_peak" or b.kind[0] != "one_peak":
        raise DomainError("combine_two_peak expects two one-peak templates")
    if a.values.shape != b.values.shape:
        raise DomainError(f"shape mismatch {a.values.shape} vs {b.values.shape}")
    pa, pb = tuple(a.kind[1:]), tuple(b.kind[1:])
    if pa == pb:
        raise DomainError(f"degenerate two-peak template at {pa!r}")
    first, second = sorted((pa, pb))
    return ActivationTemplate(_frozen(np.maximum(a.values, b.values)), ("two_peak", *first, *second))


class TemplateSet:
    """Ordered, immutable collection of templates with a uniform prior.

    ``values`` is a read-only ``(count, height, width)`` array; ``kinds`` the
    matching tuple of kind tags.
    """

    def __init__(self, params: TemplateParams, kinds, values):
        kinds = tuple(tuple(k) for k in kinds)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (len(kinds), params.height, params.width):
            raise DomainError(
                f"values shape {values.shape} does not match "
                f"{len(kinds)} templates of {params.height}x{params.width}"
            )
        if sum(k[0] == "negative" for k in kinds) != 1:
            raise DomainError("a template set holds exactly one negative template")
        if len(set(kinds)) != len(kinds):
            raise DomainError("duplicate template kinds")
        self.params = params
        self.kinds = kinds
        self.values = _frozen(values)

    def __len__(self):
        return len(self.kinds)

    def __getitem__(self, n):
        return ActivationTemplate(self.values[n], self.kinds[n])

    def __iter__(self):
        return (self[n] for n in range(len(self)))

    def __eq__(self, other):
        if not isinstance(other, TemplateSet):
            return NotImplemented
        return (
            self.params == other.params
            and self.kinds == other.kinds
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None

    def __repr__(self):
        p = self.params
        return f"TemplateSet({len(self)} templates, {p.height}x{p.width}, tau={p.tau}, r={p.radius})"

    @property
    def templates(self):
        return list(self)

    @property
    def prior(self):
        return 1.0 / len(self)

    @property
    def matrix(self):
        """Templates flattened to a ``(count, height*width)`` matrix."""
        return self.values.reshape(len(self), -1)

    def counts(self):
        """Number of templates of each kind."""
        out = {"one_peak": 0, "two_peak": 0, "negative": 0}
        for k in self.kinds:
            out[k[0]] += 1
        return out


def full_set_size(height, width):
    n = height * width
    return n + comb(n, 2) + 1


def _one_peak_stack(params):
    h, w = params.shape
    u = np.arange(h, dtype=np.float64)
    v = np.arange(w, dtype=np.float64)
    # (peak_i, peak_j, u, v)
    du = (u[None, None, :, None] - u[:, None, None, None]) ** 2
    dv = (v[None, None, None, :] - v[None, :, None, None]) ** 2
    dist = np.sqrt(du + dv)
    stack = params.tau * np.maximum(1.0 - dist / params.radius, -1.0)
    return stack.reshape(h * w, h, w)


def _one_peak_kinds(params):
    return [("one_peak", i, j) for i in range(params.height) for j in range(params.width)]


def _two_peak_pairs(n):
    a, b = np.triu_indices(n, k=1)
    return a, b


def build_full_set(params: TemplateParams) -> TemplateSet:
    """All one-peak templates, all unordered two-peak pairs, one negative.

    Order: one-peak in row-major peak order, two-peak pairs in lexicographic
    order of their flat peak indices, negative last.
    """
    ones = _one_peak_stack(params)
    n = len(ones)
    a, b = _two_peak_pairs(n)
    twos = np.maximum(ones[a], ones[b])
    w = params.width
    kinds = _one_peak_kinds(params)
    kinds += [("two_peak", p // w, p % w, q // w, q % w) for p, q in zip(a.tolist(), b.tolist())]
    kinds.append(NEGATIVE)
    neg = np.full((1, *params.shape), -params.tau)
    return TemplateSet(params, kinds, np.concatenate([ones, twos, neg]))


def _stride_pick(n_items, n_pick, seed):
    """``n_pick`` indices spread at uniform stride over ``range(n_items)``."""
    if n_pick <= 0:
        return np.zeros(0, dtype=np.intp)
    stride = n_items // n_pick
    offset = seed % stride
    return offset + stride * np.arange(n_pick)


def subsample_even(full: TemplateSet, target_count: int, seed: int = 0) -> TemplateSet:
    """Reduce a template set to ``target_count`` templates.

    Keeps the negative template and, when they fit, every one-peak template;
    the remaining slots are filled with two-peak templates taken at a uniform
    stride over the canonical two-peak order.  ``seed`` only shifts the
    starting offset within one stride, so the result is deterministic.
    """
    if target_count < 2:
        raise DomainError(f"target_count must be >= 2, got {target_count}")
    if target_count > len(full):
        raise DomainError(f"target_count {target_count} exceeds set size {len(full)}")
    if target_count == len(full):
        return full
    by_kind = {"one_peak": [], "two_peak": [], "negative": []}
    for n, k in enumerate(full.kinds):
        by_kind[k[0]].append(n)
    ones = by_kind["one_peak"]
    twos = by_kind["two_peak"]
    if target_count >= len(ones) + 1:
        picked_twos = [twos[n] for n in _stride_pick(len(twos), target_count - len(ones) - 1, seed)]
        keep = ones + picked_twos + by_kind["negative"]
    else:
        picked_ones = [ones[n] for n in _stride_pick(len(ones), target_count - 1, seed)]
        keep = picked_ones + by_kind["negative"]
    keep = np.asarray(keep, dtype=np.intp)
    return TemplateSet(full.params, [full.kinds[n] for n in keep], full.values[keep])


def default_set(height=14, width=14, tau=1e-3, radius=4.0, count=400, seed=0) -> TemplateSet:
    """Build-and-subsample shortcut used by the trainer and CLI."""
    params = TemplateParams(height, width, tau, radius)
    full = build_full_set(params)
    return subsample_even(full, count, seed)


# -- serialization -----------------------------------------------------------

_MAGIC = "ECT1"
_TAGS = {"negative": ("neg", 0), "one_peak": ("one", 2), "two_peak": ("two", 4)}
_KINDS = {tag: (kind, n) for kind, (tag, n) in _TAGS.items()}


def serialize(tset: TemplateSet) -> bytes:
    """Text encoding: ``ECT1 h w count tau r`` then one line per template.

    Each template line holds a kind tag, its peak coordinates and the
    row-major values at 9 significant digits.
    """
    p = tset.params
    out = io.StringIO()
    out.write(f"{_MAGIC} {p.height} {p.width} {len(tset)} {float(p.tau)!r} {float(p.radius)!r}\n")
    for kind, vals in zip(tset.kinds, tset.matrix):
        tag, _ = _TAGS[kind[0]]
        out.write(" ".join([tag, *map(str, kind[1:]), *("%.9g" % v for v in vals)]))
        out.write("\n")
    return out.getvalue().encode("ascii")


def deserialize(data: bytes) -> TemplateSet:
    """Inverse of :func:`serialize`.

    Values are regenerated from the kind tags and header parameters, and the
    stored decimals are checked against them, so the round trip is bit-exact.
    """
    if not data:
        raise ParseError("empty template stream", 0)
    lines = data.split(b"\n")
    offsets = [0]
    for line in lines[:-1]:
        offsets.append(offsets[-1] + len(line) + 1)
    head = lines[0].split()
    if len(head) != 6 or head[0] != _MAGIC.encode():
        raise ParseError("malformed header, expected 'ECT1 h w count tau r'", 0)
    try:
        h, w, count = int(head[1]), int(head[2]), int(head[3])
        tau, radius = float(head[4]), float(head[5])
        params = TemplateParams(h, w, tau, radius)
    except (ValueError, DomainError) as exc:
        raise ParseError(f"invalid header field: {exc}", 0) from None
    body = lines[1:]
    if body and body[-1] == b"":
        body = body[:-1]
    kinds, values = [], []
    for n, line in enumerate(body):
        off = offsets[n + 1]
        if n >= count:
            raise ParseError(f"more than the declared {count} templates", off)
        tok = line.split()
        if not tok or tok[0].decode("ascii", "replace") not in _KINDS:
            raise ParseError(f"unknown kind tag in template {n}", off)
        kind_name, ncoord = _KINDS[tok[0].decode()]
        try:
            coords = tuple(int(t) for t in tok[1:1 + ncoord])
            vals = np.array([float(t) for t in tok[1 + ncoord:]])
        except ValueError:
            raise ParseError(f"non-numeric field in template {n}", off) from None
        if len(coords) != ncoord or vals.size != h * w:
            raise ParseError(
                f"dimension mismatch in template {n}: expected {h * w} values, got {vals.size}", off
            )
        kind = (kind_name, *coords)
        try:
            exact = _values_for_kind(params, kind)
        except DomainError as exc:
            raise ParseError(str(exc), off) from None
        if not np.allclose(vals, exact.ravel(), rtol=1e-8, atol=1e-9 * tau):
            raise ParseError(f"values of template {n} disagree with kind {kind!r}", off)
        kinds.append(kind)
        values.append(exact)
    if len(kinds) < count:
        raise ParseError(f"truncated: header declares {count} templates, found {len(kinds)}", len(data))
    try:
        return TemplateSet(params, kinds, np.stack(values) if values else np.zeros((0, h, w)))
    except DomainError as exc:
        raise ParseError(str(exc), len(data)) from None


def save(tset: TemplateSet, path):
    with open(path, "wb") as fh:
        fh.write(serialize(tset))


def load(path) -> TemplateSet:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
