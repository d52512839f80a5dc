"""Synthetic part-based "faces" with identity labels and per-part masks.

Each image is a faint background plus one blob per part.  An identity fixes
every part's brightness and size; each sample jitters the part centres and
adds Gaussian noise.  A part's mask is the set of pixels where its profile is
at or above half of its maximum.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ParseError
from .rng import stream

__all__ = [
    "PartSpec",
    "DatasetSpec",
    "SynthSample",
    "DEFAULT_PARTS",
    "validate",
    "generate",
    "split",
    "to_arrays",
    "checksum",
    "save_dataset",
    "load_dataset",
]

PROFILES = ("gaussian", "disk")
BACKGROUND = 0.1
INTENSITY_RANGE = (0.35, 1.0)
SCALE_RANGE = (0.9, 1.1)


@dataclass(frozen=True)
class PartSpec:
    """One part at normalized ``center = (u, v)``, u across and v down."""

    name: str
    center: tuple
    radius: float
    profile: str = "gaussian"

    def __post_init__(self):
        u, v = self.center
        if not (0 <= u <= 1 and 0 <= v <= 1):
            raise DomainError(f"part {self.name}: center {self.center} outside [0,1]^2")
        if not self.radius > 0:
            raise DomainError(f"part {self.name}: radius must be > 0")
        if self.profile not in PROFILES:
            raise DomainError(f"part {self.name}: profile must be one of {PROFILES}")


DEFAULT_PARTS = (
    PartSpec("left_eye", (0.30, 0.30), 0.08, "gaussian"),
    PartSpec("right_eye", (0.70, 0.30), 0.08, "gaussian"),
    PartSpec("nose", (0.50, 0.55), 0.07, "gaussian"),
    PartSpec("mouth", (0.50, 0.82), 0.08, "disk"),
)


@dataclass(frozen=True)
class DatasetSpec:
    n_identities: int = 10
    samples_per_identity: int = 200
    image_size: int = 56
    jitter_radius: float = 0.05
    noise_std: float = 0.05
    seed: int = 0

    @property
    def n_samples(self):
        return self.n_identities * self.samples_per_identity


@dataclass(frozen=True, eq=False)
class SynthSample:
    image: np.ndarray     # (1, H, W) in [0, 1]
    identity: int
    masks: np.ndarray     # (n_parts, H, W) bool


def validate(spec: DatasetSpec, parts=DEFAULT_PARTS):
    """Raise :class:`DomainError` unless masks stay disjoint under any jitter."""
    if spec.n_identities < 1 or spec.samples_per_identity < 1:
        raise DomainError("n_identities and samples_per_identity must be >= 1")
    if spec.image_size < 4:
        raise DomainError("image_size must be >= 4")
    if spec.jitter_radius < 0 or spec.noise_std < 0:
        raise DomainError("jitter_radius and noise_std must be >= 0")
    if not parts:
        raise DomainError("at least one part is required")
    names = [p.name for p in parts]
    if len(set(names)) != len(names):
        raise DomainError("duplicate part names")
    smax = SCALE_RANGE[1]
    for a in range(len(parts)):
        for b in range(a + 1, len(parts)):
            pa, pb = parts[a], parts[b]
            dist = math.dist(pa.center, pb.center)
            need = smax * (pa.radius + pb.radius) + 2 * spec.jitter_radius
            if dist <= need:
                raise DomainError(
                    f"parts {pa.name} and {pb.name} may overlap: centre distance {dist:.3f} "
                    f"<= {need:.3f} (radii, scale and jitter {spec.jitter_radius})"
                )
    for p in parts:
        min_px = SCALE_RANGE[0] * p.radius * spec.image_size
        if min_px < 0.5:
            raise DomainError(f"part {p.name} is smaller than a pixel at size {spec.image_size}")


def _signature(spec, n_parts, identity):
    rng = stream(spec.seed, "identity", identity)
    intensity = rng.uniform(*INTENSITY_RANGE, size=n_parts)
    scale = rng.uniform(*SCALE_RANGE, size=n_parts)
    return intensity, scale


def _render(spec, parts, intensity, scale, offsets, noise_rng):
    n = spec.image_size
    grid = (np.arange(n) + 0.5) / n
    uu, vv = grid[None, :], grid[:, None]
    image = np.full((n, n), BACKGROUND)
    masks = np.zeros((len(parts), n, n), dtype=bool)
    for k, part in enumerate(parts):
        cu = part.center[0] + offsets[k, 0]
        cv = part.center[1] + offsets[k, 1]
        rad = part.radius * scale[k]
        d2 = ((uu - cu) ** 2 + (vv - cv) ** 2) / rad ** 2
        if part.profile == "gaussian":
            prof = np.exp(-math.log(2.0) * d2)
        else:
            prof = (d2 <= 1.0).astype(np.float64)
        image += intensity[k] * prof
        masks[k] = d2 <= 1.0
        if not masks[k].any():
            # sub-pixel part: mark the pixel holding its centre
            masks[k, min(int(cv * n), n - 1), min(int(cu * n), n - 1)] = True
    image = np.clip(image, 0.0, 1.0)
    if spec.noise_std > 0:
        image = np.clip(image + noise_rng.normal(0.0, spec.noise_std, size=image.shape), 0.0, 1.0)
    # 8-bit grey levels, as stored by real image files
    image = np.round(image * 255.0) / 255.0
    return image[None], masks


def _jitter(rng, n_parts, radius):
    if radius == 0:
        return np.zeros((n_parts, 2))
    r = radius * np.sqrt(rng.uniform(size=n_parts))
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n_parts)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def generate_one(spec: DatasetSpec, parts, index):
    """Sample ``index`` of the dataset; depends only on ``(spec, parts, index)``."""
    identity = index // spec.samples_per_identity
    intensity, scale = _signature(spec, len(parts), identity)
    rng = stream(spec.seed, "sample", index)
    offsets = _jitter(rng, len(parts), spec.jitter_radius)
    image, masks = _render(spec, parts, intensity, scale, offsets, rng)
    return SynthSample(image=image, identity=identity, masks=masks)


def generate(spec: DatasetSpec, parts=DEFAULT_PARTS):
    """All ``n_identities * samples_per_identity`` samples, grouped by identity."""
    parts = tuple(parts)
    validate(spec, parts)
    return [generate_one(spec, parts, i) for i in range(spec.n_samples)]


def split(dataset, train_fraction, seed=0):
    """Identity-stratified split into ``(train, eval)`` lists.

    Within each identity ``round(fraction * n)`` samples go to train, kept
    between 1 and ``n - 1`` when the identity has at least two samples.
    """
    if not 0 < train_fraction < 1:
        raise DomainError(f"train_fraction must be in (0, 1), got {train_fraction}")
    by_id = {}
    for n, s in enumerate(dataset):
        by_id.setdefault(int(s.identity), []).append(n)
    train_idx, eval_idx = [], []
    for identity in sorted(by_id):
        members = np.asarray(by_id[identity])
        perm = members[stream(seed, "split", identity).permutation(len(members))]
        k = int(round(train_fraction * len(members)))
        if len(members) >= 2:
            k = min(max(k, 1), len(members) - 1)
        train_idx.extend(perm[:k].tolist())
        eval_idx.extend(perm[k:].tolist())
    if not train_idx or not eval_idx:
        raise DomainError(f"train_fraction {train_fraction} leaves one side empty")
    train_idx.sort()
    eval_idx.sort()
    return [dataset[i] for i in train_idx], [dataset[i] for i in eval_idx]


def to_arrays(samples):
    """Stack into ``(images (N,1,H,W), labels (N,), masks (N,K,H,W))``."""
    if not samples:
        raise DomainError("no samples")
    images = np.stack([s.image for s in samples])
    labels = np.array([s.identity for s in samples], dtype=np.intp)
    masks = np.stack([s.masks for s in samples])
    return images, labels, masks


# -- ECDS1 files ---------------------------------------------------------------

def _encode(samples, part_names):
    n = len(samples)
    _, h, w = samples[0].image.shape
    out = [f"ECDS1 {n} {h} {w} {len(part_names)}", "parts " + " ".join(part_names)]
    for s in samples:
        out.append(f"label {int(s.identity)}")
        out.extend(" ".join("%.4f" % v for v in row) for row in s.image[0].tolist())
        for mask in s.masks:
            out.extend("".join("1" if v else "0" for v in row) for row in mask.tolist())
    return ("\n".join(out) + "\n").encode("ascii")


def checksum(samples, part_names=tuple(p.name for p in DEFAULT_PARTS)):
    """SHA-256 of the ECDS1 encoding."""
    return hashlib.sha256(_encode(samples, part_names)).hexdigest()


def save_dataset(path, samples, part_names=tuple(p.name for p in DEFAULT_PARTS)):
    """Write an ECDS1 file and return its SHA-256.

    Layout: header ``ECDS1 n H W n_parts``, a ``parts`` line naming the masks,
    then per sample a ``label`` line, ``H`` rows of 4-decimal grey values and
    ``n_parts * H`` rows of 0/1 mask characters.
    """
    data = _encode(samples, list(part_names))
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load_dataset(path):
    """Read an ECDS1 file; returns ``(samples, part_names)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    lines = data.split(b"\n")
    offsets = [0]
    for line in lines[:-1]:
        offsets.append(offsets[-1] + len(line) + 1)

    def fail(msg, ln):
        raise ParseError(msg, offsets[ln] if ln < len(offsets) else len(data))

    head = lines[0].split()
    if len(head) != 5 or head[0] != b"ECDS1":
        fail("malformed header, expected 'ECDS1 n H W n_parts'", 0)
    try:
        n, h, w, n_parts = (int(t) for t in head[1:])
    except ValueError:
        fail("non-integer header field", 0)
    if len(lines) < 2 or not lines[1].startswith(b"parts"):
        fail("missing parts line", 1)
    part_names = [t.decode() for t in lines[1].split()[1:]]
    if len(part_names) != n_parts:
        fail(f"parts line names {len(part_names)} parts, header says {n_parts}", 1)
    per_sample = 1 + h + n_parts * h
    if len(lines) - 2 < n * per_sample:
        fail(f"truncated: expected {n} samples", len(lines) - 1)
    samples = []
    ln = 2
    for _ in range(n):
        tok = lines[ln].split()
        if len(tok) != 2 or tok[0] != b"label":
            fail("expected 'label <id>' line", ln)
        identity = int(tok[1])
        ln += 1
        try:
            rows = [[float(v) for v in lines[ln + r].split()] for r in range(h)]
        except ValueError:
            fail("non-numeric pixel value", ln)
        if any(len(r) != w for r in rows):
            fail(f"image row width differs from {w}", ln)
        image = np.round(np.array(rows) * 255.0) / 255.0
        ln += h
        masks = np.zeros((n_parts, h, w), dtype=bool)
        for k in range(n_parts):
            for r in range(h):
                row = lines[ln]
                if len(row) != w or row.strip(b"01"):
                    fail("mask row must be W characters of 0/1", ln)
                masks[k, r] = np.frombuffer(row, dtype=np.uint8) == ord("1")
                ln += 1
        samples.append(SynthSample(image=image[None], identity=identity, masks=masks))
    return samples, part_names
