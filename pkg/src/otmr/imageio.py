"""OTMR raster files, dataset manifests and the paired phantom generator.

OTMR layout (all little-endian)::

    offset  size  field
    0       4     magic b"OTMR"
    4       4     version (u32, currently 1)
    8       4     channels (u32)
    12      4     height (u32)
    16      4     width (u32)
    20      12    reserved, zero
    32      ...   float32 payload, channel-major then row-major: data[c, y, x]
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, StorageError, UnsupportedVersionError, ValidationError
from .warp import DeformationField, cosine_displacement, warp_image

MAGIC = b"OTMR"
VERSION = 1
HEADER = struct.Struct("<4sIIII12x")
assert HEADER.size == 32

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass
class RasterImage:
    """A ``(channels, height, width)`` float32 image with an optional role tag.

    One channel holds a magnitude image, two channels hold real and imaginary
    parts of a complex image.
    """

    data: np.ndarray
    role: str = ""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or data.shape[0] not in (1, 2):
            raise ValidationError(f"raster must be (1|2, H, W), got shape {data.shape}")
        self.data = data

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    def magnitude(self):
        if self.channels == 1:
            return np.abs(self.data[0])
        return np.hypot(self.data[0], self.data[1])


def write_raster(img, path):
    """Serialize ``img`` (a :class:`RasterImage` or array) to ``path``."""
    if not isinstance(img, RasterImage):
        img = RasterImage(img)
    if not np.isfinite(img.data).all():
        raise ValidationError("refusing to write non-finite raster values")
    header = HEADER.pack(MAGIC, VERSION, img.channels, img.height, img.width)
    payload = np.ascontiguousarray(img.data, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise StorageError(f"cannot write raster {path}: {exc}") from exc
    return path


def read_raster(path, role=""):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read raster {path}: {exc}") from exc
    if len(blob) < HEADER.size:
        raise FormatError(f"{path}: file shorter than the 32-byte header")
    magic, version, channels, height, width = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported OTMR version {version}")
    if channels not in (1, 2):
        raise FormatError(f"{path}: invalid channel count {channels}")
    expected = channels * height * width * 4
    if len(blob) - HEADER.size != expected:
        raise FormatError(f"{path}: payload is {len(blob) - HEADER.size} bytes, header implies {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=HEADER.size).reshape(channels, height, width)
    return RasterImage(data.astype(np.float32), role=role)


def write_field(field_, path):
    return write_raster(RasterImage(field_.to_array(), role="displacement"), path)


def read_field(path):
    img = read_raster(path)
    if img.channels != 2:
        raise FormatError(f"{path}: a displacement raster needs 2 channels")
    return DeformationField(img.data[0].astype(np.float64), img.data[1].astype(np.float64))


# --- manifests -------------------------------------------------------------


@dataclass
class DatasetManifest:
    """List of paired T1/T2 rasters with a split tag per pair.

    Paths are stored relative to the manifest's directory when possible.
    Entries may carry an optional ``disp_path`` pointing at the true
    displacement raster; it is used by evaluation only.
    """

    entries: list = field(default_factory=list)
    format_version: int = MANIFEST_VERSION
    root: Path = Path(".")

    def split(self, name):
        return [e for e in self.entries if e["split"] == name]

    def resolve(self, rel):
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def validate(self):
        if self.format_version != MANIFEST_VERSION:
            raise UnsupportedVersionError(f"unsupported manifest version {self.format_version}")
        seen = {}
        shape = None
        for e in self.entries:
            for key in ("t1_path", "t2_path", "split"):
                if key not in e:
                    raise FormatError(f"manifest entry missing {key!r}: {e}")
            if e["split"] not in SPLITS:
                raise FormatError(f"unknown split {e['split']!r}")
            pair = (e["t1_path"], e["t2_path"])
            if seen.setdefault(pair, e["split"]) != e["split"]:
                raise ValidationError(f"pair {pair} appears in splits {seen[pair]} and {e['split']}")
            for key in ("t1_path", "t2_path"):
                path = self.resolve(e[key])
                if not path.exists():
                    raise ValidationError(f"manifest references missing file {path}")
                with open(path, "rb") as fh:
                    hdr = fh.read(HEADER.size)
                if len(hdr) < HEADER.size:
                    raise FormatError(f"{path}: truncated header")
                _, _, _, h, w = HEADER.unpack(hdr)
                if shape is None:
                    shape = (h, w)
                elif (h, w) != shape:
                    raise ValidationError(f"{path} is {h}x{w}, expected {shape[0]}x{shape[1]}")
        return self

    def save(self, path):
        doc = {"format_version": self.format_version, "entries": self.entries}
        try:
            Path(path).write_text(json.dumps(doc, indent=2) + "\n")
        except OSError as exc:
            raise StorageError(f"cannot write manifest {path}: {exc}") from exc

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise StorageError(f"cannot read manifest {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not a valid manifest ({exc})") from exc
        if not isinstance(doc, dict) or "entries" not in doc:
            raise FormatError(f"{path}: manifest lacks an 'entries' list")
        return cls(list(doc["entries"]), int(doc.get("format_version", -1)), path.parent)


def load_split(manifest, split):
    """Stack one split into arrays ``t1``, ``t2`` of shape ``(N, H, W)``.

    Returns ``(t1, t2, fields)`` where ``fields`` is a list of
    :class:`DeformationField` or ``None`` when no displacement is recorded.
    """
    entries = manifest.split(split)
    t1 = [read_raster(manifest.resolve(e["t1_path"])).magnitude() for e in entries]
    t2 = [read_raster(manifest.resolve(e["t2_path"])).magnitude() for e in entries]
    fields = [read_field(manifest.resolve(e["disp_path"])) if e.get("disp_path") else None for e in entries]
    if not entries:
        return np.zeros((0, 0, 0), np.float32), np.zeros((0, 0, 0), np.float32), []
    return np.stack(t1).astype(np.float32), np.stack(t2).astype(np.float32), fields


# --- phantoms --------------------------------------------------------------


@dataclass
class PhantomPair:
    t1: RasterImage
    t2: RasterImage
    true_displacement: DeformationField
    seed: int


def t2_contrast(v):
    """Fixed monotone-decreasing intensity map emulating T1 -> T2 contrast."""
    return 1.0 - np.clip(v, 0.0, 1.0) ** 1.5


def _soft_ellipse(yy, xx, cy, cx, ry, rx, angle, edge):
    c, s = np.cos(angle), np.sin(angle)
    u = ((xx - cx) * c + (yy - cy) * s) / rx
    v = (-(xx - cx) * s + (yy - cy) * c) / ry
    r = np.sqrt(u * u + v * v)
    return 1.0 / (1.0 + np.exp((r - 1.0) / edge))


def _t1_phantom(size, rng):
    yy, xx = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    edge = 2.0 / size  # roughly one pixel of soft edge in normalized units
    # smooth background band so that no region is perfectly flat
    angle = rng.uniform(0, np.pi)
    band = 0.5 + 0.5 * np.cos(rng.uniform(1.5, 3.0) * (xx * np.cos(angle) + yy * np.sin(angle)) + rng.uniform(0, 2 * np.pi))
    img = 0.05 + 0.15 * band
    head = _soft_ellipse(yy, xx, 0.0, 0.0, rng.uniform(0.8, 0.92), rng.uniform(0.7, 0.85), rng.uniform(-0.2, 0.2), 1.5 * edge)
    img = img * (1 - head) + (0.3 + 0.1 * band) * head
    n_blobs = int(rng.integers(4, 7))
    levels = rng.permutation(np.linspace(0.45, 0.95, n_blobs))
    for level in levels:
        cy, cx = rng.uniform(-0.45, 0.45, size=2)
        ry, rx = rng.uniform(0.12, 0.35, size=2)
        blob = _soft_ellipse(yy, xx, cy, cx, ry, rx, rng.uniform(0, np.pi), 1.5 * edge) * head
        img = img * (1 - blob) + level * blob
    return np.clip(img, 0.0, 1.0)


def generate_phantom_pair(size, max_disp, seed, noise=0.01):
    """Synthesize a T1-like image and a misaligned, contrast-inverted T2 partner.

    ``t2 = clip(g(warp(t1, d)) + n, 0, 1)`` with ``g`` from :func:`t2_contrast`,
    ``d`` a smooth cosine-series displacement with ``max |d| <= max_disp`` and
    ``n`` Gaussian noise of standard deviation ``noise``.
    """
    if int(size) != size or size < 16:
        raise ValidationError(f"phantom size must be an integer >= 16, got {size}")
    if not 0 <= max_disp <= size / 8:
        raise ValidationError(f"max_disp must lie in [0, size/8] = [0, {size / 8}], got {max_disp}")
    if not 0 <= noise <= 0.02:
        raise ValidationError(f"noise level must lie in [0, 0.02], got {noise}")
    size = int(size)
    rng = np.random.default_rng(seed)
    t1 = _t1_phantom(size, rng)
    disp = cosine_displacement(size, size, max_disp, rng)
    with torch.no_grad():
        moved = warp_image(torch.from_numpy(t1)[None, None].double(), disp.to_tensor(torch.float64))[0, 0].numpy()
    t2 = np.clip(t2_contrast(moved) + noise * rng.normal(size=moved.shape), 0.0, 1.0)
    return PhantomPair(
        t1=RasterImage(t1.astype(np.float32), role="t1"),
        t2=RasterImage(t2.astype(np.float32), role="t2"),
        true_displacement=disp,
        seed=int(seed),
    )


def atomic_write_bytes(path, blob):
    """Write via a temp file in the same directory, then rename into place."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
