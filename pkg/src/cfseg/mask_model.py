"""Mask and image data model with a 32-bit overlapping-fragment encoding.

Binary masks are plain boolean numpy arrays of shape ``(height, width)``;
a pixel is foreground where the entry is True.  Projected bone fragments
may overlap, so a labelled raster needs more than one label per pixel:
an *encoded mask image* is a uint32 array of the same shape in which bit
``10*category + fragment`` marks coverage by fragment ``fragment`` of
category ``category``.  Three categories times ten fragment slots use
bits 0..29; bits 30 and 31 are reserved and always zero.

On-disk containers:

* ``.cfsm`` mask file: magic ``CFSM``, format version u32, width u32,
  height u32, then ``width*height`` row-major u32 words.  All fields
  little-endian.
* Radiographs: 16-bit binary PGM (``P5``, maxval 65535), sample value
  ``round(65535 * intensity)``, most significant byte first per the
  Netpbm convention.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    DimensionOverflow,
    FileFormatError,
    FragmentOverflow,
    ReservedBitsSet,
    TruncatedFile,
    ValidationError,
)

MAX_FRAGMENTS = 10
FRAGMENT_BITS = 30  # 3 categories * 10 slots

MASK_MAGIC = b"CFSM"
MASK_VERSION = 1
MAX_SIDE = 1 << 16


class CategoryId(enum.IntEnum):
    """The three pelvic bone categories."""

    SA = 0  # sacrum
    LI = 1  # left ilium
    RI = 2  # right ilium

    @classmethod
    def from_name(cls, name: str) -> "CategoryId":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValidationError(f"unknown category name: {name!r}") from None


def fragment_bit(category: CategoryId, fragment: int) -> int:
    """Bit position of fragment ``fragment`` within ``category``."""
    if not 0 <= fragment < MAX_FRAGMENTS:
        raise FragmentOverflow(f"fragment index {fragment} outside [0, {MAX_FRAGMENTS})")
    return 10 * int(category) + fragment


def as_mask(arr: np.ndarray) -> np.ndarray:
    """Validate ``arr`` as a 2-D mask and return it as a bool array."""
    a = np.asarray(arr)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValidationError(f"mask must be 2-D with positive dims, got shape {a.shape}")
    return a.astype(bool, copy=False)


@dataclass
class FragmentMaskSet:
    """Per-category ordered lists of binary fragment masks.

    List position is the fragment index and is semantically meaningful.
    Masks within and across categories may overlap.  All masks share the
    set's dimensions.
    """

    height: int
    width: int
    masks: dict[CategoryId, list[np.ndarray]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValidationError("mask set dimensions must be >= 1")
        full = {}
        for cat in CategoryId:
            frags = [as_mask(m) for m in self.masks.get(cat, [])]
            if len(frags) > MAX_FRAGMENTS:
                raise FragmentOverflow(
                    f"category {cat.name} has {len(frags)} fragments, cap is {MAX_FRAGMENTS}"
                )
            for m in frags:
                if m.shape != (self.height, self.width):
                    raise ValidationError(
                        f"fragment mask shape {m.shape} != set dims "
                        f"({self.height}, {self.width})"
                    )
            full[cat] = frags
        self.masks = full

    def fragments(self, category: CategoryId) -> list[np.ndarray]:
        return self.masks[CategoryId(category)]

    def n_fragments(self, category: CategoryId) -> int:
        return len(self.masks[CategoryId(category)])

    def category_union(self, category: CategoryId) -> np.ndarray:
        """Union of all fragment masks of one category (empty if none)."""
        out = np.zeros((self.height, self.width), dtype=bool)
        for m in self.masks[CategoryId(category)]:
            out |= m
        return out

    def iter_all(self):
        """Yield ``(category, fragment_index, mask)`` in canonical order."""
        for cat in CategoryId:
            for f, m in enumerate(self.masks[cat]):
                yield cat, f, m

    def __eq__(self, other) -> bool:
        if not isinstance(other, FragmentMaskSet):
            return NotImplemented
        if (self.height, self.width) != (other.height, other.width):
            return False
        for cat in CategoryId:
            a, b = self.masks[cat], other.masks[cat]
            if len(a) != len(b):
                return False
            if any(not np.array_equal(x, y) for x, y in zip(a, b)):
                return False
        return True


@dataclass
class Radiograph:
    """2-D intensity image in [0, 1], optionally with raw line integrals.

    ``raw`` holds the attenuation line integral per pixel (unitless, the
    product of mm^-1 attenuation and mm path length); when present,
    ``intensity == exp(-raw)`` up to floating-point rounding.
    """

    intensity: np.ndarray
    raw: np.ndarray | None = None

    def __post_init__(self) -> None:
        img = np.asarray(self.intensity, dtype=np.float64)
        if img.ndim != 2 or min(img.shape) < 1:
            raise ValidationError(f"intensity must be 2-D, got shape {img.shape}")
        if not np.all(np.isfinite(img)):
            raise ValidationError("intensity contains non-finite values")
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValidationError("intensity outside [0, 1]")
        self.intensity = img
        if self.raw is not None:
            raw = np.asarray(self.raw, dtype=np.float64)
            if raw.shape != img.shape:
                raise ValidationError("raw channel shape differs from intensity")
            if not np.all(np.isfinite(raw)) or raw.min() < 0.0:
                raise ValidationError("raw channel must be finite and >= 0")
            self.raw = raw

    @property
    def height(self) -> int:
        return self.intensity.shape[0]

    @property
    def width(self) -> int:
        return self.intensity.shape[1]


# -- bit encoding ------------------------------------------------------------


def encode(mask_set: FragmentMaskSet) -> np.ndarray:
    """Pack a fragment mask set into one uint32 word per pixel.

    Bit ``10*c + f`` of a word is set iff fragment ``f`` of category
    ``c`` covers that pixel.  Inverse of :func:`decode` except that
    trailing all-empty fragment slots are not representable.
    """
    words = np.zeros((mask_set.height, mask_set.width), dtype=np.uint32)
    for cat, f, mask in mask_set.iter_all():
        words |= mask.astype(np.uint32) << np.uint32(fragment_bit(cat, f))
    return words


def decode(words: np.ndarray) -> FragmentMaskSet:
    """Unpack an encoded mask image into per-category fragment lists.

    A fragment slot is present when any pixel carries its bit; interior
    empty slots below a populated index are preserved as empty masks so
    fragment indices stay stable, while trailing empty slots are dropped.
    """
    w = np.asarray(words)
    if w.ndim != 2 or min(w.shape) < 1:
        raise ValidationError(f"encoded image must be 2-D, got shape {w.shape}")
    w = w.astype(np.uint32, copy=False)
    if np.any(w >> np.uint32(FRAGMENT_BITS)):
        raise ReservedBitsSet("encoded mask image uses reserved bits 30/31")
    height, width = w.shape
    masks: dict[CategoryId, list[np.ndarray]] = {}
    for cat in CategoryId:
        frags = []
        top = -1
        for f in range(MAX_FRAGMENTS):
            m = (w >> np.uint32(fragment_bit(cat, f))) & np.uint32(1) != 0
            frags.append(m)
            if m.any():
                top = f
        masks[cat] = frags[: top + 1]
    return FragmentMaskSet(height=height, width=width, masks=masks)


# -- .cfsm file I/O ----------------------------------------------------------

_HEADER = struct.Struct("<4sIII")  # magic, version, width, height


def write_mask_file(words: np.ndarray, path) -> None:
    """Write an encoded mask image as a ``.cfsm`` file (atomic)."""
    from ._util import atomic_write_bytes

    w = np.asarray(words)
    if w.ndim != 2 or min(w.shape) < 1:
        raise ValidationError(f"encoded image must be 2-D, got shape {w.shape}")
    height, width = w.shape
    if width > MAX_SIDE or height > MAX_SIDE:
        raise DimensionOverflow(f"raster side exceeds {MAX_SIDE}: {width}x{height}")
    w = np.ascontiguousarray(w, dtype="<u4")
    if np.any(w >> np.uint32(FRAGMENT_BITS)):
        raise ReservedBitsSet("refusing to write reserved bits 30/31")
    header = _HEADER.pack(MASK_MAGIC, MASK_VERSION, width, height)
    atomic_write_bytes(path, header + w.tobytes())


def read_mask_file(path) -> np.ndarray:
    """Read a ``.cfsm`` file back into a uint32 encoded mask image."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise TruncatedFile(f"{path}: shorter than the 16-byte header")
    magic, version, width, height = _HEADER.unpack_from(data)
    if magic != MASK_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != MASK_VERSION:
        raise FileFormatError(f"{path}: unsupported format version {version}")
    if width > MAX_SIDE or height > MAX_SIDE:
        raise DimensionOverflow(f"{path}: raster side exceeds {MAX_SIDE}")
    if width < 1 or height < 1:
        raise FileFormatError(f"{path}: zero-sized raster")
    expected = _HEADER.size + 4 * width * height
    if len(data) < expected:
        raise TruncatedFile(f"{path}: {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise FileFormatError(f"{path}: {len(data) - expected} trailing bytes")
    words = np.frombuffer(data, dtype="<u4", offset=_HEADER.size)
    words = words.reshape(height, width).astype(np.uint32)
    if np.any(words >> np.uint32(FRAGMENT_BITS)):
        raise ReservedBitsSet(f"{path}: reserved bits 30/31 set")
    return words


# -- 16-bit PGM I/O ----------------------------------------------------------


def write_pgm(image: Radiograph | np.ndarray, path) -> None:
    """Write an intensity image as a 16-bit binary PGM file (atomic)."""
    from ._util import atomic_write_bytes

    if isinstance(image, Radiograph):
        img = image.intensity
    else:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 2:
            raise ValidationError("PGM image must be 2-D")
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValidationError("PGM intensity outside [0, 1]")
    height, width = img.shape
    samples = np.rint(img * 65535.0).astype(">u2")
    header = f"P5\n{width} {height}\n65535\n".encode("ascii")
    atomic_write_bytes(path, header + samples.tobytes())


def _pgm_tokens(data: bytes):
    """Yield whitespace-separated header tokens, skipping # comments."""
    pos = 0
    while True:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedFile("PGM header ended early")
        yield data[start:pos], pos


def read_pgm(path) -> Radiograph:
    """Read a binary PGM file as a Radiograph (no raw channel)."""
    with open(path, "rb") as f:
        data = f.read()
    tokens = _pgm_tokens(data)
    try:
        magic, _ = next(tokens)
        if magic != b"P5":
            raise BadMagic(f"{path}: not a binary PGM (magic {magic!r})")
        width, _ = next(tokens)
        height, _ = next(tokens)
        maxval, pos = next(tokens)
    except TruncatedFile:
        raise TruncatedFile(f"{path}: PGM header ended early") from None
    try:
        width, height, maxval = int(width), int(height), int(maxval)
    except ValueError:
        raise FileFormatError(f"{path}: non-numeric PGM header field") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FileFormatError(f"{path}: bad PGM dimensions or maxval")
    pos += 1  # single whitespace byte after maxval
    dtype = ">u2" if maxval > 255 else "u1"
    count = width * height
    payload = data[pos:]
    if len(payload) < count * np.dtype(dtype).itemsize:
        raise TruncatedFile(f"{path}: PGM payload shorter than {width}x{height}")
    samples = np.frombuffer(payload, dtype=dtype, count=count).reshape(height, width)
    return Radiograph(intensity=samples.astype(np.float64) / float(maxval))
