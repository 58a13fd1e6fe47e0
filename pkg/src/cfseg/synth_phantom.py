"""Procedural fractured-pelvis phantoms: labeled attenuation volumes.

A phantom is a soft-tissue ellipsoid containing three ellipsoidal bone
shells: a central posterior sacrum (SA) and two lateral ilia (LI, RI).
The right ilium mask is the exact voxel mirror of the left one (array
flip along x), so the two are bit-identical up to reflection before any
fracturing.  Fractures are planar: the largest fragment of a category is
repeatedly split by a random plane through its jittered centroid until
the requested fragment count is reached.

Array layout: ``mu`` (float32, mm^-1) and ``labels`` (uint8) are C-order
arrays of shape ``(nz, ny, nx)`` indexed ``[z, y, x]``, so x varies
fastest in memory and on disk.  Label 0 is background; bone voxels carry
``1 + 10*category + fragment``.  World coordinates place the origin at
the volume center, axes in mm.

Volume file format (``.cfsv``, little-endian): magic ``CFSV``, version
u32 = 1, dims nx ny nz as u32, spacing sx sy sz as f64, then the mu
array as f32 and the labels array as u8, both x-fastest.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ._rng import STREAM_FRACTURE, stream
from ._util import atomic_write_bytes
from .errors import (
    BadMagic,
    DegenerateFracture,
    FileFormatError,
    FragmentCountOutOfRange,
    TruncatedFile,
    ValidationError,
)
from .mask_model import MAX_FRAGMENTS, CategoryId

VOLUME_MAGIC = b"CFSV"
VOLUME_VERSION = 1

MU_BONE = 0.05  # mm^-1, cortical-bone-like contrast at diagnostic energies
MU_SOFT = 0.015  # mm^-1

PLANE_RESAMPLES = 32  # attempts to find a valid cut before giving up

# ellipsoid geometry as fractions of the volume dims
_SOFT_AXES = (0.45, 0.38, 0.42)
_SA_CENTER = (0.0, 0.18, 0.0)  # offset from volume center
_SA_AXES = (0.13, 0.10, 0.22)
_LI_CENTER = (0.26, 0.0, 0.02)
_LI_AXES = (0.10, 0.20, 0.24)
_SHELL_INNER = 0.55  # inner-to-outer axis ratio of the bone shells


@dataclass(frozen=True)
class FracturePlane:
    """Oriented cutting plane in world coordinates (mm, origin at volume center)."""

    point: tuple[float, float, float]
    normal: tuple[float, float, float]

    def __post_init__(self) -> None:
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(float(np.linalg.norm(n)) - 1.0) > 1e-9:
            raise ValidationError(f"plane normal not unit length: {self.normal}")


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of one synthetic volume; fully determines its content."""

    seed: int
    dims: tuple[int, int, int] = (128, 128, 128)  # nx, ny, nz voxels
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)  # mm
    fragments: tuple[int, int, int] = (1, 1, 1)  # per SA, LI, RI
    mu_bone: float = MU_BONE
    mu_soft: float = MU_SOFT
    shell_inner: float = _SHELL_INNER

    def __post_init__(self) -> None:
        if len(self.dims) != 3 or any(int(d) < 16 for d in self.dims):
            raise ValidationError(f"volume dims must be >= 16 per axis, got {self.dims}")
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise ValidationError(f"voxel spacing must be positive, got {self.spacing}")
        for cat, n in zip(CategoryId, self.fragments):
            if not 1 <= int(n) <= MAX_FRAGMENTS:
                raise FragmentCountOutOfRange(
                    f"{cat.name} fragment count {n} outside [1, {MAX_FRAGMENTS}]"
                )
        if not self.mu_bone > self.mu_soft > 0:
            raise ValidationError("need mu_bone > mu_soft > 0")
        if not 0.0 < self.shell_inner < 1.0:
            raise ValidationError("shell_inner must be in (0, 1)")


@dataclass
class LabelVolume:
    """Attenuation volume with per-voxel fragment labels.

    ``mu`` and ``labels`` have shape ``(nz, ny, nx)``; ``dims`` is
    ``(nx, ny, nz)`` and ``spacing`` is ``(sx, sy, sz)`` in mm.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    mu: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        nx, ny, nz = (int(d) for d in self.dims)
        if min(nx, ny, nz) < 1:
            raise ValidationError(f"volume dims must be positive, got {self.dims}")
        if any(not s > 0 for s in self.spacing):
            raise ValidationError(f"voxel spacing must be positive, got {self.spacing}")
        self.dims = (nx, ny, nz)
        self.spacing = tuple(float(s) for s in self.spacing)
        mu = np.ascontiguousarray(self.mu, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if mu.shape != (nz, ny, nx) or labels.shape != (nz, ny, nx):
            raise ValidationError(
                f"arrays must have shape (nz, ny, nx) = {(nz, ny, nx)}, "
                f"got mu {mu.shape}, labels {labels.shape}"
            )
        if not np.all(np.isfinite(mu)) or mu.min() < 0:
            raise ValidationError("mu must be finite and >= 0")
        if labels.max(initial=0) > 30:
            raise ValidationError("labels must be 0 or 1 + 10*category + fragment <= 30")
        self.mu = mu
        self.labels = labels

    def fragment_mask(self, category: CategoryId, fragment: int) -> np.ndarray:
        return self.labels == np.uint8(1 + 10 * int(category) + fragment)

    def category_mask(self, category: CategoryId) -> np.ndarray:
        lo = 1 + 10 * int(category)
        return (self.labels >= lo) & (self.labels < lo + MAX_FRAGMENTS)

    def n_fragments(self, category: CategoryId) -> int:
        """Number of fragment labels present (highest occupied index + 1)."""
        lo = 1 + 10 * int(category)
        present = np.unique(self.labels[self.category_mask(category)])
        if present.size == 0:
            return 0
        return int(present.max()) - lo + 1


def _ellipsoid(shape_zyx, center_xyz, axes_xyz) -> np.ndarray:
    """Voxel mask of an ellipsoid given center/axes in voxel-index units."""
    nz, ny, nx = shape_zyx
    zz, yy, xx = np.ogrid[0:nz, 0:ny, 0:nx]
    cx, cy, cz = center_xyz
    ax, ay, az = axes_xyz
    return (
        ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 + ((zz - cz) / az) ** 2
    ) <= 1.0


def _shell(shape_zyx, center_xyz, axes_xyz, inner: float) -> np.ndarray:
    outer = _ellipsoid(shape_zyx, center_xyz, axes_xyz)
    inner_axes = tuple(a * inner for a in axes_xyz)
    return outer & ~_ellipsoid(shape_zyx, center_xyz, inner_axes)


def generate(spec: PhantomSpec) -> LabelVolume:
    """Build the phantom for ``spec``; bit-identical for identical specs."""
    nx, ny, nz = spec.dims
    shape = (nz, ny, nx)
    # index-space center; symmetric under the flip x -> nx-1-x
    cx, cy, cz = (nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0

    soft = _ellipsoid(shape, (cx, cy, cz), (_SOFT_AXES[0] * nx, _SOFT_AXES[1] * ny,
                                            _SOFT_AXES[2] * nz))
    sa = _shell(
        shape,
        (cx + _SA_CENTER[0] * nx, cy + _SA_CENTER[1] * ny, cz + _SA_CENTER[2] * nz),
        (_SA_AXES[0] * nx, _SA_AXES[1] * ny, _SA_AXES[2] * nz),
        spec.shell_inner,
    )
    li = _shell(
        shape,
        (cx + _LI_CENTER[0] * nx, cy + _LI_CENTER[1] * ny, cz + _LI_CENTER[2] * nz),
        (_LI_AXES[0] * nx, _LI_AXES[1] * ny, _LI_AXES[2] * nz),
        spec.shell_inner,
    )
    li &= ~sa
    ri = li[:, :, ::-1].copy()  # exact mirror; sa is flip-symmetric so ri & sa == 0
    li &= ~ri  # defensive: geometry keeps them apart, midline crossings go to RI

    for cat, mask in ((CategoryId.SA, sa), (CategoryId.LI, li), (CategoryId.RI, ri)):
        if not mask.any():
            raise ValidationError(f"{cat.name} bone region is empty at dims {spec.dims}")

    mu = np.zeros(shape, dtype=np.float32)
    mu[soft] = spec.mu_soft
    labels = np.zeros(shape, dtype=np.uint8)
    labels[sa] = 1 + 10 * CategoryId.SA
    labels[li] = 1 + 10 * CategoryId.LI
    labels[ri] = 1 + 10 * CategoryId.RI
    mu[labels > 0] = spec.mu_bone

    vol = LabelVolume(dims=spec.dims, spacing=spec.spacing, mu=mu, labels=labels)
    for cat, n in zip(CategoryId, spec.fragments):
        if n > 1:
            vol = fracture(vol, cat, int(n), spec.seed)
    return vol


def _voxel_centers_mm(vol: LabelVolume, mask: np.ndarray):
    """World coordinates (mm, origin at volume center) of masked voxel centers."""
    nx, ny, nz = vol.dims
    sx, sy, sz = vol.spacing
    zz, yy, xx = np.nonzero(mask)
    x = (xx + 0.5) * sx - nx * sx / 2.0
    y = (yy + 0.5) * sy - ny * sy / 2.0
    z = (zz + 0.5) * sz - nz * sz / 2.0
    return x, y, z, (zz, yy, xx)


def fracture(
    vol: LabelVolume,
    category: CategoryId,
    n: int,
    seed: int,
    planes: list[FracturePlane] | None = None,
) -> LabelVolume:
    """Split ``category`` into ``n`` fragments by planar cuts.

    Each cut bisects the currently largest fragment with a plane through
    a jittered centroid; both parts must keep at least
    ``max(8, ceil(0.005 * category voxel count))`` voxels or the plane
    is resampled (up to 32 attempts, then DegenerateFracture).  Passing
    explicit ``planes`` replaces sampling, one plane per cut, with no
    resampling.  Labels of other categories are untouched.  Returns a
    new volume; the input is not modified.
    """
    category = CategoryId(category)
    if not 1 <= n <= MAX_FRAGMENTS:
        raise FragmentCountOutOfRange(f"fragment count {n} outside [1, {MAX_FRAGMENTS}]")
    cat_mask = vol.category_mask(category)
    total = int(np.count_nonzero(cat_mask))
    if total == 0:
        raise ValidationError(f"category {category.name} absent from volume")
    labels = vol.labels.copy()
    base = 1 + 10 * int(category)
    present, present_counts = np.unique(labels[cat_mask], return_counts=True)
    counts = {int(l) - base: int(c) for l, c in zip(present, present_counts)}
    if len(counts) > n:
        raise ValidationError(
            f"{category.name} already has {len(counts)} fragments, cannot reach {n}"
        )
    if len(counts) == n:
        return LabelVolume(vol.dims, vol.spacing, vol.mu.copy(), labels)

    min_voxels = max(8, -(-total * 5 // 1000))  # ceil(0.005 * total)
    rng = stream(seed, STREAM_FRACTURE, int(category))
    for cut in range(n - len(counts)):
        largest = min(counts, key=lambda f: (-counts[f], f))
        frag_mask = labels == np.uint8(base + largest)
        x, y, z, idx = _voxel_centers_mm(vol, frag_mask)
        new_index = min(f for f in range(MAX_FRAGMENTS) if f not in counts)
        placed = False
        attempts = 1 if planes is not None else PLANE_RESAMPLES
        for _ in range(attempts):
            if planes is not None:
                plane = planes[cut]
            else:
                plane = _sample_plane(rng, x, y, z)
            px, py, pz = plane.point
            ux, uy, uz = plane.normal
            signed = (x - px) * ux + (y - py) * uy + (z - pz) * uz
            side_b = signed >= 0.0
            nb = int(np.count_nonzero(side_b))
            na = side_b.size - nb
            if na >= min_voxels and nb >= min_voxels:
                zz, yy, xx = idx
                labels[zz[side_b], yy[side_b], xx[side_b]] = base + new_index
                counts[largest] = na
                counts[new_index] = nb
                placed = True
                break
        if not placed:
            raise DegenerateFracture(
                f"no valid cut for {category.name} fragment {largest} "
                f"({counts[largest]} voxels, min part {min_voxels})"
            )
    return LabelVolume(vol.dims, vol.spacing, vol.mu.copy(), labels)


def _sample_plane(rng: np.random.Generator, x, y, z) -> FracturePlane:
    """Random plane through the fragment's centroid, jittered within its bbox."""
    centroid = np.array([x.mean(), y.mean(), z.mean()])
    extent = np.array([np.ptp(x), np.ptp(y), np.ptp(z)])
    point = centroid + rng.normal(0.0, 1.0, 3) * extent / 12.0
    while True:
        v = rng.normal(0.0, 1.0, 3)
        norm = float(np.linalg.norm(v))
        if norm > 1e-12:
            break
    return FracturePlane(point=tuple(point), normal=tuple(v / norm))


# -- .cfsv file I/O -----------------------------------------------------------

_VOL_HEADER = struct.Struct("<4sIIIIddd")  # magic, version, nx, ny, nz, sx, sy, sz


def write_volume(vol: LabelVolume, path) -> None:
    """Write a LabelVolume as a ``.cfsv`` file (atomic)."""
    nx, ny, nz = vol.dims
    header = _VOL_HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, nx, ny, nz, *vol.spacing)
    mu = np.ascontiguousarray(vol.mu, dtype="<f4")
    labels = np.ascontiguousarray(vol.labels, dtype=np.uint8)
    atomic_write_bytes(path, header + mu.tobytes() + labels.tobytes())


def read_volume(path) -> LabelVolume:
    """Read a ``.cfsv`` file back into a LabelVolume."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _VOL_HEADER.size:
        raise TruncatedFile(f"{path}: shorter than the {_VOL_HEADER.size}-byte header")
    magic, version, nx, ny, nz, sx, sy, sz = _VOL_HEADER.unpack_from(data)
    if magic != VOLUME_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != VOLUME_VERSION:
        raise FileFormatError(f"{path}: unsupported format version {version}")
    if min(nx, ny, nz) < 1 or max(nx, ny, nz) > 4096:
        raise FileFormatError(f"{path}: implausible dims {(nx, ny, nz)}")
    if not all(np.isfinite(s) and s > 0 for s in (sx, sy, sz)):
        raise FileFormatError(f"{path}: bad voxel spacing {(sx, sy, sz)}")
    count = nx * ny * nz
    expected = _VOL_HEADER.size + 5 * count
    if len(data) < expected:
        raise TruncatedFile(f"{path}: {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise FileFormatError(f"{path}: {len(data) - expected} trailing bytes")
    mu = np.frombuffer(data, dtype="<f4", count=count, offset=_VOL_HEADER.size)
    labels = np.frombuffer(data, dtype=np.uint8, count=count,
                           offset=_VOL_HEADER.size + 4 * count)
    try:
        return LabelVolume(
            dims=(nx, ny, nz),
            spacing=(sx, sy, sz),
            mu=mu.reshape(nz, ny, nx),
            labels=labels.reshape(nz, ny, nx),
        )
    except ValidationError as e:
        raise FileFormatError(f"{path}: {e}") from None
