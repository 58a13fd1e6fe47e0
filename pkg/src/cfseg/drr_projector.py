"""Parallel-beam DRR rendering of labeled attenuation volumes.

Geometry.  World coordinates are mm with the origin at the volume
center.  A view is a rotation of the (parallel) ray direction about the
world z axis by ``theta`` degrees:

* ray direction  d = (-sin t, cos t, 0)
* detector column axis  u = (cos t, sin t, 0)
* detector row axis  v = (0, 0, 1)

so at theta = 0 rays travel along +y, detector columns run along +x and
rows along +z.  The pixel at (row r, col c) is centered at offset
``u_c = (c - (w-1)/2) * pixel_mm`` along u and ``v_c = (r - (h-1)/2) *
pixel_mm`` along v, and its ray is the full line through that point
(parallel beam; the nominal source position is irrelevant).

Physics.  Monoenergetic Beer-Lambert with no scatter or noise: per
pixel the attenuation line integral is L = sum over traversed voxels of
mu * chord length (exact chord lengths from an incremental grid
traversal), intensity is exp(-L), and the raw channel stores L.  A
fragment's projected mask marks every pixel whose ray accumulates more
than ``tau_len`` mm of chord inside that fragment's voxels.

Views produced per volume are uniformly spaced over 180 degrees
(parallel-beam images repeat with period 180).
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import DetectorTooSmall, EmptyReference, FovExceededWarning, ValidationError
from .mask_model import CategoryId, FragmentMaskSet, Radiograph, decode
from .synth_phantom import LabelVolume

TAU_LEN = 1e-6  # mm of chord inside a fragment that marks its mask

DEFAULT_DETECTOR = 448  # px
DEFAULT_PIXEL_MM = 1.0


@dataclass(frozen=True)
class ProjectionGeometry:
    """One parallel-beam view: angle about z plus detector raster."""

    theta_deg: float
    width: int = DEFAULT_DETECTOR
    height: int = DEFAULT_DETECTOR
    pixel_mm: float = DEFAULT_PIXEL_MM

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"detector dims must be >= 1, got "
                                  f"{self.width}x{self.height}")
        if not self.pixel_mm > 0:
            raise ValidationError(f"pixel spacing must be positive, got {self.pixel_mm}")

    @property
    def direction(self) -> np.ndarray:
        t = math.radians(self.theta_deg)
        return np.array([-math.sin(t), math.cos(t), 0.0])

    @property
    def u_axis(self) -> np.ndarray:
        t = math.radians(self.theta_deg)
        return np.array([math.cos(t), math.sin(t), 0.0])

    @property
    def v_axis(self) -> np.ndarray:
        return np.array([0.0, 0.0, 1.0])


@njit(cache=True, nogil=True)
def _trace_ray(ox, oy, oz, dx, dy, dz, nx, ny, nz, sx, sy, sz,
               idx_out, len_out):  # pragma: no cover - exercised via traverse()
    """March the line (o + t*d) through the voxel grid.

    Writes (ix, iy, iz) rows into idx_out and chord lengths into
    len_out; returns the segment count.  The full line is traced, not
    just t >= 0.
    """
    x0 = -0.5 * nx * sx
    y0 = -0.5 * ny * sy
    z0 = -0.5 * nz * sz
    tmin = -1e300
    tmax = 1e300
    # slab clip per axis; a zero component needs the origin inside the slab
    if dx != 0.0:
        ta = (x0 - ox) / dx
        tb = (-x0 - ox) / dx
        if ta > tb:
            ta, tb = tb, ta
        if ta > tmin:
            tmin = ta
        if tb < tmax:
            tmax = tb
    elif ox <= x0 or ox >= -x0:
        return 0
    if dy != 0.0:
        ta = (y0 - oy) / dy
        tb = (-y0 - oy) / dy
        if ta > tb:
            ta, tb = tb, ta
        if ta > tmin:
            tmin = ta
        if tb < tmax:
            tmax = tb
    elif oy <= y0 or oy >= -y0:
        return 0
    if dz != 0.0:
        ta = (z0 - oz) / dz
        tb = (-z0 - oz) / dz
        if ta > tb:
            ta, tb = tb, ta
        if ta > tmin:
            tmin = ta
        if tb < tmax:
            tmax = tb
    elif oz <= z0 or oz >= -z0:
        return 0
    if tmin >= tmax:
        return 0

    px = ox + tmin * dx
    py = oy + tmin * dy
    pz = oz + tmin * dz
    ix = int(math.floor((px - x0) / sx))
    iy = int(math.floor((py - y0) / sy))
    iz = int(math.floor((pz - z0) / sz))
    if ix < 0:
        ix = 0
    elif ix >= nx:
        ix = nx - 1
    if iy < 0:
        iy = 0
    elif iy >= ny:
        iy = ny - 1
    if iz < 0:
        iz = 0
    elif iz >= nz:
        iz = nz - 1

    if dx > 0.0:
        stx, tdx = 1, sx / dx
        tmx = ((ix + 1) * sx + x0 - ox) / dx
    elif dx < 0.0:
        stx, tdx = -1, -sx / dx
        tmx = (ix * sx + x0 - ox) / dx
    else:
        stx, tdx, tmx = 0, 1e300, 1e300
    if dy > 0.0:
        sty, tdy = 1, sy / dy
        tmy = ((iy + 1) * sy + y0 - oy) / dy
    elif dy < 0.0:
        sty, tdy = -1, -sy / dy
        tmy = (iy * sy + y0 - oy) / dy
    else:
        sty, tdy, tmy = 0, 1e300, 1e300
    if dz > 0.0:
        stz, tdz = 1, sz / dz
        tmz = ((iz + 1) * sz + z0 - oz) / dz
    elif dz < 0.0:
        stz, tdz = -1, -sz / dz
        tmz = (iz * sz + z0 - oz) / dz
    else:
        stz, tdz, tmz = 0, 1e300, 1e300

    t = tmin
    count = 0
    while True:
        if tmx <= tmy and tmx <= tmz:
            axis, tnext = 0, tmx
        elif tmy <= tmz:
            axis, tnext = 1, tmy
        else:
            axis, tnext = 2, tmz
        end = tnext if tnext < tmax else tmax
        seg = end - t
        if seg > 0.0:
            idx_out[count, 0] = ix
            idx_out[count, 1] = iy
            idx_out[count, 2] = iz
            len_out[count] = seg
            count += 1
        if tnext >= tmax:
            break
        t = tnext
        if axis == 0:
            ix += stx
            tmx += tdx
            if ix < 0 or ix >= nx:
                break
        elif axis == 1:
            iy += sty
            tmy += tdy
            if iy < 0 or iy >= ny:
                break
        else:
            iz += stz
            tmz += tdz
            if iz < 0 or iz >= nz:
                break
    return count


def traverse(dims, spacing, origin, direction) -> list[tuple[tuple[int, int, int], float]]:
    """Exact voxel chords of a line through a voxel grid, in ray order.

    ``dims`` is (nx, ny, nz), ``spacing`` (sx, sy, sz) mm, ``origin`` a
    world point on the line (mm, origin at grid center) and
    ``direction`` a unit vector.  Returns ((ix, iy, iz), length) pairs;
    a line missing the grid yields an empty list.
    """
    d = np.asarray(direction, dtype=np.float64)
    if abs(float(np.linalg.norm(d)) - 1.0) > 1e-9:
        raise ValidationError(f"direction must be unit length, got {direction}")
    nx, ny, nz = (int(v) for v in dims)
    sx, sy, sz = (float(v) for v in spacing)
    if min(nx, ny, nz) < 1 or min(sx, sy, sz) <= 0:
        raise ValidationError(f"bad grid: dims {dims}, spacing {spacing}")
    o = np.asarray(origin, dtype=np.float64)
    cap = nx + ny + nz + 3
    idx = np.empty((cap, 3), dtype=np.int64)
    lens = np.empty(cap, dtype=np.float64)
    n = _trace_ray(o[0], o[1], o[2], d[0], d[1], d[2],
                   nx, ny, nz, sx, sy, sz, idx, lens)
    return [((int(idx[k, 0]), int(idx[k, 1]), int(idx[k, 2])), float(lens[k]))
            for k in range(n)]


@njit(cache=True, nogil=True)
def _render_rows(mu, labels, sx, sy, sz, phi, pixel_mm, r0, r1,
                 raw, words, tau):  # pragma: no cover - exercised via project()
    """Render detector rows [r0, r1) into raw (f64) and words (u32)."""
    nz, ny, nx = mu.shape
    height, width = raw.shape
    ch = math.cos(phi)
    sh = math.sin(phi)
    dx, dy, dz = -sh, ch, 0.0
    cap = nx + ny + nz + 3
    idx = np.empty((cap, 3), np.int64)
    lens = np.empty(cap, np.float64)
    acc = np.empty(31, np.float64)
    for r in range(r0, r1):
        vc = (r - (height - 1) / 2.0) * pixel_mm
        for c in range(width):
            uc = (c - (width - 1) / 2.0) * pixel_mm
            n = _trace_ray(uc * ch, uc * sh, vc, dx, dy, dz,
                           nx, ny, nz, sx, sy, sz, idx, lens)
            total = 0.0
            for k in range(31):
                acc[k] = 0.0
            for k in range(n):
                vix = idx[k, 0]
                viy = idx[k, 1]
                viz = idx[k, 2]
                seg = lens[k]
                total += mu[viz, viy, vix] * seg
                acc[labels[viz, viy, vix]] += seg
            raw[r, c] = total
            w = np.uint32(0)
            for lbl in range(1, 31):
                if acc[lbl] > tau:
                    w |= np.uint32(1) << np.uint32(lbl - 1)
            words[r, c] = w


def _fov_extent(vol: LabelVolume, geom: ProjectionGeometry) -> tuple[float, float]:
    """Largest |u| and |v| offsets of the volume's corners on the detector."""
    nx, ny, nz = vol.dims
    sx, sy, sz = vol.spacing
    hx, hy, hz = 0.5 * nx * sx, 0.5 * ny * sy, 0.5 * nz * sz
    u = geom.u_axis
    # |corner . u| is maximized by aligning signs with u componentwise
    umax = hx * abs(u[0]) + hy * abs(u[1])
    return umax, hz


def project(
    vol: LabelVolume,
    geom: ProjectionGeometry,
    tau_len: float = TAU_LEN,
    workers: int = 1,
    fov_policy: str = "error",
) -> tuple[Radiograph, FragmentMaskSet]:
    """Render one view: intensity radiograph plus projected fragment masks.

    ``workers`` only splits detector rows across threads; each pixel is
    computed independently, so output is identical for any worker count.
    ``fov_policy`` is "error" (raise DetectorTooSmall), "warn", or
    "ignore" when the volume projects beyond the detector edge.
    """
    if fov_policy not in ("error", "warn", "ignore"):
        raise ValidationError(f"unknown fov_policy: {fov_policy!r}")
    if not tau_len > 0:
        raise ValidationError(f"tau_len must be positive, got {tau_len}")
    umax, vmax = _fov_extent(vol, geom)
    half_w = 0.5 * geom.width * geom.pixel_mm
    half_h = 0.5 * geom.height * geom.pixel_mm
    if umax > half_w or vmax > half_h:
        msg = (f"volume projects to +-({umax:.1f}, {vmax:.1f}) mm but the detector "
               f"covers +-({half_w:.1f}, {half_h:.1f}) mm at theta={geom.theta_deg}")
        if fov_policy == "error":
            raise DetectorTooSmall(msg)
        if fov_policy == "warn":
            warnings.warn(msg, FovExceededWarning, stacklevel=2)

    raw = np.empty((geom.height, geom.width), dtype=np.float64)
    words = np.empty((geom.height, geom.width), dtype=np.uint32)
    phi = math.radians(geom.theta_deg)
    sx, sy, sz = vol.spacing
    n_workers = max(1, int(workers))
    if n_workers == 1:
        _render_rows(vol.mu, vol.labels, sx, sy, sz, phi, geom.pixel_mm,
                     0, geom.height, raw, words, tau_len)
    else:
        bounds = np.linspace(0, geom.height, n_workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            futures = [
                pool.submit(_render_rows, vol.mu, vol.labels, sx, sy, sz, phi,
                            geom.pixel_mm, int(a), int(b), raw, words, tau_len)
                for a, b in zip(bounds[:-1], bounds[1:]) if b > a
            ]
            for f in futures:
                f.result()
    image = Radiograph(intensity=np.exp(-raw), raw=raw)
    return image, decode(words)


def make_views(
    vol: LabelVolume,
    n_views: int,
    width: int = DEFAULT_DETECTOR,
    height: int = DEFAULT_DETECTOR,
    pixel_mm: float = DEFAULT_PIXEL_MM,
    tau_len: float = TAU_LEN,
    workers: int = 1,
    fov_policy: str = "error",
) -> list[tuple[Radiograph, FragmentMaskSet, float]]:
    """Render ``n_views`` views at theta_k = k * (180 / n_views) degrees."""
    if n_views < 1:
        raise ValidationError(f"n_views must be >= 1, got {n_views}")
    out = []
    for k in range(n_views):
        theta = k * (180.0 / n_views)
        geom = ProjectionGeometry(theta_deg=theta, width=width, height=height,
                                  pixel_mm=pixel_mm)
        image, masks = project(vol, geom, tau_len=tau_len, workers=workers,
                               fov_policy=fov_policy)
        out.append((image, masks, theta))
    return out


def overlap_ratio(masks: FragmentMaskSet, reference: CategoryId) -> float:
    """Fraction of the reference category's projection covered by other bones.

    |R intersect O| / |R| with R the union of the reference category's
    fragment masks and O the union of every other category's masks.
    """
    reference = CategoryId(reference)
    ref = masks.category_union(reference)
    n_ref = int(np.count_nonzero(ref))
    if n_ref == 0:
        raise EmptyReference(f"reference category {reference.name} has no projection")
    other = np.zeros_like(ref)
    for cat in CategoryId:
        if cat != reference:
            other |= masks.category_union(cat)
    return int(np.count_nonzero(ref & other)) / n_ref
