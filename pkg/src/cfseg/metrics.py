"""Segmentation metrics: IoU, ASSD, HD95, fragment matching, aggregation.

Distance-based metrics are built on an exact Euclidean distance
transform (two-phase Meijster scan, integer squared distances, so the
result is exact before the final square root).  Surface extraction uses
4-connectivity and treats the image border as background, which gives a
well-defined boundary even for full-frame masks.

Conventions chosen here (several exist in the literature):

* ASSD: sum of directed boundary distances in both directions divided
  by the total boundary pixel count.
* HD95: both directed distance multisets are pooled and the nearest-rank
  order statistic at rank ``ceil(0.95 * n)`` is returned.  No
  interpolation, so the value is always an attained distance.
* Empty-mask policy when exactly one of prediction/reference is empty:
  ``diagonal_penalty`` (default) scores IoU 0 and both distances as the
  image diagonal; ``skip_record`` omits the affected record.
* Fragment-level scores average over reference fragments (recall view);
  unmatched predictions are counted separately, never averaged in.

Distances are in pixel units unless a ``spacing`` (mm per pixel,
isotropic) is given.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.optimize import linear_sum_assignment

from .errors import DimensionMismatch, EmptyMask, NoRecords
from .mask_model import CategoryId, FragmentMaskSet, as_mask

POLICY_DIAGONAL = "diagonal_penalty"
POLICY_SKIP = "skip_record"
POLICIES = (POLICY_DIAGONAL, POLICY_SKIP)

LEVEL_CATEGORY = "category"
LEVEL_FRAGMENT = "fragment"

# aggregate() keys: metric x level, "-C" category / "-F" fragment
AGGREGATE_KEYS = ("iou_c", "assd_c", "hd95_c", "iou_f", "assd_f", "hd95_f")


# -- primitives ---------------------------------------------------------------


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks.

    Both masks empty counts as perfect agreement (1.0); exactly one
    empty is total disagreement (0.0).
    """
    a, b = as_mask(a), as_mask(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


@njit(cache=True, nogil=True)
def _edt_sq(occ):  # pragma: no cover - exercised through edt()
    """Exact squared EDT to the nearest occupied pixel (Meijster scan).

    Phase 1 finds per-column vertical distances; phase 2 sweeps each row
    with a lower-envelope-of-parabolas scan.  All arithmetic is integer,
    so returned squared distances are exact.
    """
    h, w = occ.shape
    inf = h + w  # exceeds any attainable per-axis distance
    g = np.empty((h, w), np.int64)
    for x in range(w):
        g[0, x] = 0 if occ[0, x] else inf
        for y in range(1, h):
            g[y, x] = 0 if occ[y, x] else g[y - 1, x] + 1
        for y in range(h - 2, -1, -1):
            if g[y + 1, x] + 1 < g[y, x]:
                g[y, x] = g[y + 1, x] + 1
    out = np.empty((h, w), np.int64)
    s = np.empty(w, np.int64)
    t = np.empty(w, np.int64)
    for y in range(h):
        q = 0
        s[0] = 0
        t[0] = 0
        for u in range(1, w):
            while q >= 0:
                dq = (t[q] - s[q]) ** 2 + g[y, s[q]] ** 2
                du = (t[q] - u) ** 2 + g[y, u] ** 2
                if dq <= du:
                    break
                q -= 1
            if q < 0:
                q = 0
                s[0] = u
            else:
                # last x where the incumbent parabola still wins; floor
                # division is exact because the divisor is positive
                sep = (u * u - s[q] * s[q] + g[y, u] ** 2 - g[y, s[q]] ** 2) // (
                    2 * (u - s[q])
                )
                if sep + 1 < w:
                    q += 1
                    s[q] = u
                    t[q] = sep + 1
        for x in range(w - 1, -1, -1):
            out[y, x] = (x - s[q]) ** 2 + g[y, s[q]] ** 2
            if x == t[q]:
                q -= 1
    return out


def edt_squared(mask: np.ndarray) -> np.ndarray:
    """Exact integer squared Euclidean distance to the nearest foreground."""
    m = as_mask(mask)
    if not m.any():
        raise EmptyMask("distance transform of an empty mask is undefined")
    return _edt_sq(np.ascontiguousarray(m, dtype=np.uint8))


def edt(mask: np.ndarray, spacing: float = 1.0) -> np.ndarray:
    """Euclidean distance map to the nearest foreground pixel.

    Zero on foreground; finite everywhere (the mask must be nonempty).
    ``spacing`` scales pixel distances to physical units.
    """
    return np.sqrt(edt_squared(mask).astype(np.float64)) * float(spacing)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Boundary pixels of a mask under 4-connectivity.

    A foreground pixel is boundary when at least one 4-neighbor is
    background or the pixel lies on the image border.
    """
    m = as_mask(mask)
    interior = np.zeros_like(m)
    if m.shape[0] > 2 and m.shape[1] > 2:
        core = m[1:-1, 1:-1]
        interior[1:-1, 1:-1] = (
            core & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
        )
    return m & ~interior


def _surface_distances(a: np.ndarray, b: np.ndarray, spacing: float):
    """Directed boundary distance samples (d(∂a→∂b), d(∂b→∂a))."""
    a, b = as_mask(a), as_mask(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    ba, bb = boundary(a), boundary(b)
    if not ba.any() or not bb.any():
        raise EmptyMask("surface distance needs two nonempty masks")
    d_to_b = edt(bb, spacing)
    d_to_a = edt(ba, spacing)
    return d_to_b[ba], d_to_a[bb]


def assd(a: np.ndarray, b: np.ndarray, spacing: float = 1.0) -> float:
    """Average symmetric surface distance between two nonempty masks."""
    da, db = _surface_distances(a, b, spacing)
    return float((da.sum() + db.sum()) / (da.size + db.size))


def hd95(a: np.ndarray, b: np.ndarray, spacing: float = 1.0) -> float:
    """95th-percentile symmetric Hausdorff distance (nearest rank).

    Both directed distance multisets are pooled; the returned value is
    the ``ceil(0.95 * n)``-th smallest of the pool.
    """
    da, db = _surface_distances(a, b, spacing)
    pool = np.sort(np.concatenate([da, db]))
    rank = math.ceil(0.95 * pool.size)
    return float(pool[rank - 1])


# -- fragment matching --------------------------------------------------------


@dataclass
class MatchResult:
    """One-to-one fragment assignment maximizing total IoU."""

    pairs: list[tuple[int, int, float]]  # (pred index, gt index, iou)
    unmatched_pred: list[int]
    unmatched_gt: list[int]


def match_fragments(preds: list[np.ndarray], gts: list[np.ndarray]) -> MatchResult:
    """Optimally assign predicted fragments to reference fragments.

    The assignment maximizes total IoU over all one-to-one pairings
    (Hungarian method); pairs with zero IoU are discarded rather than
    matched, so every returned pair has iou > 0.
    """
    if not preds or not gts:
        return MatchResult([], list(range(len(preds))), list(range(len(gts))))
    table = np.zeros((len(preds), len(gts)), dtype=np.float64)
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            table[i, j] = iou(p, g)
    rows, cols = linear_sum_assignment(table, maximize=True)
    pairs = [(int(i), int(j), float(table[i, j])) for i, j in zip(rows, cols)
             if table[i, j] > 0.0]
    used_p = {i for i, _, _ in pairs}
    used_g = {j for _, j, _ in pairs}
    return MatchResult(
        pairs=pairs,
        unmatched_pred=[i for i in range(len(preds)) if i not in used_p],
        unmatched_gt=[j for j in range(len(gts)) if j not in used_g],
    )


# -- per-image evaluation -----------------------------------------------------


@dataclass
class MetricsRecord:
    """Scores of one (image, category, level) cell."""

    image_id: str
    category: CategoryId
    level: str  # LEVEL_CATEGORY or LEVEL_FRAGMENT
    iou: float
    assd: float
    hd95: float
    empty_pred: bool = False
    empty_gt: bool = False
    penalty_applied: bool = False
    false_positives: int = 0  # fragment level: predictions left unmatched

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "category": self.category.name,
            "level": self.level,
            "iou": self.iou,
            "assd": self.assd,
            "hd95": self.hd95,
            "empty_pred": self.empty_pred,
            "empty_gt": self.empty_gt,
            "penalty_applied": self.penalty_applied,
            "false_positives": self.false_positives,
        }


def _diagonal(height: int, width: int, spacing: float) -> float:
    return math.hypot(height, width) * spacing


def evaluate_image(
    pred: FragmentMaskSet,
    gt: FragmentMaskSet,
    image_id: str = "",
    policy: str = POLICY_DIAGONAL,
    spacing: float = 1.0,
) -> list[MetricsRecord]:
    """Score a predicted mask set against the reference for one image.

    Emits up to two records per category.  The category-level record is
    computed on the unions of each side's fragment masks.  The
    fragment-level record averages, unweighted over nonempty reference
    fragments, the scores of each fragment's optimally matched partner;
    an unmatched reference fragment contributes IoU 0 and, under
    ``diagonal_penalty``, the image diagonal for both distances (under
    ``skip_record`` its distances are simply left out of the averages).
    Unmatched predictions only increment ``false_positives``.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown empty-mask policy: {policy!r}")
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise DimensionMismatch(
            f"prediction dims ({pred.height}, {pred.width}) != "
            f"reference dims ({gt.height}, {gt.width})"
        )
    diag = _diagonal(gt.height, gt.width, spacing)
    records: list[MetricsRecord] = []
    for cat in CategoryId:
        pu = pred.category_union(cat)
        gu = gt.category_union(cat)
        p_empty, g_empty = not pu.any(), not gu.any()
        if p_empty and g_empty:
            records.append(MetricsRecord(image_id, cat, LEVEL_CATEGORY,
                                         1.0, 0.0, 0.0, True, True))
        elif p_empty or g_empty:
            if policy == POLICY_DIAGONAL:
                records.append(MetricsRecord(image_id, cat, LEVEL_CATEGORY,
                                             0.0, diag, diag, p_empty, g_empty,
                                             penalty_applied=True))
            # skip_record: omit
        else:
            records.append(MetricsRecord(
                image_id, cat, LEVEL_CATEGORY,
                iou(pu, gu), assd(pu, gu, spacing), hd95(pu, gu, spacing),
            ))

        p_frags = [m for m in pred.fragments(cat) if m.any()]
        g_frags = [m for m in gt.fragments(cat) if m.any()]
        rec = _fragment_record(p_frags, g_frags, image_id, cat, policy, diag, spacing)
        if rec is not None:
            records.append(rec)
    return records


def _fragment_record(p_frags, g_frags, image_id, cat, policy, diag, spacing):
    if not g_frags and not p_frags:
        return MetricsRecord(image_id, cat, LEVEL_FRAGMENT, 1.0, 0.0, 0.0, True, True)
    if not g_frags:
        # predictions with nothing to match: pure false positives
        if policy == POLICY_SKIP:
            return None
        return MetricsRecord(image_id, cat, LEVEL_FRAGMENT, 0.0, diag, diag,
                             empty_gt=True, penalty_applied=True,
                             false_positives=len(p_frags))
    match = match_fragments(p_frags, g_frags)
    by_gt = {j: (i, v) for i, j, v in match.pairs}
    ious, assds, hds = [], [], []
    penalized = False
    for j in range(len(g_frags)):
        if j in by_gt:
            i, v = by_gt[j]
            ious.append(v)
            assds.append(assd(p_frags[i], g_frags[j], spacing))
            hds.append(hd95(p_frags[i], g_frags[j], spacing))
        else:
            penalized = True
            ious.append(0.0)
            if policy == POLICY_DIAGONAL:
                assds.append(diag)
                hds.append(diag)
    if not assds:
        # skip_record with no matches at all: no distances to average
        return None
    return MetricsRecord(
        image_id, cat, LEVEL_FRAGMENT,
        float(np.mean(ious)), float(np.mean(assds)), float(np.mean(hds)),
        empty_pred=not p_frags,
        penalty_applied=penalized,
        false_positives=len(match.unmatched_pred),
    )


# -- aggregation --------------------------------------------------------------


@dataclass
class AggregateStats:
    """Mean with sample standard deviation over n records."""

    n: int
    mean: float
    sd: float

    def format(self, mean_digits: int = 3, sd_digits: int = 2) -> str:
        return f"{self.mean:.{mean_digits}f} ({self.sd:.{sd_digits}f})"


def aggregate(records: list[MetricsRecord]) -> dict[str, AggregateStats]:
    """Pool records into mean/SD per metric and level.

    Keys are ``iou_c``/``assd_c``/``hd95_c`` (category level) and
    ``iou_f``/``assd_f``/``hd95_f`` (fragment level).  Records are
    summed in a fixed order (image id, category, level) so the result
    does not depend on how the record list was produced.  SD is the
    sample standard deviation (divisor n - 1), defined as 0 for n = 1.
    """
    if not records:
        raise NoRecords("cannot aggregate an empty record list")
    ordered = sorted(records, key=lambda r: (r.image_id, int(r.category), r.level))
    groups: dict[str, list[float]] = {k: [] for k in AGGREGATE_KEYS}
    for r in ordered:
        suffix = "_c" if r.level == LEVEL_CATEGORY else "_f"
        groups["iou" + suffix].append(r.iou)
        groups["assd" + suffix].append(r.assd)
        groups["hd95" + suffix].append(r.hd95)
    out = {}
    for key, vals in groups.items():
        if not vals:
            continue
        arr = np.asarray(vals, dtype=np.float64)
        sd = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
        out[key] = AggregateStats(n=arr.size, mean=float(arr.mean()), sd=sd)
    return out
