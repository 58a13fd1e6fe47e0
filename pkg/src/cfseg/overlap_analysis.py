"""Overlap-versus-accuracy analysis over a projected dataset.

For every image the projection overlap of the left ilium with the other
two bones (computed on ground truth, so it reflects anatomy and view
angle, not model quality) is paired with the fragment-level IoU of each
category and with per-fragment IoUs.  Rows are ordered by descending
overlap ratio; a rank correlation summarizes how segmentation accuracy
moves with overlap.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .drr_projector import overlap_ratio
from .errors import DegenerateConstantSeries, EmptyReference, LengthMismatch
from .mask_model import CategoryId, FragmentMaskSet
from .metrics import (
    LEVEL_FRAGMENT,
    POLICY_DIAGONAL,
    evaluate_image,
    match_fragments,
)

REFERENCE_CATEGORY = CategoryId.LI


@dataclass
class OverlapRow:
    """One image's overlap ratio and segmentation accuracy."""

    image_id: str
    theta: float
    overlap: float | None  # None when the reference projection is empty
    iou_f: dict[CategoryId, float] = field(default_factory=dict)
    frag_iou: dict[tuple[CategoryId, int], float] = field(default_factory=dict)
    fp_px: dict[CategoryId, int] = field(default_factory=dict)
    fn_px: dict[CategoryId, int] = field(default_factory=dict)

    @property
    def flagged(self) -> bool:
        return self.overlap is None


def _analyze_one(image_id, theta, gt: FragmentMaskSet, pred: FragmentMaskSet,
                 policy: str) -> OverlapRow:
    try:
        ratio = overlap_ratio(gt, REFERENCE_CATEGORY)
    except EmptyReference:
        ratio = None
    row = OverlapRow(image_id=str(image_id), theta=float(theta), overlap=ratio)
    for rec in evaluate_image(pred, gt, image_id=str(image_id), policy=policy):
        if rec.level == LEVEL_FRAGMENT:
            row.iou_f[rec.category] = rec.iou
    for cat in CategoryId:
        gt_frags = [(i, m) for i, m in enumerate(gt.fragments(cat)) if m.any()]
        pred_frags = [m for m in pred.fragments(cat) if m.any()]
        match = match_fragments(pred_frags, [m for _, m in gt_frags])
        by_gt = {j: v for _, j, v in match.pairs}
        for pos, (slot, _) in enumerate(gt_frags):
            row.frag_iou[(cat, slot)] = by_gt.get(pos, 0.0)
        pu = pred.category_union(cat)
        gu = gt.category_union(cat)
        row.fp_px[cat] = int(np.count_nonzero(pu & ~gu))
        row.fn_px[cat] = int(np.count_nonzero(gu & ~pu))
    return row


def analyze(dataset, policy: str = POLICY_DIAGONAL) -> list[OverlapRow]:
    """Build one OverlapRow per (image_id, theta, gt, pred) record.

    ``dataset`` may be any iterable (a generator keeps memory bounded
    for large view sweeps).  Rows are sorted by overlap ratio
    descending, ties by image id ascending; rows whose reference
    category has no projection cannot be ranked and are appended at the
    end, flagged.
    """
    rows = [_analyze_one(image_id, theta, gt, pred, policy)
            for image_id, theta, gt, pred in dataset]
    ranked = sorted((r for r in rows if not r.flagged),
                    key=lambda r: (-r.overlap, r.image_id))
    flagged = sorted((r for r in rows if r.flagged), key=lambda r: r.image_id)
    return ranked + flagged


def spearman(xs, ys) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.size != y.size:
        raise LengthMismatch(f"series lengths differ: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise LengthMismatch(f"need at least 2 points, got {x.size}")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise DegenerateConstantSeries("rank correlation of a constant series")
    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")
    rho = np.corrcoef(rx, ry)[0, 1]
    return float(min(1.0, max(-1.0, rho)))


# -- report emission ----------------------------------------------------------

_FIXED_COLUMNS = ("image_id", "theta", "overlap_ratio",
                  "iou_f_sa", "iou_f_ri", "iou_f_li")


def _frag_col(cat: CategoryId, slot: int) -> str:
    return f"iou_{cat.name.lower()}_{slot}"


def _px_cols() -> list[str]:
    return [f"{kind}_px_{cat.name.lower()}"
            for cat in CategoryId for kind in ("fp", "fn")]


def emit_report(rows: list[OverlapRow], csv_path, summary_path=None) -> dict:
    """Write the overlap report CSV (and optional summary JSON).

    The CSV has one line per row in the given order.  The summary holds
    the Spearman correlation between overlap ratio and fragment-level
    IoU per category over the rankable rows, plus the extreme rows seen
    in this run (highest and lowest overlap with their IoUs), giving the
    report a concrete best/worst pair to point at.
    """
    from ._util import atomic_write_text, write_json

    if not rows:
        raise LengthMismatch("no rows to report")
    frag_cols = sorted(
        {(cat, slot) for r in rows for cat, slot in r.frag_iou},
        key=lambda cs: (int(cs[0]), cs[1]),
    )
    header = list(_FIXED_COLUMNS) + [_frag_col(c, s) for c, s in frag_cols] + _px_cols()
    lines = []
    for r in rows:
        rec = {
            "image_id": r.image_id,
            "theta": repr(r.theta),
            "overlap_ratio": "" if r.overlap is None else repr(r.overlap),
            "iou_f_sa": repr(r.iou_f.get(CategoryId.SA, 0.0)),
            "iou_f_ri": repr(r.iou_f.get(CategoryId.RI, 0.0)),
            "iou_f_li": repr(r.iou_f.get(CategoryId.LI, 0.0)),
        }
        for c, s in frag_cols:
            key = (c, s)
            rec[_frag_col(c, s)] = repr(r.frag_iou[key]) if key in r.frag_iou else ""
        for cat in CategoryId:
            rec[f"fp_px_{cat.name.lower()}"] = str(r.fp_px.get(cat, 0))
            rec[f"fn_px_{cat.name.lower()}"] = str(r.fn_px.get(cat, 0))
        lines.append(rec)

    import io

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    writer.writeheader()
    writer.writerows(lines)
    atomic_write_text(csv_path, buf.getvalue())

    ranked = [r for r in rows if not r.flagged]
    summary = {"n_rows": len(rows), "n_ranked": len(ranked)}
    for cat in CategoryId:
        key = f"spearman_overlap_iou_f_{cat.name.lower()}"
        pairs = [(r.overlap, r.iou_f[cat]) for r in ranked if cat in r.iou_f]
        try:
            summary[key] = spearman([p[0] for p in pairs], [p[1] for p in pairs])
        except (LengthMismatch, DegenerateConstantSeries):
            summary[key] = None
    if ranked:
        hi, lo = ranked[0], ranked[-1]
        summary["highest_overlap"] = _extreme(hi)
        summary["lowest_overlap"] = _extreme(lo)
    if summary_path is not None:
        write_json(summary_path, summary)
    return summary


def _extreme(row: OverlapRow) -> dict:
    return {
        "image_id": row.image_id,
        "theta": row.theta,
        "overlap_ratio": row.overlap,
        "iou_f": {cat.name: row.iou_f[cat] for cat in row.iou_f},
        "min_fragment": _extreme_fragment(row, min),
        "max_fragment": _extreme_fragment(row, max),
    }


def _extreme_fragment(row: OverlapRow, pick) -> dict | None:
    if not row.frag_iou:
        return None
    (cat, slot), value = pick(row.frag_iou.items(), key=lambda kv: kv[1])
    return {"fragment": f"{cat.name}{slot}", "iou": value}


def read_report(csv_path) -> list[OverlapRow]:
    """Parse a report CSV back into rows (exact float round-trip)."""
    rows = []
    with open(csv_path, newline="") as f:
        for rec in csv.DictReader(f):
            row = OverlapRow(
                image_id=rec["image_id"],
                theta=float(rec["theta"]),
                overlap=None if rec["overlap_ratio"] == "" else float(rec["overlap_ratio"]),
            )
            for cat in CategoryId:
                low = cat.name.lower()
                row.iou_f[cat] = float(rec[f"iou_f_{low}"])
                row.fp_px[cat] = int(rec[f"fp_px_{low}"])
                row.fn_px[cat] = int(rec[f"fn_px_{low}"])
            for col, value in rec.items():
                if value == "" or value is None or not col.startswith("iou_"):
                    continue
                parts = col.split("_")
                if len(parts) == 3 and parts[1] in ("sa", "li", "ri") and parts[2].isdigit():
                    row.frag_iou[(CategoryId.from_name(parts[1]), int(parts[2]))] = float(value)
            rows.append(row)
    return rows
