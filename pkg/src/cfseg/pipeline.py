"""Step-3 post-processing and the three-step segmentation orchestrator.

The pipeline runs per category: (1) a category mask is predicted and
binarized, (2) fragment candidates are predicted given the image and
that mask, (3) candidates are post-processed: confidence filtering
(strict ``>`` threshold), greedy mask-level NMS, intersection with the
category mask, canonical reordering, and a 10-fragment cap.

A backend must provide::

    predict_category(image, category) -> CategoryPrediction
    predict_fragments(image, category_mask, category) -> [FragmentCandidate]

Post-processing order within Step 3 is fixed; intersection runs before
reordering so the final masks determine the canonical order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import CapExceededWarning, DimensionMismatch, ValidationError
from .mask_model import MAX_FRAGMENTS, CategoryId, FragmentMaskSet, Radiograph
from .metrics import iou
from .predictor_iface import CategoryPrediction, FragmentCandidate


@dataclass(frozen=True)
class PipelineConfig:
    """Post-processing thresholds; defaults give the standard behavior."""

    tau: float = 0.8  # candidates survive only with confidence > tau
    binarize_threshold: float = 0.5
    iou_nms: float = 0.5  # 1.0 disables suppression of distinct masks
    drop_empty: bool = True

    def __post_init__(self) -> None:
        for name in ("tau", "binarize_threshold", "iou_nms"):
            v = getattr(self, name)
            if not 0.0 <= float(v) <= 1.0:
                raise ValidationError(f"{name} outside [0, 1]: {v}")

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "binarize_threshold": self.binarize_threshold,
            "iou_nms": self.iou_nms,
            "drop_empty": self.drop_empty,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {"tau", "binarize_threshold", "iou_nms", "drop_empty"}
        bad = set(d) - known
        if bad:
            raise ValidationError(f"unknown pipeline config keys: {sorted(bad)}")
        return cls(**d)


def binarize_category(pred: CategoryPrediction, threshold: float = 0.5) -> np.ndarray:
    """Hard mask from a category probability map: foreground iff p >= t."""
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError(f"threshold outside [0, 1]: {threshold}")
    return pred.prob >= threshold


def filter_by_confidence(
    candidates: list[FragmentCandidate], tau: float = 0.8
) -> list[FragmentCandidate]:
    """Keep candidates scoring strictly above tau, in input order."""
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau outside [0, 1]: {tau}")
    return [c for c in candidates if c.confidence > tau]


def mask_nms(
    candidates: list[FragmentCandidate], iou_nms: float = 0.5
) -> list[FragmentCandidate]:
    """Greedy mask-level non-maximum suppression within each category.

    Candidates are visited by descending confidence (ties: larger area
    first, then input order); one is kept iff its IoU with every
    already-kept candidate of the same category is strictly below
    ``iou_nms``.  Kept candidates are returned in visiting order.
    """
    if not 0.0 <= iou_nms <= 1.0:
        raise ValidationError(f"iou_nms outside [0, 1]: {iou_nms}")
    order = sorted(range(len(candidates)),
                   key=lambda i: (-candidates[i].confidence, -candidates[i].area, i))
    kept: list[FragmentCandidate] = []
    for i in order:
        cand = candidates[i]
        if all(iou(cand.mask, k.mask) < iou_nms
               for k in kept if k.category == cand.category):
            kept.append(cand)
    return kept


def intersect_with_category(fragment: np.ndarray, category_mask: np.ndarray) -> np.ndarray:
    """Clip a fragment mask to the category mask (pixelwise AND)."""
    if fragment.shape != category_mask.shape:
        raise DimensionMismatch(
            f"fragment {fragment.shape} vs category mask {category_mask.shape}"
        )
    return fragment & category_mask


def _centroid(mask: np.ndarray) -> tuple[float, float]:
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return (0.0, 0.0)
    return (float(rows.mean()), float(cols.mean()))


def canonical_reorder(
    fragments: list[np.ndarray], drop_empty: bool = True
) -> list[np.ndarray]:
    """Deterministic fragment order: area descending, centroid tie-break.

    Ties in area are broken by centroid (row, then col) ascending, then
    by raw mask bytes, so the order is total: any permutation of the
    same masks reorders identically.  Empty masks are dropped when
    ``drop_empty`` (they carry no instance) or sorted last otherwise.
    """
    frags = list(fragments)
    if drop_empty:
        frags = [m for m in frags if m.any()]
    return sorted(
        frags,
        key=lambda m: (-int(np.count_nonzero(m)), *_centroid(m), m.tobytes()),
    )


def postprocess_category(
    candidates: list[FragmentCandidate],
    category_mask: np.ndarray,
    cfg: PipelineConfig,
) -> list[np.ndarray]:
    """Step 3 for one category: filter, NMS, intersect, reorder, cap."""
    surviving = filter_by_confidence(candidates, cfg.tau)
    surviving = mask_nms(surviving, cfg.iou_nms)
    clipped = [intersect_with_category(c.mask, category_mask) for c in surviving]
    frags = canonical_reorder(clipped, drop_empty=cfg.drop_empty)
    if len(frags) > MAX_FRAGMENTS:
        warnings.warn(
            f"{len(frags)} fragments survived post-processing; "
            f"keeping the {MAX_FRAGMENTS} largest",
            CapExceededWarning,
            stacklevel=2,
        )
        frags = frags[:MAX_FRAGMENTS]  # canonical order is area-descending
    return frags


def run_cfs(image: Radiograph, backend, cfg: PipelineConfig | None = None) -> FragmentMaskSet:
    """Run category prediction, fragment prediction, and post-processing."""
    cfg = cfg or PipelineConfig()
    shape = (image.height, image.width)
    masks: dict[CategoryId, list[np.ndarray]] = {}
    for cat in CategoryId:
        cat_pred = backend.predict_category(image, cat)
        if cat_pred.prob.shape != shape:
            raise DimensionMismatch(
                f"{cat.name} category map {cat_pred.prob.shape} vs image {shape}"
            )
        cat_mask = binarize_category(cat_pred, cfg.binarize_threshold)
        candidates = backend.predict_fragments(image, cat_mask, cat)
        candidates = [c for c in candidates if c.category == cat]
        for c in candidates:
            if c.mask.shape != shape:
                raise DimensionMismatch(
                    f"{cat.name} candidate mask {c.mask.shape} vs image {shape}"
                )
        masks[cat] = postprocess_category(candidates, cat_mask, cfg)
    return FragmentMaskSet(height=shape[0], width=shape[1], masks=masks)
