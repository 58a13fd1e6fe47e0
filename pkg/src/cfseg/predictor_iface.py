"""Predictor abstraction: deterministic mock plus an on-disk exchange format.

Real category/fragment networks are out of scope; anything that can
write the exchange layout can serve as a backend.  The mock predictor
degrades ground truth in controlled, independently toggleable ways
(dilate/erode, translate, drop, spurious blobs) so every post-processing
rule can be exercised on its own.  Given the same (seed, image index,
category) the mock is a pure function: byte-identical output across
runs and across parallelism.

Exchange layout, one directory per image under a predictions root:

    predictions/<image_id>/category_sa.cfsm   (bit 0 = mask; or .pgm for
    predictions/<image_id>/category_li.cfsm    a probability map)
    predictions/<image_id>/category_ri.cfsm
    predictions/<image_id>/fragments.json

``fragments.json`` is an array of objects with keys ``category``
("SA"|"LI"|"RI"), ``mask`` (a .cfsm filename in the same directory,
bit 0), ``score`` (float in [0,1]) and optional ``bbox``
([r0, c0, r1, c1], half-open, tight around the mask).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._rng import STREAM_MOCK, stream
from ._util import read_json, write_json
from .errors import (
    BadManifest,
    DimensionMismatch,
    MissingCategoryFile,
    ValidationError,
)
from .mask_model import (
    CategoryId,
    FragmentMaskSet,
    as_mask,
    read_mask_file,
    read_pgm,
    write_mask_file,
    write_pgm,
)

CATEGORY_FILE = "category_{}.cfsm"
CATEGORY_FILE_PROB = "category_{}.pgm"
FRAGMENTS_FILE = "fragments.json"


def tight_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Half-open (r0, c0, r1, c1) bounds of a mask; (0, 0, 0, 0) if empty."""
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return (0, 0, 0, 0)
    cols = np.flatnonzero(mask.any(axis=0))
    return (int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1)


@dataclass
class CategoryPrediction:
    """Step-1 output for one category: probability map or hard mask."""

    category: CategoryId
    prob: np.ndarray
    binary: bool = True  # True when prob only takes values 0 and 1

    def __post_init__(self) -> None:
        self.category = CategoryId(self.category)
        p = np.asarray(self.prob, dtype=np.float64)
        if p.ndim != 2 or min(p.shape) < 1:
            raise ValidationError(f"probability map must be 2-D, got shape {p.shape}")
        if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
            raise ValidationError("probability map values outside [0, 1]")
        if self.binary and not np.all((p == 0.0) | (p == 1.0)):
            raise ValidationError("binary category prediction has soft values")
        self.prob = p


@dataclass
class FragmentCandidate:
    """Step-2 output: one candidate instance with a confidence score."""

    category: CategoryId
    mask: np.ndarray
    confidence: float
    bbox: tuple[int, int, int, int] | None = None

    def __post_init__(self) -> None:
        self.category = CategoryId(self.category)
        self.mask = as_mask(self.mask)
        c = float(self.confidence)
        if not np.isfinite(c):
            raise ValidationError(f"confidence must be finite, got {self.confidence}")
        self.confidence = c
        tight = tight_bbox(self.mask)
        if self.bbox is None:
            self.bbox = tight
        else:
            self.bbox = tuple(int(v) for v in self.bbox)
            if self.mask.any() and self.bbox != tight:
                raise ValidationError(
                    f"bbox {self.bbox} is not tight around the mask (tight: {tight})"
                )

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))


@dataclass(frozen=True)
class MockConfig:
    """Degradation knobs of the mock predictor.

    At most one of dilate_px/erode_px may be nonzero.  ``structuring``
    selects the morphology footprint: "disc" (radius r, Euclidean) or
    "square" ((2r+1) x (2r+1), handy for hand-computed expectations).
    Matched candidates score 1 - 0.15u and spurious ones score u, with
    u uniform per (seed, image index, category) stream, so matched
    confidence never falls below 0.85 and the default 0.8 cut keeps
    every true fragment.  A fully identity config draws nothing and
    scores every candidate exactly 1.0, making the mock a strict
    pass-through.
    """

    seed: int = 0
    dilate_px: int = 0
    erode_px: int = 0
    translate: tuple[int, int] = (0, 0)  # (rows, cols)
    drop_prob: float = 0.0
    spurious: int = 0
    structuring: str = "disc"

    def __post_init__(self) -> None:
        if self.dilate_px < 0 or self.erode_px < 0:
            raise ValidationError("morphology radii must be >= 0")
        if self.dilate_px and self.erode_px:
            raise ValidationError("at most one of dilate_px/erode_px may be nonzero")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValidationError(f"drop_prob outside [0, 1]: {self.drop_prob}")
        if self.spurious < 0:
            raise ValidationError(f"spurious count must be >= 0: {self.spurious}")
        if self.structuring not in ("disc", "square"):
            raise ValidationError(f"unknown structuring element: {self.structuring!r}")
        if len(self.translate) != 2:
            raise ValidationError(f"translate must be (rows, cols): {self.translate}")
        object.__setattr__(self, "translate",
                           (int(self.translate[0]), int(self.translate[1])))

    @property
    def is_identity(self) -> bool:
        """True when no degradation of any kind is configured."""
        return (self.dilate_px == 0 and self.erode_px == 0
                and self.translate == (0, 0) and self.drop_prob == 0.0
                and self.spurious == 0)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "dilate_px": self.dilate_px,
            "erode_px": self.erode_px,
            "translate": list(self.translate),
            "drop_prob": self.drop_prob,
            "spurious": self.spurious,
            "structuring": self.structuring,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MockConfig":
        known = {"seed", "dilate_px", "erode_px", "translate", "drop_prob",
                 "spurious", "structuring"}
        bad = set(d) - known
        if bad:
            raise ValidationError(f"unknown mock config keys: {sorted(bad)}")
        kw = dict(d)
        if "translate" in kw:
            kw["translate"] = tuple(kw["translate"])
        return cls(**kw)


def _footprint(radius: int, kind: str) -> np.ndarray:
    if kind == "square":
        return np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return (yy * yy + xx * xx) <= radius * radius


def _translate(mask: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """Integer shift with zero fill (no wrap-around)."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    src_r = slice(max(0, -dr), min(h, h - dr))
    src_c = slice(max(0, -dc), min(w, w - dc))
    dst_r = slice(max(0, dr), min(h, h + dr))
    dst_c = slice(max(0, dc), min(w, w + dc))
    if src_r.start < src_r.stop and src_c.start < src_c.stop:
        out[dst_r, dst_c] = mask[src_r, src_c]
    return out


def _degrade(mask: np.ndarray, cfg: MockConfig) -> np.ndarray:
    out = mask
    if cfg.dilate_px:
        out = ndimage.binary_dilation(out, _footprint(cfg.dilate_px, cfg.structuring))
    elif cfg.erode_px:
        out = ndimage.binary_erosion(out, _footprint(cfg.erode_px, cfg.structuring))
    dr, dc = cfg.translate
    if dr or dc:
        out = _translate(out, dr, dc)
    return out.astype(bool, copy=False)


def mock_predict_category(
    gt: FragmentMaskSet, cfg: MockConfig, category: CategoryId, image_index: int = 0
) -> CategoryPrediction:
    """Degraded union of the category's GT fragments as a hard 0/1 map."""
    category = CategoryId(category)
    degraded = _degrade(gt.category_union(category), cfg)
    return CategoryPrediction(category=category,
                              prob=degraded.astype(np.float64), binary=True)


def mock_predict_fragments(
    gt: FragmentMaskSet, cfg: MockConfig, category: CategoryId, image_index: int = 0
) -> list[FragmentCandidate]:
    """Per-fragment degraded candidates plus optional spurious blobs.

    Every GT fragment slot consumes the same RNG draws (drop decision,
    then confidence) whether or not it is dropped, so a fragment's
    confidence does not depend on the fate of earlier fragments.  An
    identity config short-circuits: GT fragments pass through with
    confidence exactly 1.0 and the RNG is never touched.
    """
    category = CategoryId(category)
    if cfg.is_identity:
        return [FragmentCandidate(category=category, mask=mask.copy(), confidence=1.0)
                for mask in gt.fragments(category)]
    rng = stream(cfg.seed, STREAM_MOCK, image_index, int(category))
    out: list[FragmentCandidate] = []
    for mask in gt.fragments(category):
        u_drop = float(rng.uniform())
        u_conf = float(rng.uniform())
        if u_drop < cfg.drop_prob:
            continue
        out.append(FragmentCandidate(
            category=category,
            mask=_degrade(mask, cfg),
            confidence=1.0 - 0.15 * u_conf,
        ))
    h, w = gt.height, gt.width
    for _ in range(cfg.spurious):
        r = int(rng.integers(0, h))
        c = int(rng.integers(0, w))
        radius = int(rng.integers(3, 9))
        conf = float(rng.uniform())
        yy, xx = np.ogrid[0:h, 0:w]
        blob = ((yy - r) ** 2 + (xx - c) ** 2) <= radius * radius
        out.append(FragmentCandidate(category=category, mask=blob, confidence=conf))
    return out


class MockPredictor:
    """Pipeline backend that degrades a known ground truth per its config.

    The ground truth is bound at construction (one instance per image);
    the ``image`` and ``category_mask`` arguments of the backend
    protocol are accepted but unused, since the mock degrades GT
    directly.
    """

    def __init__(self, gt: FragmentMaskSet, cfg: MockConfig, image_index: int = 0):
        self.gt = gt
        self.cfg = cfg
        self.image_index = image_index

    def predict_category(self, image, category) -> CategoryPrediction:
        return mock_predict_category(self.gt, self.cfg, category, self.image_index)

    def predict_fragments(self, image, category_mask, category) -> list[FragmentCandidate]:
        return mock_predict_fragments(self.gt, self.cfg, category, self.image_index)


class ExternalPredictor:
    """Pipeline backend serving predictions from an exchange directory."""

    def __init__(self, root, image_id: str):
        self.categories, self.candidates = load_external_predictions(root, image_id)

    def predict_category(self, image, category) -> CategoryPrediction:
        return self.categories[CategoryId(category)]

    def predict_fragments(self, image, category_mask, category) -> list[FragmentCandidate]:
        cat = CategoryId(category)
        return [c for c in self.candidates if c.category == cat]


# -- exchange format ----------------------------------------------------------


def write_predictions(
    root,
    image_id: str,
    categories: dict[CategoryId, CategoryPrediction],
    candidates: list[FragmentCandidate],
) -> str:
    """Write one image's predictions in the exchange layout; returns the dir."""
    img_dir = os.path.join(os.fspath(root), image_id)
    os.makedirs(img_dir, exist_ok=True)
    for cat in CategoryId:
        if cat not in categories:
            raise ValidationError(f"missing category prediction: {cat.name}")
        pred = categories[cat]
        stem = cat.name.lower()
        if pred.binary:
            words = pred.prob.astype(np.uint32)  # bit 0
            write_mask_file(words, os.path.join(img_dir, CATEGORY_FILE.format(stem)))
        else:
            write_pgm(pred.prob, os.path.join(img_dir, CATEGORY_FILE_PROB.format(stem)))
    manifest = []
    for i, cand in enumerate(candidates):
        name = f"fragment_{i:03d}.cfsm"
        write_mask_file(cand.mask.astype(np.uint32), os.path.join(img_dir, name))
        manifest.append({
            "category": cand.category.name,
            "mask": name,
            "score": cand.confidence,
            "bbox": list(cand.bbox),
        })
    write_json(os.path.join(img_dir, FRAGMENTS_FILE), manifest)
    return img_dir


def _read_category_file(img_dir: str, cat: CategoryId) -> CategoryPrediction:
    stem = cat.name.lower()
    hard = os.path.join(img_dir, CATEGORY_FILE.format(stem))
    soft = os.path.join(img_dir, CATEGORY_FILE_PROB.format(stem))
    if os.path.exists(hard):
        words = read_mask_file(hard)
        if np.any(words > 1):
            raise BadManifest(f"{hard}: category files must only use bit 0")
        return CategoryPrediction(category=cat, prob=words.astype(np.float64),
                                  binary=True)
    if os.path.exists(soft):
        img = read_pgm(soft)
        return CategoryPrediction(category=cat, prob=img.intensity, binary=False)
    raise MissingCategoryFile(f"no {CATEGORY_FILE.format(stem)} or "
                              f"{CATEGORY_FILE_PROB.format(stem)} in {img_dir}")


def load_external_predictions(
    root, image_id: str
) -> tuple[dict[CategoryId, CategoryPrediction], list[FragmentCandidate]]:
    """Load and validate one image's predictions from the exchange layout."""
    img_dir = os.path.join(os.fspath(root), image_id)
    if not os.path.isdir(img_dir):
        raise MissingCategoryFile(f"no prediction directory for image {image_id!r}")
    categories = {cat: _read_category_file(img_dir, cat) for cat in CategoryId}
    shape = categories[CategoryId.SA].prob.shape
    for cat in CategoryId:
        if categories[cat].prob.shape != shape:
            raise DimensionMismatch(
                f"{img_dir}: category map dims disagree "
                f"({cat.name}: {categories[cat].prob.shape} vs SA: {shape})"
            )
    manifest_path = os.path.join(img_dir, FRAGMENTS_FILE)
    if not os.path.exists(manifest_path):
        raise BadManifest(f"{manifest_path} is missing")
    manifest = read_json(manifest_path)
    if not isinstance(manifest, list):
        raise BadManifest(f"{manifest_path}: expected a JSON array")
    candidates = []
    for i, entry in enumerate(manifest):
        if not isinstance(entry, dict):
            raise BadManifest(f"{manifest_path}[{i}]: expected an object")
        missing = {"category", "mask", "score"} - set(entry)
        if missing:
            raise BadManifest(f"{manifest_path}[{i}]: missing keys {sorted(missing)}")
        try:
            cat = CategoryId.from_name(str(entry["category"]))
        except ValidationError:
            raise BadManifest(
                f"{manifest_path}[{i}]: unknown category {entry['category']!r}"
            ) from None
        score = entry["score"]
        if not isinstance(score, (int, float)) or not 0.0 <= float(score) <= 1.0:
            raise BadManifest(f"{manifest_path}[{i}]: score {score!r} outside [0, 1]")
        mask_name = str(entry["mask"])
        mask_path = os.path.join(img_dir, mask_name)
        if os.path.basename(mask_name) != mask_name or not os.path.exists(mask_path):
            raise BadManifest(f"{manifest_path}[{i}]: mask file {mask_name!r} "
                              "missing from the image directory")
        words = read_mask_file(mask_path)
        if np.any(words > 1):
            raise BadManifest(f"{mask_path}: fragment masks must only use bit 0")
        if words.shape != shape:
            raise DimensionMismatch(
                f"{mask_path}: dims {words.shape} != category dims {shape}"
            )
        try:
            cand = FragmentCandidate(
                category=cat,
                mask=words.astype(bool),
                confidence=float(score),
                bbox=tuple(entry["bbox"]) if "bbox" in entry else None,
            )
        except ValidationError as e:
            raise BadManifest(f"{manifest_path}[{i}]: {e}") from None
        candidates.append(cand)
    return categories, candidates
