"""Acceptance gate: ten behavioral criteria, one PASS/FAIL line each.

Every criterion is checked against an oracle computed by independent
brute-force code in this file (or against hand-derivable invariants),
never against the library's own routines.  Run with ``-v`` to get the
per-criterion verdict lines, or ``-s`` to see the printed details.
"""

import itertools
import json
import time

import numpy as np
import pytest

from cfseg import (
    CategoryId,
    FragmentMaskSet,
    LabelVolume,
    MockConfig,
    MockPredictor,
    PhantomSpec,
    PipelineConfig,
    ProjectionGeometry,
    analyze,
    assd,
    crop,
    decode,
    edt_squared,
    emit_report,
    encode,
    evaluate_image,
    generate,
    hd95,
    intersect_with_category,
    iou,
    make_views,
    match_fragments,
    overlap_ratio,
    read_mask_file,
    run_cfs,
    write_mask_file,
    write_volume,
    zero_pad,
)
from cfseg.cli import main
from cfseg.drr_projector import project
from cfseg.metrics import aggregate

from conftest import random_mask


def verdict(n, ok, detail):
    print(f"criterion {n:02d}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {n:02d}: {detail}"


# -- brute-force oracles -------------------------------------------------------


def brute_iou(a, b):
    inter = int(np.count_nonzero(a & b))
    union = int(np.count_nonzero(a | b))
    return 1.0 if union == 0 else inter / union


def brute_boundary(mask):
    h, w = mask.shape
    out = np.zeros_like(mask)
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            if (i == 0 or j == 0 or i == h - 1 or j == w - 1
                    or not (mask[i - 1, j] and mask[i + 1, j]
                            and mask[i, j - 1] and mask[i, j + 1])):
                out[i, j] = True
    return out


def brute_surface_stats(a, b):
    """(assd, hd95) from all-pairs boundary distances."""
    pa = np.argwhere(brute_boundary(a)).astype(np.float64)
    pb = np.argwhere(brute_boundary(b)).astype(np.float64)
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
    a_to_b = np.sqrt(d2.min(axis=1))
    b_to_a = np.sqrt(d2.min(axis=0))
    mean = (a_to_b.sum() + b_to_a.sum()) / (len(pa) + len(pb))
    pool = np.sort(np.concatenate([a_to_b, b_to_a]))
    rank = int(np.ceil(0.95 * pool.size))
    return mean, pool[rank - 1]


def brute_edt_sq(mask):
    ii, jj = np.nonzero(mask)
    gi, gj = np.indices(mask.shape)
    d2 = ((gi[..., None] - ii) ** 2 + (gj[..., None] - jj) ** 2)
    return d2.min(axis=2)


def shift(mask, dr, dc):
    h, w = mask.shape
    out = np.zeros_like(mask)
    src = mask[max(0, -dr):h - max(0, dr), max(0, -dc):w - max(0, dc)]
    out[max(0, dr):h - max(0, -dr), max(0, dc):w - max(0, -dc)] = src
    return out


def brute_dilate(mask, r):
    out = np.zeros_like(mask)
    for dr in range(-r, r + 1):
        for dc in range(-r, r + 1):
            if dr * dr + dc * dc <= r * r:
                out |= shift(mask, dr, dc)
    return out


def brute_best_matching(preds, gts):
    table = [[brute_iou(p, g) for g in gts] for p in preds]
    na, nb = len(preds), len(gts)
    best = 0.0
    if na <= nb:
        for perm in itertools.permutations(range(nb), na):
            best = max(best, sum(table[i][perm[i]] for i in range(na)))
    else:
        for perm in itertools.permutations(range(na), nb):
            best = max(best, sum(table[perm[j]][j] for j in range(nb)))
    return best


def nonempty(rng, h, w, p):
    m = random_mask(rng, h, w, p)
    if not m.any():
        m[rng.integers(h), rng.integers(w)] = True
    return m


# -- shared fixtures -----------------------------------------------------------


@pytest.fixture(scope="module")
def phantom128():
    return generate(PhantomSpec(seed=7, dims=(128, 128, 128),
                                fragments=(2, 2, 1)))


@pytest.fixture(scope="module")
def views20(phantom64):
    return make_views(phantom64, 20, width=96, height=96)


# -- criteria ------------------------------------------------------------------


def test_criterion_01_metric_oracle_equivalence():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        p = rng.uniform(0.1, 0.5)
        a = nonempty(rng, 32, 32, p)
        b = nonempty(rng, 32, 32, p)
        assert iou(a, b) == brute_iou(a, b)
        want_assd, want_hd = brute_surface_stats(a, b)
        worst = max(worst, abs(assd(a, b) - want_assd),
                    abs(hd95(a, b) - want_hd))
    elapsed = time.perf_counter() - t0
    verdict(1, worst <= 1e-9 and elapsed <= 10.0,
            f"200 pairs, max |err|={worst:.2e} (tol 1e-9), {elapsed:.2f}s (limit 10s)")


def test_criterion_02_edt_exactness():
    rng = np.random.default_rng(102)
    bad = 0
    for _ in range(100):
        m = nonempty(rng, 64, 64, rng.uniform(0.02, 0.15))
        if not np.array_equal(edt_squared(m), brute_edt_sq(m)):
            bad += 1
    verdict(2, bad == 0, f"100 masks, {bad} with any integer mismatch")


def test_criterion_03_pipeline_identity(phantom128):
    views = make_views(phantom128, 20, workers=8)
    # nms=1.0: distinct fragment projections that overlap must all survive
    cfg = PipelineConfig(iou_nms=1.0)
    records = []
    for k, (image, gt, _theta) in enumerate(views):
        pred = run_cfs(image, MockPredictor(gt, MockConfig(), image_index=k), cfg)
        records.extend(evaluate_image(pred, gt, image_id=f"view{k:02d}"))
    bad = [r for r in records
           if r.iou != 1.0 or r.assd != 0.0 or r.hd95 != 0.0]
    verdict(3, len(records) == 120 and not bad,
            f"{len(records)} records over 20 views, {len(bad)} imperfect")


def test_criterion_04_intersection_refinement(views64):
    fixtures = []
    for _, gt, _ in views64:
        for cat in CategoryId:
            cat_mask = gt.category_union(cat)
            for frag in gt.fragments(cat):
                if frag.any():
                    fixtures.append((frag, cat_mask))
    rng = np.random.default_rng(104)
    from conftest import random_blob_mask
    for _ in range(15):
        frag = random_blob_mask(rng, 64, 64)
        cat_mask = frag | random_blob_mask(rng, 64, 64)
        fixtures.append((frag, cat_mask))

    checked = leaks = violations = 0
    for frag, cat_mask in fixtures:
        for r in (1, 2, 3):
            cand = brute_dilate(frag, r)
            before = iou(cand, frag)
            after = iou(intersect_with_category(cand, cat_mask), frag)
            checked += 1
            if after < before:
                violations += 1
            if (cand & ~cat_mask).any():
                leaks += 1
                if not after > before:
                    violations += 1
    verdict(4, len(fixtures) >= 50 and leaks > 0 and violations == 0,
            f"{len(fixtures)} fixtures x r in {{1,2,3}} = {checked} cases, "
            f"{leaks} with leakage, {violations} violations")


def test_criterion_05_degradation_monotone(views20):
    means = []
    for radius in range(5):
        cfg = MockConfig(seed=31, dilate_px=radius)
        records = []
        for k, (image, gt, _theta) in enumerate(views20):
            pred = run_cfs(image, MockPredictor(gt, cfg, image_index=k),
                           PipelineConfig(iou_nms=1.0))
            records.extend(evaluate_image(pred, gt, image_id=f"v{k:02d}"))
        means.append(aggregate(records)["iou_f"].mean)
    ok = all(means[i + 1] <= means[i] + 1e-12 for i in range(4))
    verdict(5, ok, "mean IoU-F by dilation 0..4: "
            + ", ".join(f"{m:.4f}" for m in means))


def test_criterion_06_projection_conservation():
    rng = np.random.default_rng(106)
    mu = rng.random((64, 64, 64)).astype(np.float32)
    vol = LabelVolume(dims=(64, 64, 64), spacing=(1.0, 1.0, 1.0),
                      mu=mu, labels=np.zeros((64, 64, 64), np.uint8))
    mu64 = mu.astype(np.float64)
    worst = 0.0
    for theta, axis in ((0.0, 1), (90.0, 2)):  # sum over y, then over x
        geom = ProjectionGeometry(theta_deg=theta, width=64, height=64,
                                  pixel_mm=1.0)
        image, _ = project(vol, geom, fov_policy="ignore")
        oracle = mu64.sum(axis=axis)
        worst = max(worst, float(np.max(np.abs(image.raw - oracle)
                                        / np.abs(oracle))))
    verdict(6, worst <= 1e-6,
            f"max per-pixel relative error {worst:.2e} (tol 1e-6)")


def test_criterion_07_overlap_analysis(phantom64, tmp_path):
    views = make_views(phantom64, 100, width=96, height=96)
    dataset = []
    for k, (image, gt, theta) in enumerate(views):
        ratio = overlap_ratio(gt, CategoryId.LI)
        cfg = MockConfig(seed=13, dilate_px=int(round(6 * ratio)))
        pred = run_cfs(image, MockPredictor(gt, cfg, image_index=k),
                       PipelineConfig(iou_nms=1.0))
        dataset.append((f"view{k:03d}", theta, gt, pred))
    rows = analyze(dataset)
    overlaps = [r.overlap for r in rows]
    in_range = all(o is not None and 0.0 <= o <= 1.0 for o in overlaps)
    desc = all(overlaps[i] >= overlaps[i + 1] for i in range(len(overlaps) - 1))
    summary = emit_report(rows, tmp_path / "report.csv",
                          tmp_path / "summary.json")
    rho = summary["spearman_overlap_iou_f_li"]
    verdict(7, in_range and desc and rho is not None and rho < 0,
            f"100 views, ratios in [0,1]={in_range}, sorted desc={desc}, "
            f"spearman={rho if rho is None else format(rho, '+.3f')}")


def test_criterion_08_roundtrips(tmp_path):
    rng = np.random.default_rng(108)

    def random_set():
        h, w = int(rng.integers(4, 17)), int(rng.integers(4, 17))
        masks = {}
        for cat in CategoryId:
            n = int(rng.integers(0, 5))
            if n == 0:
                continue
            slots = [random_mask(rng, h, w, 0.3) for _ in range(n)]
            if not slots[-1].any():  # trailing empties are not representable
                slots[-1][rng.integers(h), rng.integers(w)] = True
            masks[cat] = slots
        return FragmentMaskSet(h, w, masks)

    def sets_equal(a, b):
        if (a.height, a.width) != (b.height, b.width):
            return False
        for cat in CategoryId:
            fa, fb = a.fragments(cat), b.fragments(cat)
            if len(fa) != len(fb):
                return False
            if any(not np.array_equal(x, y) for x, y in zip(fa, fb)):
                return False
        return True

    codec_bad = sum(not sets_equal(s, decode(encode(s)))
                    for s in (random_set() for _ in range(1000)))

    pad_bad = 0
    sizes = [(5, 7, 8, 10)] + [
        (int(rng.integers(3, 46)), int(rng.integers(3, 46)),
         int(rng.integers(0, 20)), int(rng.integers(0, 20)))
        for _ in range(60)]
    for h, w, dh, dw in sizes:
        arr = rng.random((h, w))
        padded, rec = zero_pad(arr, (h + dh, w + dw))
        if not np.array_equal(crop(padded, rec), arr):
            pad_bad += 1

    file_bad = 0
    for i in range(50):
        words = encode(random_set())
        p1, p2 = tmp_path / f"a{i}.cfsm", tmp_path / f"b{i}.cfsm"
        write_mask_file(words, p1)
        back = read_mask_file(p1)
        write_mask_file(back, p2)
        if not (np.array_equal(back, words)
                and p1.read_bytes() == p2.read_bytes()):
            file_bad += 1

    verdict(8, codec_bad == 0 and pad_bad == 0 and file_bad == 0,
            f"codec 1000 sets ({codec_bad} bad), pad/crop 61 sizes "
            f"({pad_bad} bad), file round-trip 50 ({file_bad} bad)")


def test_criterion_09_matching_optimality():
    rng = np.random.default_rng(109)
    worst = 0.0
    for _ in range(200):
        na, nb = int(rng.integers(0, 5)), int(rng.integers(0, 5))
        preds = [nonempty(rng, 10, 10, 0.3) for _ in range(na)]
        gts = [nonempty(rng, 10, 10, 0.3) for _ in range(nb)]
        result = match_fragments(preds, gts)
        used_i = [i for i, _, _ in result.pairs]
        used_j = [j for _, j, _ in result.pairs]
        assert len(set(used_i)) == len(used_i)
        assert len(set(used_j)) == len(used_j)
        total = sum(v for _, _, v in result.pairs)
        worst = max(worst, abs(total - brute_best_matching(preds, gts)))
    verdict(9, worst <= 1e-9,
            f"200 instances, max |total - optimum| = {worst:.2e}")


def test_criterion_10_determinism_and_throughput(phantom128, tmp_path, capsys):
    vol_path = tmp_path / "vol.cfsv"
    write_volume(phantom128, vol_path)
    assert main(["project", "--volume", str(vol_path), "--views", "1",
                 "--out", str(tmp_path / "warm")]) == 0  # JIT warm-up
    t0 = time.perf_counter()
    assert main(["project", "--volume", str(vol_path), "--views", "4",
                 "--out", str(tmp_path / "w1")]) == 0
    per_view = (time.perf_counter() - t0) / 4
    assert main(["project", "--volume", str(vol_path), "--views", "4",
                 "--workers", "8", "--out", str(tmp_path / "w8")]) == 0
    capsys.readouterr()
    identical = True
    names = sorted(p.name for p in (tmp_path / "w1").iterdir()
                   if p.suffix in (".pgm", ".cfsm"))
    assert names
    for name in names + ["dataset.json"]:
        if (tmp_path / "w1" / name).read_bytes() != \
                (tmp_path / "w8" / name).read_bytes():
            identical = False
    verdict(10, per_view <= 2.0 and identical,
            f"{per_view:.3f}s/view single-worker (limit 2s), "
            f"workers 1 vs 8 byte-identical: {identical}")
