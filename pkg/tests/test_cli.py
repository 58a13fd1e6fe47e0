import json
import os

import numpy as np
import pytest

from cfseg import (
    CategoryId,
    MockConfig,
    canonical_reorder,
    decode,
    load_external_predictions,
    mock_predict_category,
    read_mask_file,
    read_pgm,
    read_report,
    read_volume,
)
from cfseg.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """One generated volume projected to a small 4-view dataset."""
    root = tmp_path_factory.mktemp("cli")
    vol = root / "vol" / "phantom.cfsv"
    ds = root / "views"
    assert main(["generate", "--seed", "3", "--frags", "2,1,1",
                 "--dims", "24,24,24", "--out", str(vol)]) == 0
    assert main(["project", "--volume", str(vol), "--views", "4",
                 "--detector", "40x40", "--out", str(ds)]) == 0
    return {"root": root, "volume": vol, "dataset": ds}


def load_manifest(directory):
    return json.loads((directory / "run.json").read_text())


class TestGenerate:
    def test_outputs(self, work, capsys):
        vol = read_volume(work["volume"])
        assert vol.dims == (24, 24, 24)
        assert vol.n_fragments(CategoryId.SA) == 2
        manifest = load_manifest(work["volume"].parent)
        assert manifest["subcommand"] == "generate"
        assert manifest["config"]["seed"] == 3
        assert manifest["outputs"]["fragments"] == {"SA": 2, "LI": 1, "RI": 1}

    def test_deterministic_output_bytes(self, tmp_path, capsys):
        a = tmp_path / "a.cfsv"
        b = tmp_path / "b.cfsv"
        for out in (a, b):
            code, _, _ = run(capsys, "generate", "--seed", "11",
                             "--dims", "16,16,16", "--out", str(out))
            assert code == 0
        assert a.read_bytes() == b.read_bytes()

    def test_stdout_reports_fragments(self, tmp_path, capsys):
        out = tmp_path / "p.cfsv"
        code, text, _ = run(capsys, "generate", "--seed", "0",
                            "--dims", "16,16,16", "--frags", "1,2,1",
                            "--out", str(out))
        assert code == 0
        assert "LI=2" in text


class TestProject:
    def test_dataset_layout(self, work):
        ds = json.loads((work["dataset"] / "dataset.json").read_text())
        assert ds["detector"] == {"width": 40, "height": 40, "pixel_mm": 1.0}
        images = ds["images"]
        assert [e["theta"] for e in images] == [0.0, 45.0, 90.0, 135.0]
        assert [e["id"] for e in images] == [
            f"phantom_view{k:03d}" for k in range(4)]
        for entry in images:
            assert (work["dataset"] / entry["image"]).exists()
            assert (work["dataset"] / entry["masks"]).exists()
            assert entry["pad"] is None
            assert set(entry["overlap"]) == {"SA", "LI", "RI"}

    def test_images_match_masks(self, work):
        ds = json.loads((work["dataset"] / "dataset.json").read_text())
        entry = ds["images"][0]
        image = read_pgm(work["dataset"] / entry["image"])
        masks = decode(read_mask_file(work["dataset"] / entry["masks"]))
        assert image.intensity.shape == (40, 40)
        assert (masks.height, masks.width) == (40, 40)
        # bone projections attenuate: masked pixels are darker than air
        union = np.zeros((40, 40), bool)
        for cat in CategoryId:
            union |= masks.category_union(cat)
        assert union.any()
        assert image.intensity[union].max() < 1.0

    def test_workers_do_not_change_bytes(self, work, tmp_path, capsys):
        for n, out in (("1", tmp_path / "w1"), ("2", tmp_path / "w2")):
            code, _, _ = run(capsys, "project", "--volume", str(work["volume"]),
                             "--views", "2", "--detector", "40x40",
                             "--workers", n, "--out", str(out))
            assert code == 0
        for name in os.listdir(tmp_path / "w1"):
            if name.endswith((".pgm", ".cfsm")):
                assert (tmp_path / "w1" / name).read_bytes() == \
                       (tmp_path / "w2" / name).read_bytes()

    def test_fov_error(self, work, tmp_path, capsys):
        code, _, err = run(capsys, "project", "--volume", str(work["volume"]),
                           "--views", "1", "--detector", "16x16",
                           "--out", str(tmp_path / "small"))
        assert code == 1
        assert "detector" in err

    def test_missing_volume(self, tmp_path, capsys):
        code, _, err = run(capsys, "project", "--volume",
                           str(tmp_path / "nope.cfsv"),
                           "--views", "1", "--out", str(tmp_path / "o"))
        assert code == 2

    def test_corrupt_volume(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfsv"
        bad.write_bytes(b"XXXX" + b"\x00" * 60)
        code, _, err = run(capsys, "project", "--volume", str(bad),
                           "--views", "1", "--out", str(tmp_path / "o"))
        assert code == 2
        assert "error" in err


class TestPreprocess:
    def test_padding_roundtrip(self, work, tmp_path, capsys):
        out = tmp_path / "padded"
        code, _, _ = run(capsys, "preprocess", "--dataset", str(work["dataset"]),
                         "--target", "64x64", "--out", str(out))
        assert code == 0
        ds = json.loads((out / "dataset.json").read_text())
        assert ds["preprocessed"] == {"target": [64, 64]}
        src = json.loads((work["dataset"] / "dataset.json").read_text())
        for entry, orig in zip(ds["images"], src["images"]):
            assert entry["pad"] == {"row": 12, "col": 12, "height": 40, "width": 40}
            img = read_pgm(out / entry["image"])
            assert img.intensity.shape == (64, 64)
            words = read_mask_file(out / entry["masks"])
            assert words.shape == (64, 64)
            inner = words[12:52, 12:52]
            assert np.array_equal(
                inner, read_mask_file(work["dataset"] / orig["masks"]))
            assert words.sum() == inner.sum()  # border stays empty

    def test_target_too_small(self, work, tmp_path, capsys):
        code, _, err = run(capsys, "preprocess", "--dataset", str(work["dataset"]),
                           "--target", "32x32", "--out", str(tmp_path / "x"))
        assert code == 1

    def test_not_a_dataset(self, tmp_path, capsys):
        code, _, err = run(capsys, "preprocess", "--dataset", str(tmp_path),
                           "--target", "64x64", "--out", str(tmp_path / "x"))
        assert code == 2


class TestPredictMock:
    def test_identity_exchange_layout(self, work, tmp_path, capsys):
        out = tmp_path / "preds"
        code, _, _ = run(capsys, "predict-mock", "--dataset", str(work["dataset"]),
                         "--out", str(out))
        assert code == 0
        ds = json.loads((work["dataset"] / "dataset.json").read_text())
        entry = ds["images"][0]
        cats, cands = load_external_predictions(out, entry["id"])
        gt = decode(read_mask_file(work["dataset"] / entry["masks"]))
        for cat in CategoryId:
            assert np.array_equal(cats[cat].prob.astype(bool),
                                  gt.category_union(cat))
        assert all(c.confidence == 1.0 for c in cands)

    def test_profile_and_seed_override(self, work, tmp_path, capsys):
        profile = tmp_path / "mock.json"
        profile.write_text(json.dumps({"dilate_px": 1, "seed": 4}))
        out = tmp_path / "preds"
        code, _, _ = run(capsys, "predict-mock", "--dataset", str(work["dataset"]),
                         "--mock", str(profile), "--seed", "9", "--out", str(out))
        assert code == 0
        manifest = load_manifest(out)
        assert manifest["config"]["mock"]["seed"] == 9
        assert manifest["config"]["mock"]["dilate_px"] == 1
        # category files hold the dilated union
        ds = json.loads((work["dataset"] / "dataset.json").read_text())
        entry = ds["images"][0]
        cats, _ = load_external_predictions(out, entry["id"])
        gt = decode(read_mask_file(work["dataset"] / entry["masks"]))
        want = mock_predict_category(gt, MockConfig(seed=9, dilate_px=1),
                                     CategoryId.LI)
        assert np.array_equal(cats[CategoryId.LI].prob, want.prob)

    def test_bad_profile_key(self, work, tmp_path, capsys):
        profile = tmp_path / "mock.json"
        profile.write_text(json.dumps({"blur": 2}))
        code, _, err = run(capsys, "predict-mock", "--dataset", str(work["dataset"]),
                           "--mock", str(profile), "--out", str(tmp_path / "o"))
        assert code == 1


class TestPipeline:
    def test_identity_recovers_gt(self, work, tmp_path, capsys):
        out = tmp_path / "masks"
        code, _, _ = run(capsys, "pipeline", "--dataset", str(work["dataset"]),
                         "--nms", "1.0", "--out", str(out))
        assert code == 0
        ds = json.loads((work["dataset"] / "dataset.json").read_text())
        for entry in ds["images"]:
            got = decode(read_mask_file(out / (entry["id"] + ".cfsm")))
            gt = decode(read_mask_file(work["dataset"] / entry["masks"]))
            for cat in CategoryId:
                want = canonical_reorder(gt.fragments(cat))
                frags = got.fragments(cat)
                assert len(frags) == len(want)
                for a, b in zip(frags, want):
                    assert np.array_equal(a, b)

    def test_mock_and_external_backends_agree(self, work, tmp_path, capsys):
        profile = tmp_path / "mock.json"
        profile.write_text(json.dumps(
            {"dilate_px": 1, "drop_prob": 0.2, "spurious": 1, "seed": 6}))
        preds = tmp_path / "exchange"
        code, _, _ = run(capsys, "predict-mock", "--dataset", str(work["dataset"]),
                         "--mock", str(profile), "--out", str(preds))
        assert code == 0
        via_mock = tmp_path / "via_mock"
        via_ext = tmp_path / "via_ext"
        code, _, _ = run(capsys, "pipeline", "--dataset", str(work["dataset"]),
                         "--backend", "mock", "--mock", str(profile),
                         "--out", str(via_mock))
        assert code == 0
        code, _, _ = run(capsys, "pipeline", "--dataset", str(work["dataset"]),
                         "--backend", "external", "--pred-dir", str(preds),
                         "--out", str(via_ext))
        assert code == 0
        ds = json.loads((work["dataset"] / "dataset.json").read_text())
        for entry in ds["images"]:
            name = entry["id"] + ".cfsm"
            assert (via_mock / name).read_bytes() == (via_ext / name).read_bytes()

    def test_workers_identical(self, work, tmp_path, capsys):
        outs = []
        for n in ("1", "3"):
            out = tmp_path / f"w{n}"
            code, _, _ = run(capsys, "pipeline", "--dataset", str(work["dataset"]),
                             "--workers", n, "--out", str(out))
            assert code == 0
            outs.append(out)
        ds = json.loads((work["dataset"] / "dataset.json").read_text())
        for entry in ds["images"]:
            name = entry["id"] + ".cfsm"
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    def test_external_requires_pred_dir(self, work, tmp_path, capsys):
        code, _, err = run(capsys, "pipeline", "--dataset", str(work["dataset"]),
                           "--backend", "external", "--out", str(tmp_path / "o"))
        assert code == 1
        assert "pred-dir" in err


@pytest.fixture(scope="module")
def scored(work, tmp_path_factory):
    root = tmp_path_factory.mktemp("eval")
    masks = root / "masks"
    assert main(["pipeline", "--dataset", str(work["dataset"]),
                 "--nms", "1.0", "--out", str(masks)]) == 0
    out_csv = root / "metrics.csv"
    out_json = root / "summary.json"
    assert main(["evaluate", "--pred", str(masks),
                 "--gt", str(work["dataset"]),
                 "--out", str(out_csv), "--summary", str(out_json)]) == 0
    return {"csv": out_csv, "json": out_json, "masks": masks}


class TestEvaluate:
    def test_perfect_scores(self, scored, capsys):
        capsys.readouterr()
        import csv as csvmod
        with open(scored["csv"], newline="") as f:
            rows = list(csvmod.DictReader(f))
        assert rows
        for row in rows:
            assert float(row["iou"]) == 1.0
            assert float(row["assd"]) == 0.0
            assert float(row["hd95"]) == 0.0

    def test_summary_stats(self, scored):
        summary = json.loads(scored["json"].read_text())
        assert summary["iou_c"]["mean"] == 1.0
        assert summary["iou_c"]["sd"] == 0.0
        assert summary["iou_f"]["n"] == summary["iou_c"]["n"]

    def test_stdout_table(self, work, scored, tmp_path, capsys):
        code, text, _ = run(capsys, "evaluate", "--pred", str(scored["masks"]),
                            "--gt", str(work["dataset"]),
                            "--out", str(tmp_path / "m.csv"))
        assert code == 0
        assert "iou_c" in text and "1.000 (0.00)" in text

    def test_missing_prediction(self, work, tmp_path, capsys):
        code, _, err = run(capsys, "evaluate", "--pred", str(tmp_path),
                           "--gt", str(work["dataset"]),
                           "--out", str(tmp_path / "m.csv"))
        assert code == 2
        assert "missing prediction" in err


class TestOverlapReport:
    def test_report_written(self, work, tmp_path, capsys):
        masks = tmp_path / "masks"
        assert main(["pipeline", "--dataset", str(work["dataset"]),
                     "--nms", "1.0", "--out", str(masks)]) == 0
        capsys.readouterr()
        out_csv = tmp_path / "report.csv"
        out_json = tmp_path / "summary.json"
        code, text, _ = run(capsys, "overlap-report",
                            "--dataset", str(work["dataset"]),
                            "--pred", str(masks),
                            "--out", str(out_csv), "--summary", str(out_json))
        assert code == 0
        rows = read_report(out_csv)
        assert len(rows) == 4
        overlaps = [r.overlap for r in rows if r.overlap is not None]
        assert overlaps == sorted(overlaps, reverse=True)
        summary = json.loads(out_json.read_text())
        assert summary["n_rows"] == 4
        # identity predictions: IoU constant, correlation undefined
        assert summary["spearman_overlap_iou_f_li"] is None
        assert "n/a" in text


class TestConfigFile:
    def test_config_supplies_defaults(self, tmp_path, capsys):
        cfg = tmp_path / "gen.json"
        cfg.write_text(json.dumps({"seed": 5, "dims": "16,16,16",
                                   "out": str(tmp_path / "c.cfsv")}))
        code, _, _ = run(capsys, "generate", "--config", str(cfg))
        assert code == 0
        manifest = load_manifest(tmp_path)
        assert manifest["config"]["seed"] == 5

    def test_flags_beat_config(self, tmp_path, capsys):
        cfg = tmp_path / "gen.json"
        cfg.write_text(json.dumps({"seed": 5, "dims": "16,16,16",
                                   "out": str(tmp_path / "c.cfsv")}))
        code, _, _ = run(capsys, "generate", "--config", str(cfg),
                         "--seed", "8")
        assert code == 0
        assert load_manifest(tmp_path)["config"]["seed"] == 8

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "gen.json"
        cfg.write_text(json.dumps({"sigma": 1}))
        code, _, err = run(capsys, "generate", "--config", str(cfg),
                           "--out", str(tmp_path / "c.cfsv"))
        assert code == 1
        assert "unknown config keys" in err


class TestUsage:
    def test_missing_required_flag(self, capsys):
        code, _, err = run(capsys, "generate")
        assert code == 1
        assert "--out" in err

    def test_unknown_subcommand(self, capsys):
        code, _, _ = run(capsys, "transmogrify")
        assert code == 1

    def test_no_subcommand(self, capsys):
        code, _, _ = run(capsys)
        assert code == 1

    def test_version(self, capsys):
        from cfseg import __version__
        code, text, _ = run(capsys, "--version")
        assert code == 0
        assert __version__ in text

    def test_help(self, capsys):
        code, text, _ = run(capsys, "--help")
        assert code == 0
        assert "generate" in text and "overlap-report" in text
