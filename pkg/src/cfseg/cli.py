"""Command-line interface: dataset generation through evaluation.

Subcommands: generate, project, preprocess, predict-mock, pipeline,
evaluate, overlap-report.  Every run writes its outputs atomically
(tempfile + rename; an interrupted run leaves only ``*.partial`` files)
and drops a ``run.json`` manifest recording the tool version, the fully
resolved configuration, and the input/output paths, so a run can be
reproduced from its manifest alone.  All randomness descends from the
``--seed`` flags through named substreams; outputs are byte-identical
across runs and across ``--workers`` settings.

Exit codes: 0 success, 1 validation/usage error, 2 file-format or I/O
error.

A JSON file passed as ``--config`` supplies per-flag defaults (keys are
flag names with dashes as underscores); explicit command-line flags win
over config values.

The image order of a dataset manifest defines each image's index, which
seeds the per-image mock substream; predictions for image k are
identical whether produced in memory, by ``predict-mock``, or by
``pipeline --backend mock``.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

from . import __version__
from ._util import atomic_write_text, read_json, write_json
from .errors import CfsError, FileFormatError, ValidationError
from .mask_model import (
    CategoryId,
    decode,
    encode,
    read_mask_file,
    read_pgm,
    write_mask_file,
    write_pgm,
)
from .metrics import POLICY_DIAGONAL, POLICY_SKIP, aggregate, evaluate_image
from .overlap_analysis import analyze, emit_report
from .pipeline import PipelineConfig, run_cfs
from .predictor_iface import (
    ExternalPredictor,
    MockConfig,
    MockPredictor,
    mock_predict_category,
    mock_predict_fragments,
    write_predictions,
)
from .preprocess import zero_pad
from .synth_phantom import PhantomSpec, generate, read_volume, write_volume
from .drr_projector import ProjectionGeometry, overlap_ratio, project

DATASET_FILE = "dataset.json"
MANIFEST_FILE = "run.json"


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _coerce_wh(value) -> tuple[int, int]:
    """Accept "WxH" or a [w, h] pair; returns (width, height)."""
    if isinstance(value, str):
        parts = value.lower().split("x")
        if len(parts) != 2:
            raise ValidationError(f"expected WxH, got {value!r}")
        try:
            return int(parts[0]), int(parts[1])
        except ValueError:
            raise ValidationError(f"expected WxH, got {value!r}") from None
    if len(value) != 2:
        raise ValidationError(f"expected a [width, height] pair, got {value!r}")
    return int(value[0]), int(value[1])


def _coerce_triple(value, kind=int) -> tuple:
    """Accept "a,b,c" or a [a, b, c] list."""
    if isinstance(value, str):
        parts = value.split(",")
    else:
        parts = list(value)
    if len(parts) != 3:
        raise ValidationError(f"expected three comma-separated values, got {value!r}")
    try:
        return tuple(kind(p) for p in parts)
    except (TypeError, ValueError):
        raise ValidationError(f"expected three {kind.__name__} values, got {value!r}") from None


def _policy(name: str) -> str:
    try:
        return {"diagonal": POLICY_DIAGONAL, "skip": POLICY_SKIP}[name]
    except KeyError:
        raise ValidationError(f"unknown policy {name!r} (use diagonal|skip)") from None


def _mock_config(spec_arg: str, seed: int | None = None) -> MockConfig:
    """Build a MockConfig from "identity" or a JSON profile path."""
    if spec_arg == "identity":
        cfg = {}
    else:
        cfg = read_json(spec_arg)
        if not isinstance(cfg, dict):
            raise FileFormatError(f"{spec_arg}: mock profile must be a JSON object")
    if seed is not None:
        cfg = dict(cfg, seed=seed)
    return MockConfig.from_dict(cfg)


def _write_manifest(out_dir: str, subcommand: str, config: dict, inputs: dict,
                    outputs: dict, t0: float) -> None:
    write_json(os.path.join(out_dir, MANIFEST_FILE), {
        "tool": "cfs",
        "version": __version__,
        "subcommand": subcommand,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "duration_s": round(time.monotonic() - t0, 3),
    })


def _load_dataset(dataset_dir: str) -> dict:
    path = os.path.join(dataset_dir, DATASET_FILE)
    if not os.path.exists(path):
        raise FileFormatError(f"{path} not found (not a dataset directory?)")
    ds = read_json(path)
    if not isinstance(ds, dict) or "images" not in ds:
        raise FileFormatError(f"{path}: missing 'images' list")
    return ds


def _gt_masks(dataset_dir: str, entry: dict):
    return decode(read_mask_file(os.path.join(dataset_dir, entry["masks"])))


def _parallel(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# -- subcommands ---------------------------------------------------------------


def _cmd_generate(args) -> int:
    t0 = time.monotonic()
    spec = PhantomSpec(
        seed=args.seed,
        dims=_coerce_triple(args.dims),
        spacing=_coerce_triple(args.spacing, float),
        fragments=_coerce_triple(args.frags),
        mu_bone=args.mu_bone,
        mu_soft=args.mu_soft,
    )
    vol = generate(spec)
    out = os.fspath(args.out)
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    write_volume(vol, out)
    counts = {cat.name: vol.n_fragments(cat) for cat in CategoryId}
    out_dir = os.path.dirname(os.path.abspath(out))
    _write_manifest(out_dir, "generate",
                    config={"seed": spec.seed, "dims": list(spec.dims),
                            "spacing": list(spec.spacing),
                            "frags": list(spec.fragments),
                            "mu_bone": spec.mu_bone, "mu_soft": spec.mu_soft},
                    inputs={}, outputs={"volume": out, "fragments": counts}, t0=t0)
    print(f"wrote {out} (fragments: " +
          ", ".join(f"{k}={v}" for k, v in counts.items()) + ")")
    return 0


def _cmd_project(args) -> int:
    t0 = time.monotonic()
    vol = read_volume(args.volume)
    width, height = _coerce_wh(args.detector)
    n_views = int(args.views)
    if n_views < 1:
        raise ValidationError(f"--views must be >= 1, got {n_views}")
    out_dir = os.fspath(args.out)
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(os.fspath(args.volume)))[0]
    digits = max(3, len(str(n_views - 1)))
    entries = []
    for k in range(n_views):
        theta = k * (180.0 / n_views)
        geom = ProjectionGeometry(theta_deg=theta, width=width, height=height,
                                  pixel_mm=args.pixel_mm)
        image, masks = project(vol, geom, tau_len=args.tau_len,
                               workers=args.workers, fov_policy=args.fov)
        image_id = f"{stem}_view{k:0{digits}d}"
        write_pgm(image, os.path.join(out_dir, image_id + ".pgm"))
        write_mask_file(encode(masks), os.path.join(out_dir, image_id + ".cfsm"))
        overlaps = {}
        for cat in CategoryId:
            try:
                overlaps[cat.name] = overlap_ratio(masks, cat)
            except CfsError:
                overlaps[cat.name] = None
        entries.append({
            "id": image_id,
            "theta": theta,
            "image": image_id + ".pgm",
            "masks": image_id + ".cfsm",
            "overlap": overlaps,
            "pad": None,
        })
    config = {"volume": os.fspath(args.volume), "views": n_views,
              "detector": [width, height], "pixel_mm": args.pixel_mm,
              "tau_len": args.tau_len, "fov": args.fov}
    write_json(os.path.join(out_dir, DATASET_FILE), {
        "detector": {"width": width, "height": height, "pixel_mm": args.pixel_mm},
        "tau_len": args.tau_len,
        "volume": os.fspath(args.volume),
        "images": entries,
    })
    _write_manifest(out_dir, "project", config=config,
                    inputs={"volume": os.fspath(args.volume)},
                    outputs={"dataset": os.path.join(out_dir, DATASET_FILE),
                             "n_images": n_views}, t0=t0)
    print(f"wrote {n_views} views to {out_dir}")
    return 0


def _cmd_preprocess(args) -> int:
    t0 = time.monotonic()
    dataset_dir = os.fspath(args.dataset)
    ds = _load_dataset(dataset_dir)
    tw, th = _coerce_wh(args.target)
    out_dir = os.fspath(args.out)
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for entry in ds["images"]:
        image = read_pgm(os.path.join(dataset_dir, entry["image"]))
        padded_img, rec = zero_pad(image, (th, tw))
        words = read_mask_file(os.path.join(dataset_dir, entry["masks"]))
        padded_words, rec2 = zero_pad(words, (th, tw))
        if rec != rec2:
            raise ValidationError(
                f"{entry['id']}: image and mask dims disagree, cannot pad uniformly"
            )
        write_pgm(padded_img, os.path.join(out_dir, entry["image"]))
        write_mask_file(padded_words, os.path.join(out_dir, entry["masks"]))
        entries.append(dict(entry, pad=rec.to_dict()))
    out_ds = dict(ds, images=entries)
    out_ds["preprocessed"] = {"target": [th, tw]}
    write_json(os.path.join(out_dir, DATASET_FILE), out_ds)
    _write_manifest(out_dir, "preprocess",
                    config={"target": [tw, th]},
                    inputs={"dataset": dataset_dir},
                    outputs={"dataset": os.path.join(out_dir, DATASET_FILE),
                             "n_images": len(entries)}, t0=t0)
    print(f"padded {len(entries)} images to {tw}x{th} in {out_dir}")
    return 0


def _cmd_predict_mock(args) -> int:
    t0 = time.monotonic()
    dataset_dir = os.fspath(args.dataset)
    ds = _load_dataset(dataset_dir)
    cfg = _mock_config(args.mock, args.seed)
    out_dir = os.fspath(args.out)
    os.makedirs(out_dir, exist_ok=True)

    def run_one(pair):
        index, entry = pair
        gt = _gt_masks(dataset_dir, entry)
        cats = {cat: mock_predict_category(gt, cfg, cat, index) for cat in CategoryId}
        cands = []
        for cat in CategoryId:
            cands.extend(mock_predict_fragments(gt, cfg, cat, index))
        write_predictions(out_dir, entry["id"], cats, cands)
        return entry["id"]

    ids = _parallel(run_one, list(enumerate(ds["images"])), args.workers)
    _write_manifest(out_dir, "predict-mock",
                    config={"mock": cfg.to_dict(), "workers": args.workers},
                    inputs={"dataset": dataset_dir},
                    outputs={"n_images": len(ids)}, t0=t0)
    print(f"wrote mock predictions for {len(ids)} images to {out_dir}")
    return 0


def _cmd_pipeline(args) -> int:
    t0 = time.monotonic()
    dataset_dir = os.fspath(args.dataset)
    ds = _load_dataset(dataset_dir)
    pipe_cfg = PipelineConfig(tau=args.tau, binarize_threshold=args.binarize,
                              iou_nms=args.nms, drop_empty=not args.keep_empty)
    if args.backend == "mock":
        mock_cfg = _mock_config(args.mock, args.seed)
    elif args.backend == "external":
        if not args.pred_dir:
            raise ValidationError("--backend external requires --pred-dir")
    else:
        raise ValidationError(f"unknown backend {args.backend!r} (use mock|external)")
    out_dir = os.fspath(args.out)
    os.makedirs(out_dir, exist_ok=True)

    def run_one(pair):
        index, entry = pair
        image = read_pgm(os.path.join(dataset_dir, entry["image"]))
        if args.backend == "mock":
            backend = MockPredictor(_gt_masks(dataset_dir, entry), mock_cfg, index)
        else:
            backend = ExternalPredictor(args.pred_dir, entry["id"])
        result = run_cfs(image, backend, pipe_cfg)
        write_mask_file(encode(result), os.path.join(out_dir, entry["id"] + ".cfsm"))
        return entry["id"]

    ids = _parallel(run_one, list(enumerate(ds["images"])), args.workers)
    config = {"backend": args.backend, "pipeline": pipe_cfg.to_dict(),
              "workers": args.workers}
    if args.backend == "mock":
        config["mock"] = mock_cfg.to_dict()
    else:
        config["pred_dir"] = os.fspath(args.pred_dir)
    _write_manifest(out_dir, "pipeline", config=config,
                    inputs={"dataset": dataset_dir},
                    outputs={"n_images": len(ids)}, t0=t0)
    print(f"wrote {len(ids)} prediction masks to {out_dir}")
    return 0


def _cmd_evaluate(args) -> int:
    t0 = time.monotonic()
    gt_dir = os.fspath(args.gt)
    ds = _load_dataset(gt_dir)
    pred_dir = os.fspath(args.pred)
    policy = _policy(args.policy)
    records = []
    for entry in ds["images"]:
        pred_path = os.path.join(pred_dir, entry["id"] + ".cfsm")
        if not os.path.exists(pred_path):
            raise FileFormatError(f"missing prediction mask: {pred_path}")
        pred = decode(read_mask_file(pred_path))
        gt = _gt_masks(gt_dir, entry)
        records.extend(evaluate_image(pred, gt, image_id=entry["id"],
                                      policy=policy, spacing=args.spacing))
    stats = aggregate(records)

    buf = io.StringIO()
    fields = ["image_id", "category", "level", "iou", "assd", "hd95",
              "empty_pred", "empty_gt", "penalty_applied", "false_positives"]
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for r in records:
        d = r.to_dict()
        for key in ("iou", "assd", "hd95"):
            d[key] = repr(d[key])
        writer.writerow(d)
    out_path = os.fspath(args.out)
    parent = os.path.dirname(os.path.abspath(out_path))
    os.makedirs(parent, exist_ok=True)
    atomic_write_text(out_path, buf.getvalue())

    summary = {key: {"n": s.n, "mean": s.mean, "sd": s.sd}
               for key, s in stats.items()}
    if args.summary:
        write_json(args.summary, summary)
    _write_manifest(parent, "evaluate",
                    config={"policy": args.policy, "spacing": args.spacing},
                    inputs={"pred": pred_dir, "gt": gt_dir},
                    outputs={"metrics": out_path,
                             "summary": os.fspath(args.summary) if args.summary else None},
                    t0=t0)
    print(f"{'metric':<8} {'n':>5}  mean (sd)")
    for key in ("iou_c", "assd_c", "hd95_c", "iou_f", "assd_f", "hd95_f"):
        if key in stats:
            s = stats[key]
            print(f"{key:<8} {s.n:>5}  {s.format()}")
    return 0


def _cmd_overlap_report(args) -> int:
    t0 = time.monotonic()
    dataset_dir = os.fspath(args.dataset)
    ds = _load_dataset(dataset_dir)
    pred_dir = os.fspath(args.pred)
    policy = _policy(args.policy)

    def records():
        for entry in ds["images"]:
            gt = _gt_masks(dataset_dir, entry)
            pred_path = os.path.join(pred_dir, entry["id"] + ".cfsm")
            if not os.path.exists(pred_path):
                raise FileFormatError(f"missing prediction mask: {pred_path}")
            pred = decode(read_mask_file(pred_path))
            yield entry["id"], entry.get("theta", 0.0), gt, pred

    rows = analyze(records(), policy=policy)
    out_path = os.fspath(args.out)
    parent = os.path.dirname(os.path.abspath(out_path))
    os.makedirs(parent, exist_ok=True)
    summary = emit_report(rows, out_path, args.summary)
    _write_manifest(parent, "overlap-report",
                    config={"policy": args.policy},
                    inputs={"dataset": dataset_dir, "pred": pred_dir},
                    outputs={"report": out_path,
                             "summary": os.fspath(args.summary) if args.summary else None},
                    t0=t0)
    corr = summary.get("spearman_overlap_iou_f_li")
    corr_text = "n/a" if corr is None else f"{corr:+.3f}"
    print(f"{len(rows)} rows; spearman(overlap, IoU-F LI) = {corr_text}")
    return 0


# -- parser wiring -------------------------------------------------------------


def _build_parser() -> tuple[_Parser, dict[str, _Parser]]:
    parser = _Parser(prog="cfs", allow_abbrev=False,
                     description="Synthetic fracture segmentation toolkit")
    parser.add_argument("--version", action="version", version=f"cfs {__version__}")
    sub = parser.add_subparsers(dest="cmd", metavar="SUBCOMMAND")
    sub.required = True
    parsers = {}

    def add(name, func, **kwargs):
        p = sub.add_parser(name, allow_abbrev=False, **kwargs)
        p.set_defaults(func=func)
        p.add_argument("--config", default=None,
                       help="JSON file with per-flag defaults (flags override)")
        parsers[name] = p
        return p

    p = add("generate", _cmd_generate, help="generate a fractured phantom volume")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frags", default="1,1,1", help="fragments per SA,LI,RI")
    p.add_argument("--dims", default="128,128,128", help="voxels per axis nx,ny,nz")
    p.add_argument("--spacing", default="1,1,1", help="voxel size mm sx,sy,sz")
    p.add_argument("--mu-bone", type=float, default=0.05)
    p.add_argument("--mu-soft", type=float, default=0.015)
    p.add_argument("--out", required=True, help="output .cfsv path")

    p = add("project", _cmd_project, help="render DRR views plus GT masks")
    p.add_argument("--volume", required=True, help="input .cfsv volume")
    p.add_argument("--views", type=int, default=1)
    p.add_argument("--detector", default="448x448", help="detector WxH pixels")
    p.add_argument("--pixel-mm", type=float, default=1.0)
    p.add_argument("--tau-len", type=float, default=1e-6,
                   help="chord length (mm) that marks a fragment mask pixel")
    p.add_argument("--fov", choices=("error", "warn", "ignore"), default="error")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="output dataset directory")

    p = add("preprocess", _cmd_preprocess, help="zero-pad a dataset's images and masks")
    p.add_argument("--dataset", required=True)
    p.add_argument("--target", default="512x512", help="padded size WxH")
    p.add_argument("--out", required=True)

    p = add("predict-mock", _cmd_predict_mock,
            help="write degraded-GT predictions in the exchange layout")
    p.add_argument("--dataset", required=True)
    p.add_argument("--mock", default="identity",
                   help='"identity" or a JSON mock profile path')
    p.add_argument("--seed", type=int, default=None,
                   help="override the profile's seed")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="predictions root directory")

    p = add("pipeline", _cmd_pipeline, help="run the three-step pipeline")
    p.add_argument("--dataset", required=True)
    p.add_argument("--backend", choices=("mock", "external"), default="mock")
    p.add_argument("--mock", default="identity",
                   help='"identity" or a JSON mock profile path (mock backend)')
    p.add_argument("--seed", type=int, default=None,
                   help="override the mock profile's seed")
    p.add_argument("--pred-dir", default=None,
                   help="exchange-layout predictions root (external backend)")
    p.add_argument("--tau", type=float, default=0.8,
                   help="confidence threshold; keep strictly above")
    p.add_argument("--nms", type=float, default=0.5,
                   help="mask NMS IoU threshold; 1.0 disables")
    p.add_argument("--binarize", type=float, default=0.5)
    p.add_argument("--keep-empty", action="store_true",
                   help="keep empty fragment masks instead of dropping them")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory for .cfsm masks")

    p = add("evaluate", _cmd_evaluate, help="score predictions against GT")
    p.add_argument("--pred", required=True, help="directory of predicted .cfsm masks")
    p.add_argument("--gt", required=True, help="dataset directory with GT masks")
    p.add_argument("--policy", choices=("diagonal", "skip"), default="diagonal")
    p.add_argument("--spacing", type=float, default=1.0,
                   help="mm per pixel for distance metrics")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--summary", default=None, help="summary JSON path")

    p = add("overlap-report", _cmd_overlap_report,
            help="overlap-ratio vs fragment-IoU report")
    p.add_argument("--dataset", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--policy", choices=("diagonal", "skip"), default="diagonal")
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--summary", default=None, help="summary JSON path")

    # A --config file may supply any flag, including mandatory ones, so
    # required-ness is enforced in main() after the merge, not by argparse.
    required = {}
    for name, p in parsers.items():
        required[name] = {a.dest for a in p._actions if a.required}
        for a in p._actions:
            a.required = False

    return parser, parsers, required


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    try:
        parser, parsers, required = _build_parser()
        args = parser.parse_args(argv)
        target = parsers[args.cmd]
        if args.config is not None:
            overrides = read_json(args.config)
            if not isinstance(overrides, dict):
                raise FileFormatError(f"{args.config}: config must be a JSON object")
            known = {a.dest for a in target._actions}
            bad = set(overrides) - known
            if bad:
                raise ValidationError(
                    f"{args.config}: unknown config keys {sorted(bad)}"
                )
            target.set_defaults(**overrides)
            args = parser.parse_args(argv)  # explicit flags still win
        missing = sorted(d for d in required[args.cmd]
                         if getattr(args, d) is None)
        if missing:
            flags = ", ".join("--" + d.replace("_", "-") for d in missing)
            target.error(f"the following arguments are required: {flags}")
        return args.func(args)
    except SystemExit as e:  # argparse --help / usage errors
        code = e.code if e.code is not None else 0
        return code if isinstance(code, int) else 1
    except FileFormatError as e:
        print(f"cfs: error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"cfs: error: {e}", file=sys.stderr)
        return 2
    except CfsError as e:
        print(f"cfs: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
