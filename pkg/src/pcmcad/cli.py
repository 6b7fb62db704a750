"""Command-line front end.

Exit codes: 0 success, 1 invalid input or configuration, 2 file-system error.
Every command that knows its output location writes ``run.json`` there, on
success and on failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .evaluation import EvalConfig
from .imgdata import load_manifest
from .pipeline import (DetectorSettings, PipelineConfig, RunRecord, StageError, default_jobs,
                       detect_file, evaluate_manifest, load_json_config, map_jobs,
                       preprocess_file, run_pipeline, sift_file)
from .sifting import SiftConfig

logger = logging.getLogger("pcmcad")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
COMMANDS = ("preprocess", "sift", "detect", "evaluate", "pipeline", "phantoms")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for I/O failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pcmcad", description="Pseudo-color mammogram generation, detection and FROC evaluation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("preprocess", help="breast extraction, crop, normalise, 4x wavelet subsample")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--pixel-size", type=float, help="override the manifest pixel spacing (mm)")
    s.add_argument("--jobs", type=_positive_int, default=None)

    s = sub.add_parser("sift", help="multi-scale morphological sifting and pseudo-color output")
    s.add_argument("--in", dest="input", required=True, help="preprocessed 16-bit image")
    s.add_argument("--mask", help="breast mask PNG used for display scaling")
    s.add_argument("--config", help="JSON object with SiftConfig fields")
    s.add_argument("--out-prefix", required=True)

    s = sub.add_parser("detect", help="baseline blob detector over sift bands")
    s.add_argument("--bands", required=True, help="prefix X of X_band{i}.raw")
    s.add_argument("--out", required=True)
    s.add_argument("--mask", help="breast mask PNG (default: X_mask.png when present)")
    s.add_argument("--quantile", type=float, default=0.99)
    s.add_argument("--nms-iou", type=float, default=0.5)

    s = sub.add_parser("evaluate", help="FROC evaluation of detection JSON files")
    s.add_argument("--manifest", required=True)
    s.add_argument("--detections-dir", required=True)
    s.add_argument("--role", default="test", choices=["train", "validation", "test"])
    s.add_argument("--fpi-ref", type=float, default=0.9)
    s.add_argument("--dsi-threshold", type=float, default=0.2)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--no-figures", action="store_true")

    s = sub.add_parser("pipeline", help="preprocess, sift, detect and evaluate a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--config", help="JSON object with sift / detector / eval sections")
    s.add_argument("--detections-dir", help="score these detections instead of running the detector")
    s.add_argument("--jobs", type=_positive_int, default=None)
    s.add_argument("--no-figures", action="store_true")

    s = sub.add_parser("phantoms", help="write the synthetic phantom dataset")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=0)

    # hidden: not listed in the help text
    s = sub.add_parser("morph-selftest")
    s.add_argument("--images", type=_positive_int, default=100)
    s.add_argument("--seed", type=int, default=0)
    return p


# ---------------------------------------------------------------------------
# Commands.  Each returns an exit code and fills ``rec``.
# ---------------------------------------------------------------------------

def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def cmd_preprocess(args, rec: RunRecord) -> int:
    manifest = _stage("manifest", load_manifest, args.manifest)
    pixel = args.pixel_size if args.pixel_size is not None else manifest.pixel_size_mm
    if not pixel > 0:
        raise StageError("config", ValueError("--pixel-size must be > 0"))
    images = sorted({e.stem: e.image_path for e in manifest.entries}.items())
    jobs = args.jobs or default_jobs()
    rec.config(pixel_size_mm=pixel, jobs=jobs)
    rec.input(args.manifest)
    for _, path in images:
        rec.input(path)
    _stage("preprocess", map_jobs, _preprocess_one, [(p, args.out_dir, pixel, s) for s, p in images], jobs)
    print(f"preprocessed {len(images)} images into {args.out_dir}")
    return EXIT_OK


def _preprocess_one(job):
    return preprocess_file(*job)


def cmd_sift(args, rec: RunRecord) -> int:
    doc = _stage("config", load_json_config, args.config) if args.config else {}
    cfg = _stage("config", SiftConfig.from_dict, doc)
    rec.config(sift=cfg.to_dict())
    rec.input(args.input)
    if args.mask:
        rec.input(args.mask)
    if args.config:
        rec.input(args.config)
    _stage("sift", sift_file, args.input, args.mask, cfg, args.out_prefix)
    print(f"wrote {args.out_prefix}_band*.png/.raw" + ("" if cfg.num_scales != 2 else f" and {args.out_prefix}_pcm.png"))
    return EXIT_OK


def cmd_detect(args, rec: RunRecord) -> int:
    settings = _stage("config", DetectorSettings, args.quantile, args.nms_iou)
    rec.config(detector={"quantile_q": settings.quantile_q, "nms_iou": settings.nms_iou})
    for suffix in ("_band1.raw", "_band2.raw", "_sift.json", "_mask.png"):
        rec.input(f"{args.bands}{suffix}")
    n = _stage("detect", detect_file, args.bands, args.out, settings, args.mask)
    print(f"{n} detections -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args, rec: RunRecord) -> int:
    cfg = _stage("config", EvalConfig, args.dsi_threshold, args.fpi_ref)
    rec.config(eval=cfg.to_dict(), role=args.role)
    manifest = _stage("manifest", load_manifest, args.manifest)
    rec.input(args.manifest)
    for p in sorted(Path(args.detections_dir).glob("*.json")):
        rec.input(p)
    report = _stage("evaluate", evaluate_manifest, manifest, args.detections_dir, args.out_dir, cfg,
                    args.role, not args.no_figures)
    _print_summary(report)
    return EXIT_OK


def cmd_pipeline(args, rec: RunRecord) -> int:
    doc = _stage("config", load_json_config, args.config) if args.config else {}
    manifest = _stage("manifest", load_manifest, args.manifest)
    if not isinstance(doc, dict):
        raise StageError("config", ValueError("pipeline config must be a JSON object"))
    doc = dict(doc)
    sift_doc = doc.get("sift", {})
    if isinstance(sift_doc, dict):
        sift_doc = dict(sift_doc)
        given = sift_doc.get("pixel_size_mm")
        if given is not None and given != manifest.pixel_size_mm:
            raise StageError("config", ValueError(
                f"sift.pixel_size_mm={given} disagrees with the manifest ({manifest.pixel_size_mm})"))
        sift_doc["pixel_size_mm"] = manifest.pixel_size_mm
        doc["sift"] = sift_doc
    if args.no_figures:
        doc["figures"] = False
    cfg = _stage("config", PipelineConfig.from_dict, doc)
    jobs = args.jobs or default_jobs()
    rec.config(**cfg.to_dict(), jobs=jobs, detections_dir=args.detections_dir)
    if args.config:
        rec.input(args.config)
    report = run_pipeline(args.manifest, args.out_dir, cfg, jobs, args.detections_dir, rec)
    _print_summary(report)
    return EXIT_OK


def cmd_phantoms(args, rec: RunRecord) -> int:
    from .phantoms import write_phantom_dataset
    rec.config(seed=args.seed)
    path = _stage("phantoms", write_phantom_dataset, args.out_dir, args.seed)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_morph_selftest(args, rec: RunRecord) -> int:
    from .morphology import morph_selftest
    res = morph_selftest(n_images=args.images, seed=args.seed)
    print(f"morph-selftest: {res['passed']} passed, {res['failed']} failed")
    return EXIT_OK if res["failed"] == 0 else EXIT_INVALID


def _print_summary(report) -> None:
    for s in report.splits:
        dsi = "n/a" if s.mean_dsi is None else f"{s.mean_dsi:.3f}"
        print(f"split {s.split_id}: TPR@FPI={s.tpr_at_ref_fpi:.3f} AUFC={s.aufc:.3f} DSI={dsi}")
    agg = report.aggregate["tpr_at_ref_fpi"]
    if agg["mean"] is not None:
        print(f"mean TPR@FPI={agg['mean']:.3f} +/- {agg['std']:.3f} over {agg['n']} splits")


_DISPATCH = {
    "preprocess": cmd_preprocess, "sift": cmd_sift, "detect": cmd_detect, "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline, "phantoms": cmd_phantoms, "morph-selftest": cmd_morph_selftest,
}


def _record_dir(args) -> Optional[Path]:
    if getattr(args, "out_dir", None):
        return Path(args.out_dir)
    if getattr(args, "out_prefix", None):
        return Path(args.out_prefix).parent
    if getattr(args, "out", None):
        return Path(args.out).parent
    return None


def _exit_code(exc: BaseException) -> int:
    return EXIT_IO if isinstance(exc, OSError) else EXIT_INVALID


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")

    rec = RunRecord(args.command, argv)
    stage, error = None, None
    try:
        code = _DISPATCH[args.command](args, rec)
    except StageError as exc:
        stage, error = exc.stage, f"{type(exc.cause).__name__}: {exc.cause}"
        code = _exit_code(exc.cause)
        print(f"pcmcad {args.command}: {stage} failed: {exc.cause}", file=sys.stderr)
    except OSError as exc:
        stage, error, code = args.command, f"{type(exc).__name__}: {exc}", EXIT_IO
        print(f"pcmcad {args.command}: {exc}", file=sys.stderr)
    rec.finish(code, stage, error)
    out = _record_dir(args)
    if out is not None:
        rec.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
