"""Command-line entry point: ``hdrflow <subcommand> ...``.

Every run prints a ``HDRFLOW-SUMMARY 1`` header followed by key=value
summary lines on stdout. Exit codes: 0 success,
1 usage error, 2 data error, 3 numeric fault.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import ConfigError, FormatError, NumericFault, ShapeError, TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SUMMARY_HEADER = "HDRFLOW-SUMMARY 1"

log = logging.getLogger("hdrflow")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def emit(key: str, value) -> None:
    if isinstance(value, float):
        value = f"{value:.6g}"
    print(f"{key}={value}", flush=True)


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def _threads(args) -> int:
    raw = args.threads if args.threads is not None else os.environ.get("HDRFLOW_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"--threads / HDRFLOW_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"--threads must be >= 1, got {n}")
    return n


def _require_file(path, what) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def cmd_fuse(args) -> int:
    from .data import load_frames, read_manifest, schedule_from_exposures
    from .imageio import write_pfm
    from .hdr import RadianceFrame
    from .networks import load_weights
    from .pipeline import process_sequence, split_weights
    from .tensor import Tensor

    threads = _threads(args)
    manifest = read_manifest(_require_file(args.input, "manifest"))
    weights = load_weights(_require_file(args.weights, "weight file"))
    flow_w, fusion_w = split_weights(weights)
    if not len(flow_w) or not len(fusion_w):
        raise FormatError(f"{args.weights}: expected 'flow.' and 'fusion.' tensors")
    schedule = schedule_from_exposures(manifest.exposures(), args.exposures)
    frames = load_frames(manifest)
    white = args.white_point if args.white_point is not None else (manifest.white_point or 1.0)
    if not white > 0:
        raise UsageError(f"--white-point must be positive, got {white}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    emit("command", "fuse")
    emit("frames_in", len(frames))
    emit("threads", threads)
    emit("white_point", float(white))

    written = []

    def sink(ref, hdr):
        data = hdr.image.data * np.float32(white)
        if not np.isfinite(data).all():
            raise NumericFault(f"non-finite radiance in output frame {manifest.records[ref].index}")
        path = out_dir / f"frame_{manifest.records[ref].index:05d}.pfm"
        write_pfm(RadianceFrame(Tensor(data)), path)
        written.append((ref, path))

    timings = []
    process_sequence(frames, schedule, (flow_w, fusion_w), sink, threads, timings)
    secs = dict(timings)
    for ref, path in written:
        print(f"frame={manifest.records[ref].index} path={path} wall_ms={secs[ref] * 1e3:.1f}", flush=True)
    emit("frames_out", len(written))
    return EXIT_OK


def cmd_synth(args) -> int:
    from .data import Manifest, ManifestRecord, relpath, synthesize_frames, write_manifest
    from .hdr import ExposureSchedule, RadianceFrame
    from .imageio import read_pfm, write_ppm
    from .tensor import Tensor

    hdr_dir = Path(args.hdr_dir)
    if not hdr_dir.is_dir():
        raise FileNotFoundError(f"HDR directory not found: {hdr_dir}")
    paths = sorted(hdr_dir.glob("*.pfm"))
    if not paths:
        raise FormatError(f"no .pfm files in {hdr_dir}")
    try:
        pattern = tuple(float(v) for v in args.schedule.split(","))
    except ValueError:
        raise UsageError(f"--schedule must be comma-separated numbers, got {args.schedule!r}") from None
    try:
        schedule = ExposureSchedule(pattern, args.gamma)
    except ConfigError as exc:
        raise UsageError(f"--schedule: {exc}") from None
    raw = [read_pfm(p).image.data for p in paths]
    white = args.white_point if args.white_point is not None else float(max(a.max() for a in raw))
    if not white > 0:
        raise FormatError("HDR frames are all zero; pass --white-point")
    frames = [RadianceFrame(Tensor(a / np.float32(white))) for a in raw]
    ldr = synthesize_frames(frames, schedule, args.gamma, args.phase,
                            8 if args.bits == 8 else None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    records = []
    for i, (frame, src) in enumerate(zip(ldr, paths)):
        name = f"ldr_{i:05d}.ppm"
        write_ppm(frame, out.parent / name, bits=args.bits)
        records.append(ManifestRecord(i, name, frame.exposure, relpath(src, out.parent)))
    write_manifest(Manifest(records, float(white), out.parent), out)
    emit("command", "synth")
    emit("frames", len(records))
    emit("schedule", ",".join(f"{e:g}" for e in pattern))
    emit("white_point", float(white))
    emit("bits", args.bits)
    emit("manifest", out)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .hdr import RadianceFrame
    from .imageio import read_pfm
    from .metrics import evaluate

    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"directory not found: {d}")
    names = sorted({p.name for p in pred_dir.glob("*.pfm")} & {p.name for p in gt_dir.glob("*.pfm")})
    if not names:
        raise FormatError(f"no PFM files common to {pred_dir} and {gt_dir}")
    preds, gts = [], []
    for n in names:
        g = read_pfm(gt_dir / n).image
        wp = args.white_point if args.white_point is not None else float(g.data.max())
        wp = wp if wp > 0 else 1.0
        gts.append(RadianceFrame(g, wp))
        preds.append(RadianceFrame(read_pfm(pred_dir / n).image, wp))
    report = evaluate(preds, gts, names, args.mu)
    emit("command", "eval")
    emit("frames", len(names))
    for name, p, s in report.per_frame:
        print(f"frame={name} psnr_t={p:.2f} ssim_t={s:.4f}", flush=True)
    print(f"frame=mean psnr_t={report.psnr_t:.2f} ssim_t={report.ssim_t:.4f}", flush=True)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.module, args.seed)
    emit("command", "gradcheck")
    emit("module", args.module)
    for r in results:
        print(r.line(), flush=True)
    failed = [r for r in results if not r.passed]
    emit("checks", len(results))
    emit("failed", len(failed))
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_train_tiny(args) -> int:
    from .data import load_training_sample, read_manifest
    from .trainer import TrainConfig, endpoint_error, overfit_tiny, predicted_flows, save_checkpoint

    manifest = read_manifest(_require_file(args.sample, "manifest"))
    half = 1 if args.exposures == 2 else 2
    ref = args.reference if args.reference is not None else half
    sample = load_training_sample(manifest, ref, args.exposures)
    config = TrainConfig(learning_rate=args.lr, max_steps=args.steps, seed=args.seed,
                         channel_divisor=args.divisor)
    out = Path(args.out)
    emit("command", "train-tiny")
    emit("source", sample.source_tag)
    try:
        result = overfit_tiny(sample, config)
        curve, reports = result.curve, result.reports
    except TrainingDiverged as exc:
        _write_curve(out, exc.curve, None)
        raise
    _write_curve(out, curve, reports)
    emit("steps", len(curve))
    emit("initial_loss", curve[0])
    emit("final_loss", curve[-1])
    emit("reduction", result.reduction)
    if sample.has_flow_gt:
        emit("flow_epe", endpoint_error(predicted_flows(sample, result.weights), sample.gt_flows))
    if args.checkpoint:
        save_checkpoint(args.checkpoint, result.weights, result.state)
        emit("checkpoint", args.checkpoint)
    emit("curve", out)
    return EXIT_OK


def _write_curve(path: Path, curve, reports) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = ["step,total,rec,ha,flow"]
    for i, total in enumerate(curve):
        if reports is not None:
            r = reports[i]
            rows.append(f"{i},{total!r},{r.rec!r},{r.ha!r},{r.flow!r}")
        else:
            rows.append(f"{i},{total!r},,,")
    path.write_text("\n".join(rows) + "\n", encoding="ascii")


def cmd_flowviz(args) -> int:
    from .flow import flow_to_rgb, read_flo
    from .imageio import write_ppm

    flow = read_flo(_require_file(args.flo, ".flo file"))
    rgb = flow_to_rgb(flow)
    write_ppm(rgb.data, args.out, bits=8)
    mag = np.sqrt(flow.u.astype(np.float64) ** 2 + flow.v.astype(np.float64) ** 2)
    emit("command", "flowviz")
    emit("size", f"{flow.shape[2]}x{flow.shape[1]}")
    emit("max_magnitude", float(mag.max()))
    emit("out", args.out)
    return EXIT_OK


def cmd_init_weights(args) -> int:
    from .networks import FlowNetConfig, FusionNetConfig, init_model, save_weights

    if args.divisor < 1:
        raise UsageError("--divisor must be >= 1")
    store = init_model(FlowNetConfig().scaled(args.divisor),
                       FusionNetConfig.for_exposures(args.exposures, args.divisor), args.seed)
    save_weights(store, args.out)
    emit("command", "init-weights")
    emit("tensors", len(store))
    emit("parameters", store.num_parameters())
    emit("out", args.out)
    return EXIT_OK


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hdrflow", description="HDR video reconstruction from alternating exposures")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    f = sub.add_parser("fuse", help="reconstruct one HDR frame per complete window")
    f.add_argument("--input", required=True, help="frame manifest")
    f.add_argument("--weights", required=True, help="HDRW weight file (flow. and fusion. tensors)")
    f.add_argument("--exposures", type=int, choices=(2, 3), required=True)
    f.add_argument("--out-dir", required=True)
    f.add_argument("--white-point", type=float, default=None,
                   help="output scale (default: manifest value, else 1.0)")
    f.add_argument("--threads", default=None, help="window-parallel workers (env HDRFLOW_THREADS)")
    f.set_defaults(func=cmd_fuse)

    s = sub.add_parser("synth", help="simulate an alternating-exposure LDR sequence")
    s.add_argument("--hdr-dir", required=True)
    s.add_argument("--schedule", required=True, help="comma-separated exposure ratios, e.g. 1,8")
    s.add_argument("--out", required=True, help="manifest to write; frames go beside it")
    s.add_argument("--bits", type=int, choices=(8, 16), default=16)
    s.add_argument("--gamma", type=float, default=2.2)
    s.add_argument("--phase", type=int, default=0)
    s.add_argument("--white-point", type=float, default=None)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="PSNR_T / SSIM_T per frame and mean")
    e.add_argument("--pred-dir", required=True)
    e.add_argument("--gt-dir", required=True)
    e.add_argument("--white-point", type=float, default=None,
                   help="normalisation (default: per-frame GT maximum)")
    e.add_argument("--mu", type=float, default=5000.0)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--module", choices=("all", "ops", "losses", "networks"), default="all")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train-tiny", help="overfit one sample and write the loss curve")
    t.add_argument("--sample", required=True, help="manifest holding the window")
    t.add_argument("--out", required=True, help="CSV loss curve")
    t.add_argument("--exposures", type=int, choices=(2, 3), default=2)
    t.add_argument("--reference", type=int, default=None, help="record position of the reference")
    t.add_argument("--steps", type=int, default=500)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--divisor", type=int, default=4, help="channel width divisor")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--checkpoint", default=None)
    t.set_defaults(func=cmd_train_tiny)

    v = sub.add_parser("flowviz", help="colour-code a .flo file")
    v.add_argument("--flo", required=True)
    v.add_argument("--out", required=True, help="PPM image")
    v.set_defaults(func=cmd_flowviz)

    w = sub.add_parser("init-weights", help="write seeded initial weights")
    w.add_argument("--out", required=True)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--exposures", type=int, choices=(2, 3), default=2)
    w.add_argument("--divisor", type=int, default=1)
    w.set_defaults(func=cmd_init_weights)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    print(SUMMARY_HEADER, flush=True)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("hdrflow: a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
        code = args.func(args)
    except UsageError as exc:
        code, msg = EXIT_USAGE, str(exc)
    except (FileNotFoundError, IsADirectoryError, FormatError, ShapeError, ConfigError) as exc:
        code, msg = EXIT_DATA, str(exc)
    except (NumericFault, TrainingDiverged) as exc:
        code, msg = EXIT_NUMERIC, str(exc)
    else:
        emit("status", "ok" if code == EXIT_OK else "failed")
        emit("exit_code", code)
        return code
    print(f"error: {msg}", file=sys.stderr)
    emit("error", " ".join(msg.split()))
    emit("status", "error")
    emit("exit_code", code)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
