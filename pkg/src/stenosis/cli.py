"""Command line entry point: run, render, eval and trace."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import depth as depth_mod
from . import geometry as geo
from . import phantom
from .core import (
    CameraIntrinsics,
    Frame,
    PipelineConfig,
    PipelineError,
    StenosisReport,
    load_sequence,
    write_frame,
)
from .evaluation import load_manifest, summarize
from .segmentation import contour_ring, threshold_segment
from .tracking import TraceRow, decision_from_state, track_sequence

log = logging.getLogger("stenosis")

GREEN = (0, 255, 0)
BLUE = (0, 0, 255)


class UsageError(PipelineError):
    module = "cli"
    exit_code = 2


@dataclass(frozen=True)
class RunOptions:
    input_dir: Path
    calibration: Path
    config_overrides: dict[str, str] = field(default_factory=dict)
    depth_provider: str = "photometric"
    manual_keyframe: int | None = None
    report_path: Path | None = None
    overlay_path: Path | None = None
    trace_path: Path | None = None
    obj_path: Path | None = None

    def __post_init__(self):
        if self.depth_provider not in ("photometric", "photometric-flat") and not self.depth_provider.startswith("file:"):
            raise UsageError(f"unknown depth provider {self.depth_provider!r}")
        if self.depth_provider == "file:":
            raise UsageError("file depth provider needs a path, e.g. file:keyframe.depth")


@dataclass
class RunResult:
    report: StenosisReport
    keyframe: Frame
    stenosis: geo.CrossSection
    reference: geo.CrossSection
    stenosis_mask: np.ndarray
    trace: list[TraceRow]
    timings: dict[str, float]


def parse_overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"config override must look like key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _keyframe_depth(opts: RunOptions, frame: Frame, K: CameraIntrinsics) -> tuple[depth_mod.DepthMap, str]:
    if opts.depth_provider.startswith("file:"):
        path = Path(opts.depth_provider[len("file:"):])
        return depth_mod.load_depth(path, expected=frame.shape), f"file({path.name})"
    model = depth_mod.PhotometricModel(gamma=K.gamma)
    if opts.depth_provider == "photometric-flat":
        return depth_mod.photometric_depth(frame, model), model.provider_id(corrected=False)
    return depth_mod.photometric_depth(frame, model, K), model.provider_id(corrected=True)


def execute(opts: RunOptions) -> RunResult:
    """Run the pipeline and return the report with its intermediate results."""
    try:
        cfg = PipelineConfig().with_overrides(opts.config_overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    frames, K = load_sequence(opts.input_dir, opts.calibration)
    by_index = {f.index: f for f in frames}
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    trace: list[TraceRow] = []
    if opts.manual_keyframe is not None:
        if opts.manual_keyframe not in by_index:
            raise UsageError(
                f"manual keyframe {opts.manual_keyframe} outside the sequence [{frames[0].index}, {frames[-1].index}]"
            )
        key_index, source, reason = opts.manual_keyframe, "manual", None
    else:
        if len(frames) < 2:
            raise UsageError("keyframe selection needs at least 2 frames")
        state, trace = track_sequence(frames, cfg)
        if opts.trace_path is not None:
            write_trace(opts.trace_path, trace)
        decision = decision_from_state(state)
        key_index, source, reason = decision.keyframe_index, "tracker", decision.reason.value
    timings["keyframe_selection"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    keyframe = by_index[key_index]
    seg = threshold_segment(keyframe, cfg)
    dmap, provider = _keyframe_depth(opts, keyframe, K)
    cloud = geo.backproject(dmap, K)
    plane = geo.stenosis_plane(cloud, seg)
    sten = geo.cross_section(cloud, plane, cfg)
    ref = geo.reference_sweep(cloud, plane, cfg)
    sev = geo.compute_psa_psd(sten, ref)
    timings["keyframe_measurement"] = time.perf_counter() - t1

    provenance = {
        "keyframe_source": source,
        "keyframe_reason": reason,
        "depth_provider": provider,
        "config": asdict(cfg),
        "intrinsics": asdict(K),
        "frames": [frames[0].index, frames[-1].index],
        "stenosis_plane": {"normal": [float(v) for v in plane.normal], "offset": float(plane.offset)},
        "reference_plane_offset": float(ref.plane.offset),
        "section_points": {"stenosis": sten.n_points, "reference": ref.n_points},
        "segment_area_px": seg.area_px,
    }
    report = StenosisReport.from_measurements(
        key_index,
        sev.area_stenosis,
        sev.area_reference,
        sev.diameter_stenosis,
        sev.diameter_reference,
        provenance=provenance,
        warnings=tuple(seg.flags) + sev.warnings,
    )
    if opts.report_path is not None:
        Path(opts.report_path).write_text(report.to_json(), encoding="utf-8")
    if opts.overlay_path is not None:
        save_keyframe_overlay(opts.overlay_path, keyframe, seg.mask, ref, K)
    if opts.obj_path is not None:
        geo.export_obj(opts.obj_path, cloud, [sten, ref])
    return RunResult(report, keyframe, sten, ref, seg.mask, trace, timings)


def run_pipeline(opts: RunOptions) -> StenosisReport:
    return execute(opts).report


def write_trace(path: Path, rows: list[TraceRow]) -> None:
    text = "# frame_index iou missed_count status\n" + "".join(r.line() + "\n" for r in rows)
    Path(path).write_text(text, encoding="utf-8")


def save_keyframe_overlay(path: Path, frame: Frame, mask: np.ndarray, ref: geo.CrossSection, K: CameraIntrinsics) -> None:
    """Keyframe with the stenosis contour in green and the reference section in blue."""
    gray = np.asarray(frame.pixels)
    rgb = np.repeat(gray[..., None], 3, axis=2).copy()
    rgb[contour_ring(mask)] = GREEN
    img = Image.fromarray(rgb, mode="RGB")
    pts = ref.boundary3d()
    pts = pts[pts[:, 2] > 0]
    if len(pts) >= 2:
        u = K.fx * pts[:, 0] / pts[:, 2] + K.cx
        v = K.fy * pts[:, 1] / pts[:, 2] + K.cy
        xy = [(float(a), float(b)) for a, b in zip(np.round(u, 3), np.round(v, 3))]
        ImageDraw.Draw(img).line(xy + xy[:1], fill=BLUE, width=2)
    img.save(path, format="PNG")


def _cmd_run(args) -> int:
    opts = RunOptions(
        input_dir=Path(args.input),
        calibration=Path(args.calib),
        config_overrides=parse_overrides(args.config),
        depth_provider=args.depth,
        manual_keyframe=args.manual_keyframe,
        report_path=Path(args.report) if args.report else None,
        overlay_path=Path(args.overlay) if args.overlay else None,
        trace_path=Path(args.trace) if args.trace else None,
        obj_path=Path(args.obj) if args.obj else None,
    )
    result = execute(opts)
    for stage, seconds in result.timings.items():
        print(f"{stage}: {seconds:.2f} s", file=sys.stderr)
    if opts.report_path is None:
        sys.stdout.write(result.report.to_json())
    else:
        r = result.report
        print(f"keyframe {r.keyframe_index}: PSA {r.psa:.2f}%  PSD {r.psd:.2f}%")
    return 0


def _cmd_render(args) -> int:
    if args.spec:
        spec = phantom.PhantomSpec.load(Path(args.spec))
    else:
        spec = phantom.make_phantom(args.ratio, noise_sigma=args.noise, seed=args.seed)
    K = phantom.default_camera(args.width, args.height, args.fov, spec.gamma)
    out = Path(args.output)
    frame_dir = out / "frames"
    frame_dir.mkdir(parents=True, exist_ok=True)
    frames, truth = phantom.render_sequence(spec, K)
    for fr in frames:
        write_frame(fr, frame_dir / f"frame_{fr.index:04d}.png")
    (out / "calib.txt").write_text(K.to_text(), encoding="utf-8")
    spec.save(out / "phantom.json")
    (out / "truth.json").write_text(json.dumps(truth.to_dict(), indent=2) + "\n", encoding="utf-8")
    if args.write_depth:
        depth_dir = out / "depth"
        depth_dir.mkdir(exist_ok=True)
        for fr, d in zip(frames, truth.depth):
            depth_mod.save_depth(d, depth_dir / f"frame_{fr.index:04d}.depth")
    print(f"wrote {len(frames)} frames to {frame_dir}")
    return 0


def _cmd_eval(args) -> int:
    sys.stdout.write(summarize(load_manifest(Path(args.manifest))))
    return 0


def _cmd_trace(args) -> int:
    cfg = PipelineConfig().with_overrides(parse_overrides(args.config))
    frames, _ = load_sequence(Path(args.input), Path(args.calib))
    state, rows = track_sequence(frames, cfg)
    if args.output:
        write_trace(Path(args.output), rows)
    else:
        sys.stdout.write("".join(r.line() + "\n" for r in rows))
    decision = decision_from_state(state)
    print(f"keyframe {decision.keyframe_index} ({decision.reason.value})", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stenosis", description="Subglottic stenosis severity from bronchoscopy frames.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="measure PSA/PSD on a frame sequence")
    run.add_argument("input", help="directory of numbered PNG frames")
    run.add_argument("--calib", required=True, help="calibration file (fx, fy, cx, cy, width, height[, gamma])")
    run.add_argument(
        "--depth",
        default="photometric",
        help="photometric (default, with incidence correction), photometric-flat, or file:PATH",
    )
    run.add_argument("--manual-keyframe", type=int, help="skip tracking and measure this frame index")
    run.add_argument("--config", action="append", default=[], metavar="KEY=VALUE", help="pipeline setting override")
    run.add_argument("--report", help="write the JSON report here instead of stdout")
    run.add_argument("--overlay", help="write the annotated keyframe PNG here")
    run.add_argument("--trace", help="write the per-frame tracking trace here")
    run.add_argument("--obj", help="write the keyframe reconstruction and sections as OBJ")
    run.set_defaults(func=_cmd_run)

    render = sub.add_parser("render", help="render a synthetic airway sequence with ground truth")
    render.add_argument("output", help="output directory")
    src = render.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", help="phantom spec JSON file")
    src.add_argument("--ratio", type=float, help="stenosis radius over tube radius for the standard phantom")
    render.add_argument("--noise", type=float, default=0.0, help="intensity noise std (standard phantom)")
    render.add_argument("--seed", type=int, default=0)
    render.add_argument("--width", type=int, default=320)
    render.add_argument("--height", type=int, default=320)
    render.add_argument("--fov", type=float, default=120.0, help="horizontal field of view in degrees")
    render.add_argument("--write-depth", action="store_true", help="also write per-frame depth rasters")
    render.set_defaults(func=_cmd_render)

    ev = sub.add_parser("eval", help="summarize reports against ground truth")
    ev.add_argument("manifest", help="INI manifest with one section per sequence")
    ev.set_defaults(func=_cmd_eval)

    tr = sub.add_parser("trace", help="print the tracking trace of a sequence")
    tr.add_argument("input")
    tr.add_argument("--calib", required=True)
    tr.add_argument("--config", action="append", default=[], metavar="KEY=VALUE")
    tr.add_argument("--output", help="write the trace here instead of stdout")
    tr.set_defaults(func=_cmd_trace)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except PipelineError as exc:
        print(exc.describe(), file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
