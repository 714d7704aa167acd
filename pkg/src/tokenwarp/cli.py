"""Command-line entry point.

Exit codes:
    0  success
    1  unexpected internal error
    2  bad command-line usage or flag values
    3  missing input file or directory
    4  malformed container, or shape / length mismatch between inputs
    5  configuration error (unreadable JSON, unknown keys, bad values, missing seed)
"""

from __future__ import annotations

import argparse
import glob
import os
import sys
import tempfile

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .container import FormatError, read_container, write_container
from .diffusion import ToyAttentionDenoiser, translate_clips
from .metrics import (
    CANONICAL_VARIANTS,
    ablation_report,
    block_variants,
    report_csv,
    ReportRow,
    temporal_consistency,
    warp_error,
)
from .synth import gen_scene
from .types import OcclusionMask, ParameterError, VideoTensor
from .warp import BlockMatchParams, OcclusionParams, block_match_flow, estimate_occlusion, resize_flow, resize_mask

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_MISSING, EXIT_FORMAT, EXIT_CONFIG = range(6)


class UsageError(Exception):
    pass


class MissingInput(Exception):
    pass


def _need_file(path):
    if not os.path.isfile(path):
        raise MissingInput(f"no such file: {path}")


def _need_dir(path):
    if not os.path.isdir(path):
        raise MissingInput(f"no such directory: {path}")


def _need_out_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise MissingInput(f"output directory does not exist: {parent}")


def _write_text(path, text: str):
    fd, tmp = tempfile.mkstemp(prefix=".tkwp-", dir=os.path.dirname(os.path.abspath(path)))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _numbered(directory, prefix):
    files = sorted(glob.glob(os.path.join(directory, f"{prefix}_*.tkwp")))
    if not files:
        raise MissingInput(f"no {prefix}_NNN.tkwp files in {directory}")
    return files


def _frame(path):
    arr = read_container(path)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim not in (2, 3):
        raise FormatError(f"{path}: expected a single frame, got shape {arr.shape}", 9)
    return arr


def _load_pairs(video: VideoTensor, flows_dir, masks_dir):
    flows = [read_container(p, "flow") for p in _numbered(flows_dir, "bwd")]
    masks = [read_container(p, "mask") for p in _numbered(masks_dir, "occ")]
    if len(flows) != video.n - 1 or len(masks) != video.n - 1:
        raise ParameterError(f"video has {video.n} frames but found {len(flows)} flows and {len(masks)} masks")
    flows = [resize_flow(f, video.h, video.w) for f in flows]
    masks = [resize_mask(m, video.h, video.w) for m in masks]
    return flows, masks


def _scene(cfg: RunConfig):
    try:
        return gen_scene(cfg.scene_spec())
    except ParameterError as exc:
        raise ConfigError(f"scene: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    cfg = load_config(args.config)
    os.makedirs(args.out_dir, exist_ok=True)
    bundle = _scene(cfg)
    write_container(os.path.join(args.out_dir, "video.tkwp"), bundle.video.data)
    for i, (f, b, m) in enumerate(zip(bundle.fwd_flows, bundle.bwd_flows, bundle.occlusion), start=1):
        write_container(os.path.join(args.out_dir, f"fwd_{i:03d}.tkwp"), f.to_array())
        write_container(os.path.join(args.out_dir, f"bwd_{i:03d}.tkwp"), b.to_array())
        write_container(os.path.join(args.out_dir, f"occ_{i:03d}.tkwp"), m.m)


def cmd_flow(args):
    for p in (args.prev, args.next):
        _need_file(p)
    _need_out_parent(args.out)
    try:
        params = BlockMatchParams(args.block, args.radius, args.levels)
    except ParameterError as exc:
        raise UsageError(str(exc)) from exc
    flow = block_match_flow(_frame(args.prev), _frame(args.next), params)
    write_container(args.out, flow.to_array())


def cmd_occl(args):
    for p in (args.fwd, args.bwd):
        _need_file(p)
    _need_out_parent(args.out)
    try:
        params = OcclusionParams(args.alpha, args.beta, args.soft)
    except ParameterError as exc:
        raise UsageError(str(exc)) from exc
    mask = estimate_occlusion(read_container(args.bwd, "flow"), read_container(args.fwd, "flow"), params)
    write_container(args.out, mask.m)


def cmd_translate(args):
    _need_file(args.config)
    _need_file(args.video)
    _need_dir(args.flows_dir)
    _need_dir(args.masks_dir)
    _need_out_parent(args.out)
    cfg = load_config(args.config)
    cfg.require_seed("translate")
    tcfg = cfg.translation_config()
    video = read_container(args.video, "video")
    flows, masks = _load_pairs(video, args.flows_dir, args.masks_dir)
    den = ToyAttentionDenoiser(d_in=video.c, schedule=tcfg.schedule, **cfg.denoiser_kwargs())
    outputs = translate_clips(video.grids(), flows, masks, den, tcfg)
    write_container(args.out, VideoTensor.from_frames(outputs).data)


def cmd_eval(args):
    _need_file(args.video)
    _need_dir(args.flows_dir)
    _need_dir(args.masks_dir)
    _need_out_parent(args.out)
    video = read_container(args.video, "video")
    flows, masks = _load_pairs(video, args.flows_dir, args.masks_dir)
    name = os.path.splitext(os.path.basename(args.video))[0]
    row = ReportRow(name, warp_error(video, flows, masks, args.masked), temporal_consistency(video))
    _write_text(args.out, report_csv([row]))


def cmd_ablate(args):
    _need_file(args.config)
    _need_out_parent(args.out)
    cfg = load_config(args.config)
    cfg.require_seed("ablate")
    tcfg = cfg.translation_config()
    bundle = _scene(cfg)
    variants = dict(CANONICAL_VARIANTS)
    variants.update(block_variants(cfg.denoiser.blocks))
    kw = cfg.denoiser_kwargs()
    seed = kw.pop("seed")
    rows = ablation_report(bundle, seed, variants, tcfg, masked=cfg.masked_warp_err, **kw)
    _write_text(args.out, report_csv(rows))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tokenwarp", description="Flow-guided token-warping video translation toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic scene with analytic flows and masks")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("flow", help="block-matching backward flow between two frames")
    p.add_argument("--prev", required=True)
    p.add_argument("--next", required=True)
    p.add_argument("--block", type=int, default=9)
    p.add_argument("--radius", type=int, default=8)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("occl", help="forward-backward occlusion mask")
    p.add_argument("--fwd", required=True)
    p.add_argument("--bwd", required=True)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--soft", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_occl)

    p = sub.add_parser("translate", help="translate a video clip by clip")
    p.add_argument("--config", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--flows-dir", required=True)
    p.add_argument("--masks-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("eval", help="warp error and temporal consistency of a video")
    p.add_argument("--video", required=True)
    p.add_argument("--flows-dir", required=True)
    p.add_argument("--masks-dir", required=True)
    p.add_argument("--masked", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="attention ablations on the configured scene")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        if args.command == "synth":
            _need_file(args.config)
        args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except (MissingInput, FileNotFoundError) as exc:
        return _fail(EXIT_MISSING, exc)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (FormatError, ParameterError) as exc:
        return _fail(EXIT_FORMAT, exc)
    except Exception as exc:  # noqa: BLE001
        return _fail(EXIT_INTERNAL, f"internal error: {type(exc).__name__}: {exc}")
    return EXIT_OK


def _fail(code, msg):
    print(f"tokenwarp: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
