"""Command-line pipeline: scene generation, training, translation, evaluation.

Every artifact-producing command writes a ``run_manifest.json`` next to its
outputs (command line, resolved config, master seed, code version, wall
clock, thread count) sufficient to re-execute the run. Progress and errors
are logged as line-oriented JSON on stderr.

Exit codes: 0 success, 1 internal error, 2 user-input error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__, datasets, diffusion, fileio, metrics, shading, toyscenes
from .errors import PpskitError, UserInputError
from .geometry import LightModel, NormalizationMode, compute_pps, normalize_pps
from .rasters import DepthMap, ScalarField

# Training profiles. The defaults mirror the full-scale recipe (10000 adapter
# steps, batch 16, slow base fine-tune); --desk switches to the small-scale
# profile that trains in minutes on a CPU.
FULL_PROFILE = {"steps": 10000, "batch": 16, "lr_stage1": 2e-6, "lr": 1e-4}
DESK_PROFILE = {"steps": 2000, "batch": 8, "lr_stage1": 1e-4, "lr": 1e-4}


def log_event(event: str, **fields) -> None:
    record = {"event": event}
    record.update(fields)
    print(json.dumps(record), file=sys.stderr)


def _parse_light(text: str) -> LightModel:
    try:
        parts = tuple(float(p) for p in text.split(","))
    except ValueError as exc:
        raise UserInputError(f"bad light position {text!r}: expected x,y,z") from exc
    if len(parts) != 3:
        raise UserInputError(f"bad light position {text!r}: expected three components")
    return LightModel(parts)


def _resolve_train_settings(args, stage: str) -> dict:
    profile = DESK_PROFILE if args.desk else FULL_PROFILE
    lr_default = profile["lr_stage1"] if stage == "stage1" else profile["lr"]
    return {
        "steps": args.steps if args.steps is not None else profile["steps"],
        "batch": args.batch if args.batch is not None else profile["batch"],
        "lr": args.lr if args.lr is not None else lr_default,
        "seed": args.seed,
    }


def _write_manifest(out_dir, args, config: dict, inputs: list, outputs: list,
                    started: float) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fileio.atomic_write_json(out_dir / "run_manifest.json", {
        "command": list(args._argv),
        "config": config,
        "master_seed": getattr(args, "seed", None),
        "code_version": __version__,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "started_unix": started,
        "wall_clock_s": time.time() - started,
        "thread_count": torch.get_num_threads(),
    })


# ---------------------------------------------------------------------------
# Commands


def cmd_scenes_generate(args) -> None:
    started = time.time()
    manifest = toyscenes.generate_dataset(
        args.out, args.style, args.count, args.seed, size=args.size, split=args.split,
        light=_parse_light(args.light_pos),
    )
    log_event("scenes.generated", out=str(args.out), count=manifest["count"],
              style=manifest["style"])
    _write_manifest(args.out, args, {
        "style": args.style, "count": args.count, "size": args.size, "split": args.split,
        "light_pos": args.light_pos,
    }, inputs=[], outputs=[args.out], started=started)


def cmd_pps_compute(args) -> None:
    started = time.time()
    depth = fileio.read_depth(args.depth, args.depth_scale)
    k = fileio.read_intrinsics(args.intrinsics)
    if depth.values.shape != k.shape:
        raise UserInputError(
            f"depth raster {depth.values.shape} does not match intrinsics {k.shape}"
        )
    light = _parse_light(args.light_pos)
    pps = compute_pps(depth, k, light)
    if args.normalize != "raw":
        pps = normalize_pps(pps, NormalizationMode(args.normalize))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    values = np.where(pps.valid, pps.values, np.nan)
    fileio.write_pfm(out_dir / "pps.pfm", values)
    log_event("pps.computed", out=str(out_dir / "pps.pfm"),
              valid_fraction=pps.valid_fraction, normalization=pps.meta.get("normalization"))
    _write_manifest(out_dir, args, {
        "normalize": args.normalize, "light_pos": args.light_pos,
        "depth_scale": args.depth_scale,
    }, inputs=[args.depth, args.intrinsics], outputs=[out_dir / "pps.pfm"], started=started)


def cmd_train_codec(args) -> None:
    from .control_codec import CodecTrainConfig, train_codec

    started = time.time()
    settings = _resolve_train_settings(args, "codec")
    dataset = datasets.load_scene_dataset(args.data)
    cond = datasets.conditioning_maps(dataset, args.condition)
    cfg = CodecTrainConfig(steps=settings["steps"], lr=settings["lr"],
                           batch=settings["batch"], seed=settings["seed"])
    _, losses = train_codec(cond, cfg, out_dir=args.out)
    log_event("train.codec.done", steps=cfg.steps, final_loss=losses[-1])
    _write_manifest(args.out, args, {**settings, "condition": args.condition},
                    inputs=[args.data], outputs=[Path(args.out) / "codec.ppsc"], started=started)


def cmd_train_stage1(args) -> None:
    started = time.time()
    settings = _resolve_train_settings(args, "stage1")
    source = datasets.load_image_stack(Path(args.source) / "images")
    target = datasets.load_image_stack(Path(args.target) / "images")
    cfg = diffusion.DiffusionTrainConfig(
        steps=settings["steps"], batch=settings["batch"], lr=settings["lr"],
        seed=settings["seed"],
    )
    diffusion.train_stage1(source, target, cfg, args.out)
    log_event("train.stage1.done", steps=cfg.steps, out=str(args.out))
    _write_manifest(args.out, args, settings, inputs=[args.source, args.target],
                    outputs=[Path(args.out) / diffusion.MODEL_FILE], started=started)


def cmd_train_stage2(args) -> None:
    started = time.time()
    settings = _resolve_train_settings(args, "stage2")
    dataset = datasets.load_scene_dataset(args.data)
    cond = datasets.conditioning_maps(dataset, args.condition)
    stage1_path = _checkpoint_path(args.stage1, diffusion.MODEL_FILE)
    cfg = diffusion.DiffusionTrainConfig(
        steps=settings["steps"], batch=settings["batch"], lr=settings["lr"],
        seed=settings["seed"],
    )
    diffusion.train_stage2(dataset.images, cond, stage1_path, cfg, args.out,
                           codec_init_path=args.codec)
    log_event("train.stage2.done", steps=cfg.steps, condition=args.condition,
              out=str(args.out))
    _write_manifest(args.out, args, {**settings, "condition": args.condition},
                    inputs=[args.data, stage1_path],
                    outputs=[Path(args.out) / diffusion.CONTROL_FILE], started=started)


def _checkpoint_path(given, default_name: str) -> Path:
    path = Path(given)
    if path.is_dir():
        path = path / default_name
    if not path.exists():
        raise UserInputError(f"checkpoint not found: {path}")
    return path


def cmd_translate(args) -> None:
    started = time.time()
    if bool(args.depth) == bool(args.depth_dir):
        raise UserInputError("provide exactly one of --depth or --depth-dir")
    base = diffusion.load_base_unet(_checkpoint_path(args.stage1, diffusion.MODEL_FILE))
    stack = diffusion.load_control_stack(
        _checkpoint_path(args.stage2, diffusion.CONTROL_FILE), base)
    light = _parse_light(args.light_pos)
    schedule = diffusion.NoiseSchedule.linear()
    cfg = diffusion.SampleConfig(ddim_steps=args.ddim_steps, eta=args.eta,
                                 seed=args.seed, domain=args.domain)

    if args.depth:
        stems = [Path(args.depth).stem]
        depth_paths = [Path(args.depth)]
        k = fileio.read_intrinsics(args.intrinsics)
    else:
        files = datasets.list_files(Path(args.depth_dir) / "depth", ".pfm")
        if not files:
            raise UserInputError(f"no depth maps under {args.depth_dir}/depth")
        stems = sorted(files)
        depth_paths = [files[s] for s in stems]
        intrinsics_path = args.intrinsics or Path(args.depth_dir) / "intrinsics.txt"
        k = fileio.read_intrinsics(intrinsics_path)

    out_dir = Path(args.out)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "pps").mkdir(parents=True, exist_ok=True)
    outputs = []
    chunk = 32
    for lo in range(0, len(stems), chunk):
        sub = list(range(lo, min(lo + chunk, len(stems))))
        depth_maps = [fileio.read_depth(depth_paths[i], args.depth_scale) for i in sub]
        results = diffusion.translate_many(
            depth_maps, k, light, base, stack, schedule, cfg, sample_indices=sub)
        for i, (image, pps_map) in zip(sub, results):
            img01 = (image + 1.0) / 2.0
            image_path = out_dir / "images" / f"{stems[i]}.png"
            pps_path = out_dir / "pps" / f"{stems[i]}.pfm"
            fileio.write_image(image_path, img01)
            fileio.write_pfm(pps_path, np.where(pps_map.valid, pps_map.values, np.nan))
            outputs.extend([image_path, pps_path])
    log_event("translate.done", scenes=len(stems), out=str(out_dir))
    _write_manifest(out_dir, args, {
        "ddim_steps": args.ddim_steps, "eta": args.eta, "domain": args.domain,
        "light_pos": args.light_pos,
    }, inputs=[args.depth or args.depth_dir, args.stage1, args.stage2],
        outputs=outputs[:8] + ["..."] if len(outputs) > 8 else outputs, started=started)


def cmd_audit_shading(args) -> None:
    started = time.time()
    pps_values = fileio.read_pfm(args.pps)
    if pps_values.ndim != 2:
        raise UserInputError(f"{args.pps}: shading map must be single-channel")
    pps = ScalarField.from_values(pps_values.astype(np.float64))
    image = fileio.read_image(args.image)
    intensity = shading.to_intensity(image)
    report = shading.shading_error(pps, intensity)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    error_values = np.where(report.error_map.valid, report.error_map.values, np.nan)
    fileio.write_pfm(out_dir / "error_map.pfm", error_values)
    fileio.atomic_write_json(out_dir / "stats.json", report.to_dict())
    log_event("audit.shading.done", **report.to_dict())
    _write_manifest(out_dir, args, {}, inputs=[args.pps, args.image],
                    outputs=[out_dir / "error_map.pfm", out_dir / "stats.json"],
                    started=started)


def cmd_metrics_depth(args) -> None:
    started = time.time()
    pairs = datasets.pair_by_stem(args.pred, args.gt, ".pfm", ".pfm")
    alignment = metrics.Alignment.MEDIAN_SCALE if args.align == "median" else metrics.Alignment.NONE
    per_pair = []
    pooled_pred, pooled_gt, pooled_mask = [], [], []
    for stem, pred_path, gt_path in pairs:
        pred = fileio.read_depth(pred_path)
        gt = fileio.read_depth(gt_path)
        report = metrics.depth_metrics(pred, gt, alignment)
        per_pair.append({"stem": stem, **report.to_dict()})
        joint = pred.valid & gt.valid
        pooled_pred.append(pred.values[joint])
        pooled_gt.append(gt.values[joint])
        pooled_mask.append(joint)
    flat_pred = DepthMap.from_values(np.concatenate(pooled_pred)[None, :])
    flat_gt = DepthMap.from_values(np.concatenate(pooled_gt)[None, :])
    aggregate = metrics.depth_metrics(flat_pred, flat_gt, alignment)
    result = {"aggregate": aggregate.to_dict(), "pairs": per_pair}
    print(json.dumps(result, indent=2, sort_keys=True))
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        fileio.atomic_write_json(out_dir / "depth_metrics.json", result)
        _write_manifest(out_dir, args, {"align": args.align},
                        inputs=[args.pred, args.gt],
                        outputs=[out_dir / "depth_metrics.json"], started=started)


def _features_for(args, dir_path, feature_file):
    if feature_file:
        return metrics.FeatureSet(rows=fileio.read_features(feature_file),
                                  extractor_id="external")
    return metrics.extract_features(datasets.load_images_01(dir_path), args.extractor)


def cmd_metrics_fid(args) -> None:
    started = time.time()
    if not (args.set_a or args.features_a) or not (args.set_b or args.features_b):
        raise UserInputError("each side needs --set-X (image dir) or --features-X (file)")
    features_a = _features_for(args, args.set_a, args.features_a)
    features_b = _features_for(args, args.set_b, args.features_b)
    value = metrics.fid_between(features_a, features_b)
    result = {
        "fid": value, "n_a": features_a.n, "n_b": features_b.n,
        "extractor": [features_a.extractor_id, features_b.extractor_id],
    }
    print(json.dumps(result, indent=2, sort_keys=True))
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        fileio.atomic_write_json(out_dir / "fid.json", result)
        _write_manifest(out_dir, args, {"extractor": args.extractor},
                        inputs=[args.set_a or args.features_a, args.set_b or args.features_b],
                        outputs=[out_dir / "fid.json"], started=started)


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppskit", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    scenes = sub.add_parser("scenes", help="procedural dataset generation")
    scenes_sub = scenes.add_subparsers(dest="subcommand", required=True)
    gen = scenes_sub.add_parser("generate", help="write a (depth, image) dataset directory")
    gen.add_argument("--out", required=True)
    gen.add_argument("--style", choices=sorted(toyscenes.STYLES), required=True)
    gen.add_argument("--count", type=int, default=256)
    gen.add_argument("--size", type=int, default=64)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--split", default="train")
    gen.add_argument("--light-pos", default="0,0,0")
    gen.set_defaults(func=cmd_scenes_generate)

    pps = sub.add_parser("pps", help="shading-map computation")
    pps_sub = pps.add_subparsers(dest="subcommand", required=True)
    comp = pps_sub.add_parser("compute", help="depth map -> shading map PFM")
    comp.add_argument("--depth", required=True)
    comp.add_argument("--intrinsics", required=True)
    comp.add_argument("--out", required=True)
    comp.add_argument("--normalize", default="raw",
                      choices=["raw", "none", "max", "percentile"])
    comp.add_argument("--depth-scale", type=float, default=None,
                      help="meters per unit for 16-bit PNG depth")
    comp.add_argument("--light-pos", default="0,0,0")
    comp.add_argument("--seed", type=int, default=0)
    comp.set_defaults(func=cmd_pps_compute)

    train = sub.add_parser("train", help="training stages")
    train_sub = train.add_subparsers(dest="subcommand", required=True)

    def add_train_common(p):
        p.add_argument("--out", required=True)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--batch", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--desk", action="store_true",
                       help="desk-scale profile (small, CPU-friendly)")

    codec = train_sub.add_parser("codec", help="pretrain the control codec alone")
    codec.add_argument("--data", required=True, help="dataset directory")
    codec.add_argument("--condition", choices=["pps", "depth"], default="pps")
    add_train_common(codec)
    codec.set_defaults(func=cmd_train_codec)

    stage1 = train_sub.add_parser("stage1", help="train the base diffusion model")
    stage1.add_argument("--source", required=True, help="synthetic-domain dataset directory")
    stage1.add_argument("--target", required=True, help="real-domain dataset directory")
    add_train_common(stage1)
    stage1.set_defaults(func=cmd_train_stage1)

    stage2 = train_sub.add_parser("stage2", help="train adapter + codec against frozen base")
    stage2.add_argument("--data", required=True, help="source-domain dataset directory")
    stage2.add_argument("--stage1", required=True, help="stage-1 output directory or model file")
    stage2.add_argument("--condition", choices=["pps", "depth"], default="pps")
    stage2.add_argument("--codec", default=None, help="optional pretrained codec checkpoint")
    add_train_common(stage2)
    stage2.set_defaults(func=cmd_train_stage2)

    trans = sub.add_parser("translate", help="depth -> real-style image")
    trans.add_argument("--depth", default=None, help="single depth map (PFM or 16-bit PNG)")
    trans.add_argument("--depth-dir", default=None, help="dataset directory with depth/*.pfm")
    trans.add_argument("--intrinsics", default=None)
    trans.add_argument("--depth-scale", type=float, default=None)
    trans.add_argument("--stage1", required=True)
    trans.add_argument("--stage2", required=True)
    trans.add_argument("--out", required=True)
    trans.add_argument("--ddim-steps", type=int, default=20)
    trans.add_argument("--eta", type=float, default=0.0)
    trans.add_argument("--seed", type=int, default=0)
    trans.add_argument("--domain", type=int, default=diffusion.DOMAIN_TARGET)
    trans.add_argument("--light-pos", default="0,0,0")
    trans.set_defaults(func=cmd_translate)

    audit = sub.add_parser("audit", help="consistency audits")
    audit_sub = audit.add_subparsers(dest="subcommand", required=True)
    shd = audit_sub.add_parser("shading", help="shading-vs-intensity error map")
    shd.add_argument("--pps", required=True)
    shd.add_argument("--image", required=True)
    shd.add_argument("--out", required=True)
    shd.add_argument("--seed", type=int, default=0)
    shd.set_defaults(func=cmd_audit_shading)

    met = sub.add_parser("metrics", help="evaluation metrics")
    met_sub = met.add_subparsers(dest="subcommand", required=True)
    dep = met_sub.add_parser("depth", help="depth metrics over paired directories")
    dep.add_argument("--pred", required=True)
    dep.add_argument("--gt", required=True)
    dep.add_argument("--align", choices=["none", "median"], default="none")
    dep.add_argument("--out", default=None)
    dep.add_argument("--seed", type=int, default=0)
    dep.set_defaults(func=cmd_metrics_depth)
    fid = met_sub.add_parser("fid", help="Frechet feature distance between image sets")
    fid.add_argument("--set-a", default=None)
    fid.add_argument("--set-b", default=None)
    fid.add_argument("--features-a", default=None, help="precomputed feature file")
    fid.add_argument("--features-b", default=None)
    fid.add_argument("--extractor", default=metrics.PATCH_STATS_V1)
    fid.add_argument("--out", default=None)
    fid.add_argument("--seed", type=int, default=0)
    fid.set_defaults(func=cmd_metrics_fid)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args._argv = ["ppskit"] + argv
    try:
        args.func(args)
        return 0
    except UserInputError as exc:
        log_event("error", kind="user-input", message=str(exc))
        return 2
    except FileNotFoundError as exc:
        log_event("error", kind="user-input", message=str(exc))
        return 2
    except PpskitError as exc:
        log_event("error", kind="internal", message=str(exc))
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
