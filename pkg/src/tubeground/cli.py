"""Command-line entry point.

Subcommands: synth, forward, link, eval, validate, stats, gradcheck.
Every command is deterministic given (config, seed, inputs); reruns
produce byte-identical outputs, including with --jobs > 1 (results are
merged in video-id order by the parent process).

Exit codes: 0 success, 1 failed validation/check, 2 I/O or usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from tubeground import dataio, metrics, tubes
from tubeground.config import RunConfig, load_config
from tubeground.gradcheck import run_gradcheck
from tubeground.losses import LossWeights
from tubeground.model import build_params, forward_video, params_from_arrays, params_to_arrays
from tubeground.synth import SynthConfig, synth_generate

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_IO = 2


def _build_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for name in (
        "seed", "d_model", "grid_h", "grid_w", "n_text_max", "n_queries",
        "n_frames_max", "top_m", "encoder_blocks", "decoder_layers", "heads",
    ):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "dims_equal", False):
        d = overrides.get("d_model", cfg.d_model)
        overrides.update(d_appearance=d, d_motion=d, d_text=d)
    cfg = cfg.replace(**overrides)
    return cfg


def _loss_weights(cfg: RunConfig) -> LossWeights:
    return LossWeights(
        spatial=cfg.spatial_loss_weight,
        temporal=cfg.temporal_loss_weight,
        iou_cost=cfg.iou_cost_weight,
        l1_cost=cfg.l1_cost_weight,
        class_cost=cfg.class_cost_weight,
        noobj=cfg.noobj_weight,
    )


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags override its fields")
    parser.add_argument("--seed", type=int, help="root seed recorded into every output")
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers (outputs stay byte-identical)")
    parser.add_argument("--out", help="output directory or file")
    dims = parser.add_argument_group("model dimensions (override the config)")
    for flag, dest in (
        ("--d-model", "d_model"), ("--grid-h", "grid_h"), ("--grid-w", "grid_w"),
        ("--n-text-max", "n_text_max"), ("--n-queries", "n_queries"),
        ("--n-frames-max", "n_frames_max"), ("--top-m", "top_m"),
        ("--encoder-blocks", "encoder_blocks"), ("--decoder-layers", "decoder_layers"),
        ("--heads", "heads"),
    ):
        dims.add_argument(flag, type=int, dest=dest)


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    cfg = _build_config(args)
    out = Path(args.out or "synth_data")
    out.mkdir(parents=True, exist_ok=True)
    dim = cfg.d_appearance
    if not (cfg.d_appearance == cfg.d_motion == cfg.d_text):
        print("synth requires equal modality widths", file=sys.stderr)
        return EXIT_IO
    entries = []
    for i in range(args.count):
        n_targets = 1 + (i % args.max_targets)
        scfg = SynthConfig(
            seed=cfg.seed * 1_000_003 + i,
            n_frames=args.frames,
            grid_h=cfg.grid_h,
            grid_w=cfg.grid_w,
            dim=dim,
            n_targets=n_targets,
            margin=args.margin,
            noise=args.noise,
            group_same_class=(n_targets > 1 and i % 4 == 3),
        )
        bundle, record = synth_generate(scfg)
        feat_path = out / f"{record.video_id}.features.bin"
        ann_path = out / f"{record.video_id}.annotation.json"
        dataio.write_features(feat_path, bundle)
        dataio.save_annotation(ann_path, record)
        entries.append(dataio.ManifestEntry(record.video_id, ann_path, feat_path))
    dataio.save_manifest(out / "manifest.json", entries, meta={"seed": cfg.seed})
    print(f"wrote {len(entries)} samples to {out}")
    return EXIT_OK


# -------------------------------------------------------------- forward

_WORKER = {}


def _init_worker(cfg_dict: dict, arrays: dict) -> None:
    cfg = RunConfig.from_dict(cfg_dict)
    _WORKER["cfg"] = cfg
    _WORKER["params"] = params_from_arrays(arrays, cfg)


def _forward_one(task):
    video_id, feat_path, ann_path, want_tubes = task
    cfg = _WORKER["cfg"]
    params = _WORKER["params"]
    bundle = dataio.read_features(feat_path)
    result = forward_video(params, bundle, cfg)
    arrays = {
        "boxes": result.boxes.astype(np.float32),
        "class_probs": result.class_probs.astype(np.float32),
        "temporal": result.temporal_probs.astype(np.float32),
    }
    tube_entry = None
    if want_tubes:
        record = dataio.load_annotation(ann_path)
        vocab = list(cfg.class_vocab) if cfg.class_head_mode == "class" else None
        built = tubes.build_tubes(
            result.boxes, result.class_probs, result.segment, record.mentions,
            result.class_probs.shape[-1] - 1, vocab,
        )
        tube_entry = _tubes_to_json(result.segment, built)
    return video_id, arrays, list(result.segment), tube_entry


def _tubes_to_json(segment, built) -> dict:
    return {
        "segment": [int(segment[0]), int(segment[1])],
        "tubes": [
            {
                "class_word": t.class_word,
                "span": [int(t.span[0]), int(t.span[1])],
                "segment": [int(t.segment[0]), int(t.segment[1])],
                "boxes": {str(int(f)): [float(x) for x in b] for f, b in zip(t.frames, t.boxes)},
            }
            for t in built
        ],
    }


def cmd_forward(args) -> int:
    cfg = _build_config(args)
    entries = dataio.load_manifest(args.manifest)
    out = Path(args.out or "predictions")
    out.mkdir(parents=True, exist_ok=True)

    if args.params:
        arrays, _ = dataio.read_arrays(args.params)
        params = params_from_arrays(arrays, cfg)
    else:
        params = build_params(cfg)
    arrays = params_to_arrays(params)
    if args.save_params:
        dataio.write_arrays(args.save_params, arrays, meta={"seed": cfg.seed, "config_digest": cfg.digest()})

    tasks = [
        (e.video_id, str(e.features), str(e.annotation), args.tubes)
        for e in sorted(entries, key=lambda e: e.video_id)
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(
            max_workers=args.jobs, initializer=_init_worker, initargs=(cfg.to_dict(), arrays)
        ) as pool:
            results = list(pool.map(_forward_one, tasks))
    else:
        _init_worker(cfg.to_dict(), arrays)
        results = [_forward_one(t) for t in tasks]

    meta_common = {"seed": cfg.seed, "config_digest": cfg.digest()}
    tube_index = {}
    for video_id, pred_arrays, segment, tube_entry in results:
        dataio.write_arrays(
            out / f"{video_id}.pred.bin",
            pred_arrays,
            meta={**meta_common, "video_id": video_id, "segment": segment},
        )
        if tube_entry is not None:
            tube_index[video_id] = tube_entry
    if args.tubes:
        _write_tubes(out / "tubes.json", meta_common, tube_index)
    print(f"forward pass over {len(results)} videos -> {out}")
    return EXIT_OK


def _write_tubes(path: Path, meta: dict, videos: dict) -> None:
    payload = {**meta, "videos": {k: videos[k] for k in sorted(videos)}}
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


# ----------------------------------------------------------------- link

def cmd_link(args) -> int:
    cfg = _build_config(args)
    entries = dataio.load_manifest(args.manifest)
    pred_dir = Path(args.predictions)
    out = Path(args.out or (pred_dir / "tubes.json"))
    tube_index = {}
    meta_common = {}
    for e in sorted(entries, key=lambda e: e.video_id):
        pred_path = pred_dir / f"{e.video_id}.pred.bin"
        arrays, meta = dataio.read_arrays(pred_path)
        meta_common = {"seed": meta.get("seed"), "config_digest": meta.get("config_digest")}
        record = dataio.load_annotation(e.annotation)
        segment = tuple(meta["segment"])
        vocab = list(cfg.class_vocab) if cfg.class_head_mode == "class" else None
        built = tubes.build_tubes(
            arrays["boxes"], arrays["class_probs"], segment, record.mentions,
            arrays["class_probs"].shape[-1] - 1, vocab,
        )
        tube_index[e.video_id] = _tubes_to_json(segment, built)
    _write_tubes(out, meta_common, tube_index)
    print(f"linked tubes for {len(tube_index)} videos -> {out}")
    return EXIT_OK


# ----------------------------------------------------------------- eval

def _tubes_from_json(entry: dict) -> list:
    out = []
    for t in entry.get("tubes", []):
        frames = np.array(sorted(int(f) for f in t["boxes"]), dtype=np.intp)
        boxes = np.stack([np.asarray(t["boxes"][str(f)], dtype=np.float64) for f in frames]) if len(frames) else np.zeros((0, 4))
        out.append(
            tubes.Tube(
                class_word=t["class_word"],
                span=tuple(t.get("span", (0, 0))),
                segment=tuple(t["segment"]),
                frames=frames,
                boxes=boxes,
            )
        )
    return out


def cmd_eval(args) -> int:
    entries = dataio.load_manifest(args.manifest)
    pred = json.loads(Path(args.predictions).read_text())
    videos = pred.get("videos", {})
    thresholds = tuple(args.threshold) if args.threshold else metrics.DEFAULT_THRESHOLDS
    scores = []
    for e in sorted(entries, key=lambda e: e.video_id):
        record = dataio.load_annotation(e.annotation)
        gt_tubes = metrics.gt_tubes_from_record(record)
        entry = videos.get(e.video_id)
        if entry is None:
            if args.strict:
                print(f"missing prediction for {e.video_id}", file=sys.stderr)
                return EXIT_FAILURE
            print(f"warning: no prediction for {e.video_id}, scoring 0", file=sys.stderr)
            scores.append(metrics.SampleScore(e.video_id, 0.0, 0.0, record.target_count))
            continue
        pred_segment = tuple(entry["segment"])
        pred_tubes = _tubes_from_json(entry)
        scores.append(
            metrics.SampleScore(
                video_id=e.video_id,
                tiou=metrics.sample_tiou(record.segment, pred_segment),
                viou=metrics.sample_viou(gt_tubes, record.segment, pred_tubes, pred_segment),
                target_count=record.target_count,
            )
        )
    report = metrics.aggregate(scores, thresholds)
    for line in report.lines():
        print(line)
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
    return EXIT_OK


# ------------------------------------------------------- validate/stats

def cmd_validate(args) -> int:
    try:
        entries = dataio.load_manifest(args.manifest)
        report = dataio.validate_dataset(entries)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    for line in report.lines():
        print(line)
    return EXIT_OK if report.ok else EXIT_FAILURE


def cmd_stats(args) -> int:
    try:
        entries = dataio.load_manifest(args.manifest)
        records = [dataio.load_annotation(e.annotation) for e in entries]
        stats = dataio.dataset_stats(records)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    for line in stats.lines():
        print(line)
    return EXIT_OK


# ------------------------------------------------------------ gradcheck

def cmd_gradcheck(args) -> int:
    cfg = _build_config(args)
    report = run_gradcheck(
        seed=cfg.seed,
        instances=args.instances,
        tolerance=args.tolerance,
        weights=_loss_weights(cfg),
        corrupt=args.selftest_corrupt,
    )
    for line in report.lines():
        print(line)
    return EXIT_OK if report.ok else EXIT_FAILURE


# ----------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tubeground", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--max-targets", type=int, default=3, dest="max_targets")
    p.add_argument("--margin", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--dims-equal", action="store_true", dest="dims_equal",
                   help="set all modality widths to d_model")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("forward", help="run the model over a manifest")
    _add_common(p)
    p.add_argument("manifest")
    p.add_argument("--params", help="parameter checkpoint; omitted = seeded init")
    p.add_argument("--save-params", dest="save_params", help="write the parameters used")
    p.add_argument("--tubes", action="store_true", help="also build and write tubes.json")
    p.add_argument("--dims-equal", action="store_true", dest="dims_equal", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("link", help="build tubes from raw predictions")
    _add_common(p)
    p.add_argument("manifest")
    p.add_argument("predictions", help="directory holding <video>.pred.bin files")
    p.add_argument("--dims-equal", action="store_true", dest="dims_equal", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_link)

    p = sub.add_parser("eval", help="score tube predictions against ground truth")
    _add_common(p)
    p.add_argument("manifest")
    p.add_argument("predictions", help="tubes.json produced by forward --tubes or link")
    p.add_argument("--threshold", type=float, action="append",
                   help="score threshold(s); default 0.3 and 0.5")
    p.add_argument("--strict", action="store_true", help="fail on missing predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("validate", help="validate a dataset manifest")
    _add_common(p)
    p.add_argument("manifest")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("stats", help="dataset statistics")
    _add_common(p)
    p.add_argument("manifest")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("gradcheck", help="finite-difference check of loss gradients")
    _add_common(p)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--selftest-corrupt", action="store_true", dest="selftest_corrupt",
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
