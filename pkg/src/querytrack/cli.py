"""Operator front door: dataset generation, training, inference, evaluation,
and gradient checking.

Configuration precedence is defaults < --config JSON file < command flags.
The config file may carry "model", "train", and "scene" sections whose fields
mirror ModelConfig, TrainConfig, and SceneConfig. Every run prints its
resolved configuration as a JSON line before doing work; failures exit
nonzero with a single `error: ...` line on stderr. Setting QUERYTRACK_FLOAT64
to a non-empty value runs everything in float64.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import gradcheck as gradcheck_suite
from .checkpoint import load_checkpoint
from .evaluation import evaluate, ground_truth_tracks
from .inference import predict_pair, save_predictions, load_predictions
from .knowledge import per_frame_best, sigmoid_scores
from .model import Model, ModelConfig
from .ppm import save_pgm
from .precision import set_default_dtype
from .synthetic import (SceneConfig, dataset_stats, generate_dataset,
                        load_dataset, save_dataset)
from .training import TrainConfig, train

FLOAT64_ENV = "QUERYTRACK_FLOAT64"
_CONFIG_SECTIONS = {"model", "train", "scene"}


def _load_config_file(path):
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as err:
            raise ValueError(f"{path}: invalid JSON ({err})") from err
    unknown = sorted(set(data) - _CONFIG_SECTIONS)
    if unknown:
        raise ValueError(f"{path}: unknown config sections {unknown} "
                         f"(expected subset of {sorted(_CONFIG_SECTIONS)})")
    return data


def _merge_flags(base, args, names):
    """Overlay non-None flag values onto a config dict."""
    out = dict(base)
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            out[name] = value
    return out


_MODEL_FLAGS = ("stages", "frames_per_clip", "frame_size", "patch_size",
                "channels", "window_radius", "score_threshold", "top_n",
                "pool_size", "spatial_blend", "video_blend", "query_mode",
                "backbone_depth", "max_frames", "tie_weights")
_TRAIN_FLAGS = ("iterations", "lr", "weight_decay", "checkpoint_interval")
_SCENE_FLAGS = ("canvas", "occlusion_prob", "blur_prob",
                "distractor_similarity")


def _resolve_model(config_file, args):
    return ModelConfig.from_dict(
        _merge_flags(config_file.get("model", {}), args, _MODEL_FLAGS))


def _resolve_train(config_file, args):
    data = _merge_flags(config_file.get("train", {}), args, _TRAIN_FLAGS)
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown train config fields {unknown}")
    if "betas" in data:
        data["betas"] = tuple(data["betas"])
    return TrainConfig(**data)


def _resolve_scene(config_file, args):
    return SceneConfig.from_dict(
        _merge_flags(config_file.get("scene", {}), args, _SCENE_FLAGS))


def _echo(payload):
    print(json.dumps(payload, sort_keys=True))


def _add_common(parser):
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, default=0)


def cmd_gen_data(args):
    config_file = _load_config_file(args.config)
    scene = _resolve_scene(config_file, args)
    _echo({"command": "gen-data", "seed": args.seed, "out": args.out,
           "pairs": args.pairs, "clip_len": args.clip_len,
           "scene": scene.to_dict()})
    pairs = generate_dataset(args.pairs, config=scene, clip_len=args.clip_len,
                             base_seed=args.seed)
    save_dataset(pairs, args.out)
    _echo({"written": args.out, "stats": dataset_stats(pairs)})
    return 0


def cmd_train(args):
    config_file = _load_config_file(args.config)
    model_config = _resolve_model(config_file, args)
    train_config = _resolve_train(config_file, args)
    _echo({"command": "train", "seed": args.seed, "data": args.data,
           "out": args.out, "model": model_config.to_dict(),
           "train": dataclasses.asdict(train_config)})
    pairs = load_dataset(args.data)
    result = train(pairs, model_config, train_config, seed=args.seed,
                   out_dir=args.out)
    _echo({"checkpoint": os.path.join(args.out, "checkpoint.bin"),
           "loss_log": os.path.join(args.out, "loss.csv"),
           "first_loss": result.history[0][-1],
           "final_loss": result.history[-1][-1]})
    return 0


def _restore_model(args, config_file):
    if not os.path.exists(args.checkpoint):
        raise ValueError(f"checkpoint not found: {args.checkpoint}")
    if "model" in config_file:
        model_config = ModelConfig.from_dict(config_file["model"])
    else:
        sidecar = os.path.join(os.path.dirname(args.checkpoint) or ".",
                               "model_config.json")
        if not os.path.exists(sidecar):
            raise ValueError(f"no model config: pass --config with a 'model' "
                             f"section or keep {sidecar} next to the checkpoint")
        model_config = ModelConfig.load_json(sidecar)
    model = Model(model_config, seed=args.seed)
    model.load_state_dict(load_checkpoint(args.checkpoint))
    return model, model_config


def _dump_attention(out_dir, pair, states, model_config):
    """Per-stage saliency as PGM images upsampled to frame resolution."""
    os.makedirs(out_dir, exist_ok=True)
    grid_h, grid_w = model_config.grid()
    scale = model_config.frame_size // grid_h
    written = []
    for stage_index, state in enumerate(states):
        if state.spatial is None:
            continue
        saliency = state.spatial.saliency.data
        for frame in range(saliency.shape[0]):
            image = saliency[frame].reshape(grid_h, grid_w)
            image = np.repeat(np.repeat(image, scale, axis=0), scale, axis=1)
            image = np.clip(image * 255.0 + 0.5, 0, 255).astype(np.uint8)
            name = f"{pair.pair_id}_stage{stage_index + 1}_frame{frame:04d}.pgm"
            save_pgm(os.path.join(out_dir, name), image)
            written.append(name)
    return written


def _dump_boxes(fh, pair, output, states):
    """Best box per frame per stage as JSON lines."""
    for stage_index, state in enumerate(states):
        scores = sigmoid_scores(state.logits)
        best_scores, best_boxes = per_frame_best(scores, state.boxes.data)
        for frame in range(len(best_boxes)):
            record = {"pair_id": pair.pair_id, "stage": stage_index + 1,
                      "frame": frame,
                      "box": [float(v) for v in best_boxes[frame].astuple()],
                      "score": float(best_scores[frame])}
            fh.write(json.dumps(record) + "\n")


def cmd_infer(args):
    config_file = _load_config_file(args.config)
    model, model_config = _restore_model(args, config_file)
    _echo({"command": "infer", "seed": args.seed, "data": args.data,
           "checkpoint": args.checkpoint, "out": args.out,
           "kernel": args.kernel, "model": model_config.to_dict()})
    pairs = load_dataset(args.data)
    box_fh = open(args.dump_boxes, "w", encoding="utf-8") if args.dump_boxes \
        else None
    predictions = {}
    try:
        for pair in pairs:
            if args.dump_attention or box_fh:
                from . import autograd as ag
                from .inference import infer_track, model_frames
                with ag.no_grad():
                    output, states = model(ag.tensor(model_frames(pair.query)),
                                           ag.tensor(model_frames(pair.frames)),
                                           collect_states=True)
                predictions[pair.pair_id] = infer_track(
                    output.final_scores, output.final_boxes, kernel=args.kernel)
                if args.dump_attention:
                    _dump_attention(args.dump_attention, pair, states,
                                    model_config)
                if box_fh:
                    _dump_boxes(box_fh, pair, output, states)
            else:
                predictions[pair.pair_id] = predict_pair(model, pair,
                                                         kernel=args.kernel)
    finally:
        if box_fh:
            box_fh.close()
    save_predictions(args.out, predictions)
    made = sum(1 for t in predictions.values() if t is not None)
    _echo({"predictions": args.out, "pairs": len(pairs), "tracks": made})
    return 0


def cmd_eval(args):
    _load_config_file(args.config)
    _echo({"command": "eval", "predictions": args.predictions,
           "data": args.data, "out": args.out})
    predictions = load_predictions(args.predictions)
    pairs = load_dataset(args.data)
    report = evaluate(predictions, ground_truth_tracks(pairs))
    if args.out:
        report.save_json(args.out)
    _echo({"temporal_ap_25": report.temporal_ap,
           "tube_ap_25": report.tube_ap,
           "recovery_pct": report.recovery_pct,
           "success_pct": report.success_pct})
    return 0


def cmd_gradcheck(args):
    names = args.block or None
    _echo({"command": "gradcheck", "seed": args.seed,
           "blocks": names or gradcheck_suite.block_names()})
    rows = gradcheck_suite.run_suite(names, seed=args.seed)
    failures = 0
    for row in rows:
        status = "PASS" if row["passed"] else "FAIL"
        print(f"{status} {row['block']} max_rel_err={row['max_rel_err']:.3e} "
              f"tol={row['tolerance']:g} coords={row['checked']}")
        failures += 0 if row["passed"] else 1
    if failures:
        raise ValueError(f"{failures} block(s) failed gradient check")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="querytrack",
        description="Locate a queried object's most recent appearance in video.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    _add_common(p)
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--clip-len", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--canvas", type=int)
    p.add_argument("--occlusion-prob", type=float)
    p.add_argument("--blur-prob", type=float)
    p.add_argument("--distractor-similarity", type=float)
    p.set_defaults(run=cmd_gen_data)

    p = sub.add_parser("train", help="fit a model on a dataset")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--checkpoint-interval", type=int)
    for flag, kind in (("--stages", int), ("--frames-per-clip", int),
                       ("--frame-size", int), ("--patch-size", int),
                       ("--channels", int), ("--window-radius", int),
                       ("--score-threshold", float), ("--top-n", int),
                       ("--pool-size", int), ("--spatial-blend", float),
                       ("--video-blend", float), ("--backbone-depth", int),
                       ("--max-frames", int)):
        p.add_argument(flag, type=kind)
    p.add_argument("--query-mode",
                   choices=("cross_attention", "addition", "concatenation"))
    p.add_argument("--tie-weights", action="store_const", const=True)
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("infer", help="predict response tracks")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kernel", type=int, default=1,
                   help="median filter width over frame scores")
    p.add_argument("--dump-attention", metavar="DIR",
                   help="write per-stage saliency PGMs here")
    p.add_argument("--dump-boxes", metavar="FILE",
                   help="write per-stage best boxes as JSON lines")
    p.set_defaults(run=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    _add_common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check every block")
    _add_common(p)
    p.add_argument("--block", action="append",
                   help="check only this block (repeatable)")
    p.set_defaults(run=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if os.environ.get(FLOAT64_ENV):
        set_default_dtype(np.float64)
    if getattr(args, "pairs", None) is not None and args.pairs < 1:
        parser.error("--pairs must be a positive integer")
    try:
        return args.run(args)
    except (ValueError, RuntimeError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
