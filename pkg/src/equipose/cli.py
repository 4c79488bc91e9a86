"""Command-line entry points wiring the library together for scripts and CI.

Exit codes: 0 success, 1 property or acceptance failure, 2 bad input,
3 internal error. Every command writes one manifest alongside its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time

import numpy as np

from . import __version__
from .errors import ConfigInvalid, EquiposeError, NonFiniteLoss, RegistryMiss
from .geometry import (
    load_correspondences_json,
    fit_rigid_least_squares,
    pose_to_dict,
    sample_uniform_rotation,
)
EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_BAD_INPUT = 2
EXIT_INTERNAL = 3


class InputError(EquiposeError):
    """Missing or malformed input file/flag."""


class CheckFailed(EquiposeError):
    """A property or acceptance check did not hold."""


def _atomic_write_text(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _config_digest(args: argparse.Namespace) -> str:
    payload = json.dumps(
        {k: v for k, v in sorted(vars(args).items()) if k != "func"}, sort_keys=True, default=str
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def _write_manifest(location, command: str, args, seed, artifacts, started: float) -> str:
    if os.path.isdir(location):
        path = os.path.join(location, "manifest.json")
    else:
        path = str(location) + ".manifest.json"
    manifest = {
        "command": command,
        "config_digest": _config_digest(args),
        "seed": seed,
        "artifacts": [str(a) for a in artifacts],
        "version": __version__,
        "duration_s": time.monotonic() - started,
    }
    _atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _require_file(path, what: str):
    if not os.path.exists(path):
        raise InputError(f"{what} not found: {path}")
    return path


def _scene_stems(directory):
    _require_file(directory, "scene directory")
    stems = sorted(
        os.path.join(directory, name[:-4])
        for name in os.listdir(directory)
        if name.startswith("scene_") and name.endswith(".ply")
    )
    if not stems:
        raise InputError(f"no scene_*.ply files in {directory}")
    return stems


def _load_scenes(directory):
    from .synth import load_scene

    return [load_scene(stem) for stem in _scene_stems(directory)]


# commands -------------------------------------------------------------------


def cmd_check_equivariance(args) -> int:
    from .checks import full_report

    started = time.monotonic()
    report = full_report(trials=args.trials, seed=args.seed)
    failing = sorted(
        name
        for name, value in report.items()
        if (name == "seg_argmax_flips" and value > 0)
        or (name != "seg_argmax_flips" and value > args.tolerance)
    )
    payload = {
        "trials": args.trials,
        "tolerance": args.tolerance,
        "seed": args.seed,
        "residuals": report,
        "pass": not failing,
        "failing": failing,
    }
    _atomic_write_text(args.out, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _write_manifest(args.out, "check-equivariance", args, args.seed, [args.out], started)
    for name in sorted(report):
        print(f"{name}: {report[name]:.3e}")
    if failing:
        print(f"FAIL: residual above tolerance for {', '.join(failing)}")
        return EXIT_CHECK_FAILED
    print("PASS")
    return EXIT_OK


def cmd_synth_gen(args) -> int:
    from .synth import SceneConfig, make_default_models, render_scene, save_registry, save_scene, Registry

    started = time.monotonic()
    os.makedirs(args.out_dir, exist_ok=True)
    models = make_default_models(
        seed=args.seed, n_vertices=args.n_vertices, n_keypoints=args.keypoints
    )
    registry_dir = os.path.join(args.out_dir, "registry")
    save_registry(Registry(models), registry_dir)
    config = SceneConfig(
        noise_sigma=args.noise_sigma,
        occlusion=(0.0, args.occlusion) if args.occlusion > 0 else 0.0,
        n_background=args.background,
    )
    scenes_dir = os.path.join(args.out_dir, "scenes")
    os.makedirs(scenes_dir, exist_ok=True)
    artifacts = [registry_dir, scenes_dir]
    for i in range(args.n_scenes):
        stem = os.path.join(scenes_dir, f"scene_{i:05d}")
        save_scene(stem, render_scene(models, config, seed=args.seed + 1000 + i))
    dataset = {
        "n_classes": max(m.id for m in models) + 1,
        "n_keypoints": args.keypoints,
        "class_ids": [m.id for m in models],
        "n_scenes": args.n_scenes,
        "seed": args.seed,
    }
    dataset_path = os.path.join(args.out_dir, "dataset.json")
    _atomic_write_text(dataset_path, json.dumps(dataset, indent=2, sort_keys=True) + "\n")
    artifacts.append(dataset_path)
    _write_manifest(args.out_dir, "synth-gen", args, args.seed, artifacts, started)
    print(f"wrote {args.n_scenes} scenes and {len(models)} models to {args.out_dir}")
    return EXIT_OK


def _dataset_meta(scenes_dir):
    meta_path = os.path.join(os.path.dirname(os.path.abspath(scenes_dir)), "dataset.json")
    if os.path.exists(meta_path):
        with open(meta_path) as f:
            return json.load(f)
    return None


def cmd_train(args) -> int:
    from .model import ModelConfig, init_model, save_model
    from .train import TrainConfig, train

    started = time.monotonic()
    scenes = _load_scenes(args.scenes_dir)
    meta = _dataset_meta(args.scenes_dir)
    n_classes = meta["n_classes"] if meta else int(max(s.labels.max() for s in scenes)) + 1
    n_keypoints = scenes[0].n_keypoints
    if args.config:
        cfg = TrainConfig.from_json(_require_file(args.config, "train config"))
    else:
        cfg = TrainConfig(
            learning_rate=args.learning_rate, epochs=args.epochs, seed=args.seed
        )
    model_cfg = ModelConfig(n_classes=n_classes, n_keypoints=n_keypoints)
    model = init_model(model_cfg, seed=cfg.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    csv_path = os.path.join(args.out_dir, "loss.csv")
    history = train(scenes, model, cfg, csv_path=csv_path)
    params_path = os.path.join(args.out_dir, "params.bin")
    save_model(model, params_path)
    _write_manifest(
        args.out_dir, "train", args, cfg.seed, [params_path, csv_path], started
    )
    print(
        f"trained {len(history.reports)} steps; final total {history.reports[-1].total:.6f}; "
        f"descent={'ok' if history.descent_ok else 'FAILED'}"
    )
    return EXIT_OK if history.descent_ok else EXIT_CHECK_FAILED


def cmd_eval(args) -> int:
    from .metrics import distances_to_json, evaluate_dataset, report_to_csv
    from .model import load_model
    from .pipeline import PipelineConfig, detections_to_json, run_pipeline
    from .synth import load_registry

    started = time.monotonic()
    scenes = _load_scenes(args.scenes_dir)
    registry = load_registry(_require_file(args.registry_dir, "registry directory"))
    model = None
    if not args.oracle_heads:
        _require_file(args.params, "parameter container")
        _require_file(str(args.params) + ".json", "parameter manifest")
        model = load_model(args.params)
    os.makedirs(args.out_dir, exist_ok=True)
    det_dir = os.path.join(args.out_dir, "detections")
    os.makedirs(det_dir, exist_ok=True)
    cfg = PipelineConfig()
    detections_by_scene = []
    for i, scene in enumerate(scenes):
        oracle = (scene.labels, scene.gt_offsets) if args.oracle_heads else None
        detections = run_pipeline(scene.cloud, model, registry, cfg, oracle=oracle)
        detections_by_scene.append(detections)
        detections_to_json(os.path.join(det_dir, f"scene_{i:05d}.json"), detections, i)
    report = evaluate_dataset(detections_by_scene, [s.gt_poses for s in scenes], registry)
    report_path = os.path.join(args.out_dir, "report.csv")
    report_to_csv(report, report_path)
    distances_path = os.path.join(args.out_dir, "distances.json")
    distances_to_json(report, distances_path)
    _write_manifest(
        args.out_dir, "eval", args, args.seed, [det_dir, report_path, distances_path], started
    )
    for row in report.rows():
        print(
            f"object {row['object']}: ADDS AUC {row['adds_auc']:.2f}, "
            f"ADD(-S) AUC {row['add_s_auc']:.2f}, hit@0.1d {row['hit_rate_01d']:.1f} "
            f"({row['n_samples']} samples)"
        )
    return EXIT_OK


def cmd_fit_pose(args) -> int:
    started = time.monotonic()
    corr = load_correspondences_json(_require_file(args.input, "correspondences file"))
    pose = fit_rigid_least_squares(corr)
    _atomic_write_text(args.out, json.dumps(pose_to_dict(pose), indent=2) + "\n")
    _write_manifest(args.out, "fit-pose", args, None, [args.out], started)
    print(f"pose written to {args.out}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    from .metrics import distances_to_json, evaluate_dataset, report_to_csv
    from .pipeline import detections_from_json
    from .synth import load_registry

    started = time.monotonic()
    scenes = _load_scenes(args.scenes_dir)
    registry = load_registry(_require_file(args.registry_dir, "registry directory"))
    _require_file(args.detections_dir, "detections directory")
    detections_by_scene = []
    for i in range(len(scenes)):
        path = os.path.join(args.detections_dir, f"scene_{i:05d}.json")
        detections_by_scene.append(detections_from_json(path) if os.path.exists(path) else [])
    report = evaluate_dataset(detections_by_scene, [s.gt_poses for s in scenes], registry)
    report_to_csv(report, args.out)
    distances_to_json(report, args.out + ".distances.json")
    _write_manifest(args.out, "metrics", args, None, [args.out], started)
    for row in report.rows():
        print(
            f"object {row['object']}: ADDS AUC {row['adds_auc']:.2f}, "
            f"ADD(-S) AUC {row['add_s_auc']:.2f}, hit@0.1d {row['hit_rate_01d']:.1f}"
        )
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .model import ModelConfig, init_model
    from .synth import SceneConfig, make_default_models, render_scene
    from .train import TrainConfig, gradcheck, scene_tensors

    started = time.monotonic()
    models = make_default_models(seed=args.seed, n_vertices=60, n_keypoints=4)
    scene = render_scene(
        models,
        SceneConfig(noise_sigma=0.002, n_background=4, max_object_points=10),
        seed=args.seed + 8,
    )
    cfg = ModelConfig(
        n_classes=4,
        n_keypoints=4,
        lift_neighbors=4,
        vn_widths=(3, 4),
        batch_norm=True,
        invariant_branch=3,
        invariant_hidden=6,
        invariant_out=6,
        app_hidden=5,
        app_out=5,
        head_hidden=8,
    )
    model = init_model(cfg, seed=args.seed + 3)
    tensors = scene_tensors(scene, model)
    rotation = sample_uniform_rotation(np.random.default_rng(args.seed + 1))
    err = gradcheck(model, tensors, TrainConfig(seed=args.seed), rotation, step=args.step)
    print(f"max relative gradient error: {err:.3e}")
    if args.out:
        _atomic_write_text(
            args.out,
            json.dumps({"max_relative_error": err, "step": args.step}, indent=2) + "\n",
        )
        _write_manifest(args.out, "gradcheck", args, args.seed, [args.out], started)
    return EXIT_OK if err <= args.tolerance else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="equipose",
        description="Rotation-equivariant features and keypoint-voting 6D pose estimation.",
    )
    parser.add_argument("--version", action="version", version=f"equipose {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    def sub(name, help_text):
        return commands.add_parser(
            name, help=help_text, formatter_class=argparse.ArgumentDefaultsHelpFormatter
        )

    p = sub("check-equivariance", "run the layer property suites")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--tolerance", type=float, default=1e-10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="equivariance_report.json")
    p.set_defaults(func=cmd_check_equivariance)

    p = sub("synth-gen", "generate object models and labeled scenes")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-scenes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--occlusion", type=float, default=0.0, help="max occluded fraction")
    p.add_argument("--background", type=int, default=0)
    p.add_argument("--n-vertices", type=int, default=600)
    p.add_argument("--keypoints", type=int, default=8)
    p.set_defaults(func=cmd_synth_gen)

    p = sub("train", "train on a scene directory")
    p.add_argument("--scenes-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None, help="TrainConfig JSON file")
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub("eval", "run the pipeline over scenes and score it")
    p.add_argument("--scenes-dir", required=True)
    p.add_argument("--registry-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--params", default=None, help="parameter container from train")
    p.add_argument("--oracle-heads", action="store_true", help="use GT labels/offsets")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub("fit-pose", "rigid least-squares fit of a correspondences file")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_pose)

    p = sub("metrics", "score stored detections against scene ground truth")
    p.add_argument("--detections-dir", required=True)
    p.add_argument("--scenes-dir", required=True)
    p.add_argument("--registry-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub("gradcheck", "finite-difference check of all gradients")
    # default draw keeps every |.|-loss entry away from its kink at the
    # default step; unlucky seeds can cross one and need a smaller --step
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, ConfigInvalid, RegistryMiss, FileNotFoundError, json.JSONDecodeError) as err:
        print(f"error: bad input: {err}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (CheckFailed, NonFiniteLoss) as err:
        print(f"error: check failed: {err}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    except EquiposeError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as err:  # pragma: no cover - defensive
        print(f"error: internal: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
