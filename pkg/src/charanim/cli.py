"""Command-line entry point: validate, train, eval, generate, animate, serve.

Exit codes: 0 success, 1 operation failure (with a diagnostic on stderr),
2 usage error (argparse). Training hyperparameters live in a JSON config
file; a few common flags override config values for quick experiments.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .dataset import DatasetError, Pose, load_dataset, pose_to_json_dict, save_image


def _load_pose_file(path: Path) -> tuple[Pose, str | None]:
    raw = json.loads(path.read_text())
    pose = Pose(
        positions={int(k): (float(v[0]), float(v[1])) for k, v in raw["positions"].items()},
        active_states={int(k): int(v) for k, v in raw.get("active_states", {}).items()},
    )
    return pose, raw.get("schema_hash")


def cmd_validate(args) -> int:
    dataset = load_dataset(args.data)
    masks = "with masks" if dataset.has_masks else "without masks"
    print(
        f"ok: {len(dataset.samples)} samples, {len(dataset.schema.keypoints)} keypoints, "
        f"{dataset.schema.layer_count} layers, {masks}"
    )
    return 0


def cmd_train(args) -> int:
    from .train import TrainConfig, load_train_config, train

    dataset = load_dataset(args.data)
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    if args.iterations is not None:
        cfg = replace(cfg, iterations=args.iterations)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.device is not None:
        cfg = replace(cfg, device=args.device)
    name = args.name or Path(args.data).resolve().name
    result = train(dataset, cfg, out_dir=args.out, name=name, progress=True)
    print(f"trained {cfg.iterations} iterations; checkpoint at {Path(args.out) / 'checkpoint.pt'}")
    last = result.reports[-1]
    print(f"final losses: adv_d={last.adv_d:.4f} adv_g={last.adv_g:.4f} fm={last.fm:.4f}")
    return 0


def cmd_eval(args) -> int:
    from .evaluate import cross_validate, format_report, write_report
    from .train import TrainConfig, load_train_config

    dataset = load_dataset(args.data)
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    if not args.cross_validate:
        print("nothing to do: pass --cross-validate", file=sys.stderr)
        return 1
    report = cross_validate(
        dataset,
        cfg,
        runs=args.runs,
        backend_kind=args.metric_backend,
        character=Path(args.data).resolve().name,
        progress=True,
    )
    print(format_report(report))
    if args.out:
        write_report(report, args.out)
        print(f"report written to {args.out}")
    return 0


def cmd_generate(args) -> int:
    from .connectivity import refine_pose
    from .dataset import validate_pose
    from .inference import InferenceSession
    from .render import dump_stack, render_stack

    session = InferenceSession.from_file(args.checkpoint, device=args.device)
    pose, pose_hash = _load_pose_file(Path(args.pose))
    if pose_hash is not None and pose_hash != session.checkpoint.schema_hash:
        print(
            f"error: pose file schema hash {pose_hash[:12]}... does not match "
            f"checkpoint schema hash {session.checkpoint.schema_hash[:12]}...",
            file=sys.stderr,
        )
        return 1
    validate_pose(pose, session.schema, context=args.pose)

    if args.dump_stack:
        stack = render_stack(pose, session.schema, session.checkpoint.working_resolution)
        files = dump_stack(stack, args.dump_stack)
        print(f"wrote {len(files)} condition maps to {args.dump_stack}")

    if args.mask_fix:
        if not session.predicts_mask:
            print("error: --mask-fix needs a checkpoint with a mask head", file=sys.stderr)
            return 1
        if args.moved_kp is None or args.move_vec is None:
            print("error: --mask-fix needs --moved-kp and --move-vec", file=sys.stderr)
            return 1
        dx, dy = (float(v) for v in args.move_vec.split(","))
        result = refine_pose(
            session.predict_mask,
            pose,
            args.moved_kp,
            (dx, dy),
            delta=args.delta,
            max_iters=args.max_fix_iters,
        )
        pose = result.pose
        status = "converged" if result.converged else "did not converge"
        print(f"mask fix: {len(result.moves)} keypoints moved, {status}")

    image = session.generate(pose)
    save_image(image, Path(args.out))
    print(f"wrote {args.out}")
    if args.pose_out:
        Path(args.pose_out).write_text(json.dumps(pose_to_json_dict(pose), indent=2))
    return 0


def cmd_animate(args) -> int:
    from .animation import export_frames, render_timeline, timeline_from_json
    from .inference import InferenceSession

    session = InferenceSession.from_file(args.checkpoint, device=args.device)
    timeline_path = Path(args.timeline)
    timeline = timeline_from_json(json.loads(timeline_path.read_text()), timeline_path.parent)
    if args.fps is not None:
        timeline.fps = args.fps
    frames = render_timeline(timeline, session, delta=args.delta, max_fix_iters=args.max_fix_iters)
    flagged = sum(f.flagged for f in frames)
    fmt = "gif" if args.format == "gif" else "png_sequence"
    written = export_frames(frames, fmt, args.out, fps=timeline.fps, loop=timeline.loop)
    note = f" ({flagged} frames flagged by mask fix)" if flagged else ""
    print(f"wrote {len(frames)} frames to {args.out}{note}")
    return 0 if written else 1


def cmd_serve(args) -> int:
    from .service import serve

    serve(args.checkpoints, port=args.port, host=args.host, device=args.device)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="charanim",
        description="Few-shot keypoint-driven character reposing and animation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="train a character model")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--iterations", type=int, help="override config iterations")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--device", help="override config device")
    p.add_argument("--name", help="character name stored in the checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run N-fold leave-one-out cross-validation")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--cross-validate", action="store_true")
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--metric-backend", default="auto", choices=["auto", "lpips", "random"])
    p.add_argument("--out", help="write the machine-readable report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="generate one frame from a pose file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pose", required=True, help="pose JSON file")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--pose-out", help="write the (possibly repaired) pose here")
    p.add_argument("--mask-fix", action="store_true")
    p.add_argument("--no-mask-fix", dest="mask_fix", action="store_false")
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--max-fix-iters", type=int, default=5)
    p.add_argument("--moved-kp", type=int, help="keypoint id the user moved (for --mask-fix)")
    p.add_argument("--move-vec", help="dx,dy of the user's move (for --mask-fix)")
    p.add_argument("--dump-stack", help="dump the conditioning stack as PNGs to this directory")
    p.add_argument("--device", default="cpu")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("animate", help="render a keyframe timeline")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--timeline", required=True, help="timeline JSON file")
    p.add_argument("--fps", type=float, help="override timeline fps")
    p.add_argument("--format", default="gif", choices=["gif", "png"])
    p.add_argument("--out", required=True, help="gif path or png sequence directory")
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--max-fix-iters", type=int, default=5)
    p.add_argument("--device", default="cpu")
    p.set_defaults(func=cmd_animate)

    p = sub.add_parser("serve", help="start the HTTP inference service")
    p.add_argument("--checkpoints", required=True, help="directory of .pt checkpoints")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--device", default="cpu")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DatasetError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
