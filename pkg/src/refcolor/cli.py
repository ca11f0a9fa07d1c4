"""Command-line entry point: ``refcolor <command> ...``.

Exit codes: 0 success, 2 usage or precondition failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import platform
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from . import __version__

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    """Bad arguments, missing inputs or unmet preconditions (exit 2)."""


def _limit_threads() -> None:
    value = os.environ.get("REFCOLOR_THREADS")
    if not value:
        return
    try:
        n = int(value)
    except ValueError as exc:
        raise UsageError(f"REFCOLOR_THREADS must be an integer, got {value!r}") from exc
    if n < 1:
        raise UsageError("REFCOLOR_THREADS must be at least 1")
    from threadpoolctl import threadpool_limits

    threadpool_limits(n)


def _writable_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to {path}: {exc.strerror or exc}") from exc
    return path


def _run_record(out: Path, command: str, args: argparse.Namespace, extra: Optional[dict] = None) -> None:
    """Make a run directory self-describing: resolved options, seed and versions."""
    import matplotlib
    import PIL

    def plain(v):
        if isinstance(v, Path):
            return str(v)
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v

    opts = {k: plain(v) for k, v in vars(args).items() if k != "func"}
    doc = {
        "command": command,
        "options": opts,
        "versions": {"refcolor": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "matplotlib": matplotlib.__version__, "pillow": PIL.__version__},
    }
    doc.update(extra or {})
    (out / "run.yaml").write_text(yaml.safe_dump(doc, sort_keys=True))


def _parse_value(text: str):
    value = yaml.safe_load(text)
    if isinstance(value, str):
        # YAML 1.1 reads exponent-only floats such as 1e-3 as strings
        try:
            return float(value)
        except ValueError:
            pass
    return value


def _load_config(path: Optional[Path], overrides: List[str]):
    from .trainer import TrainConfig

    doc = {}
    if path is not None:
        if not path.exists():
            raise UsageError(f"config file {path} not found")
        doc = yaml.safe_load(path.read_text()) or {}
        if not isinstance(doc, dict):
            raise UsageError(f"{path}: config must be a mapping")
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        target = doc
        parts = key.split(".")
        for p in parts[:-1]:
            target = target.setdefault(p, {})
        target[parts[-1]] = _parse_value(value)
    try:
        return TrainConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _load_sequences(manifest: str, split: Optional[str] = None):
    from .dataprep.io import load_split, read_manifest

    if not manifest:
        raise UsageError("no dataset manifest given")
    path = Path(manifest)
    if not path.exists():
        raise UsageError(f"dataset {path} not found")
    try:
        doc = read_manifest(path)
    except (ValueError, OSError, yaml.YAMLError) as exc:
        raise UsageError(str(exc)) from exc
    splits = {e["split"] for e in doc["sequences"]}
    if split is None and "train" in splits:
        split = "train"
    seqs = load_split(path, split)
    if not seqs:
        raise UsageError(f"dataset {path} has no sequences in split {split!r}")
    return seqs


def _load_ckpt(path: Path):
    from .checkpoint import CheckpointError, load_checkpoint

    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc


# -- commands --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .dataprep.io import write_manifest, write_sequence
    from .dataprep.synth import synth_dataset

    out = _writable_dir(args.out)
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    try:
        seqs = synth_dataset(args.seed, args.count, args.frames, args.size, args.style)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    entries = []
    for i, seq in enumerate(seqs):
        rel = f"seq_{i:03d}"
        write_sequence(seq, out / rel)
        entries.append((rel, args.split))
    write_manifest(out, entries, {"generator": "synth", "seed": args.seed, "style": args.style,
                                  "size": args.size, "frames": args.frames})
    print(f"wrote {len(seqs)} sequences to {out}")
    return EXIT_OK


def cmd_shots(args) -> int:
    from .dataprep.io import list_frame_images, read_png, write_manifest, write_sequence
    from .dataprep.shots import ShotConfig, split_shots

    src = args.video_frames_dir
    if not src.is_dir():
        raise UsageError(f"{src} is not a directory")
    files = list_frame_images(src)
    if not files:
        raise UsageError(f"{src} contains no PNG frames")
    out = _writable_dir(args.out)
    cfg = ShotConfig(cut_threshold=args.cut, uniform_threshold=args.uniform, min_length=args.min_length)
    colors = [read_png(f, 3) for f in files]
    shots = split_shots(colors, cfg, source_id=src.name)
    entries = []
    for i, shot in enumerate(shots):
        rel = f"seq_{i:03d}"
        write_sequence(shot, out / rel)
        entries.append((rel, args.split))
    write_manifest(out, entries, {"generator": "shots", "source": str(src),
                                  "shots": [s.source_id for s in shots]})
    print(f"{len(files)} frames -> {len(shots)} shots")
    return EXIT_OK


def cmd_distfield(args) -> int:
    from .dataprep.distance import distance_field
    from .dataprep.io import dist_to_u8, list_frame_images, read_png, write_png

    src = args.input
    if src.is_dir():
        files = list_frame_images(src)
        if not files:
            raise UsageError(f"{src} contains no PNG images")
        out = _writable_dir(args.out)
        targets = [(f, out / f.name) for f in files]
    elif src.is_file():
        if args.out.suffix.lower() == ".png":
            _writable_dir(args.out.parent)
            targets = [(src, args.out)]
        else:
            targets = [(src, _writable_dir(args.out) / src.name)]
    else:
        raise UsageError(f"{src} does not exist")
    for f, dst in targets:
        write_png(dst, dist_to_u8(distance_field(read_png(f, 1)[..., 0])))
    print(f"wrote {len(targets)} distance fields")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import train_color_stage, train_temporal_stage

    cfg = _load_config(args.config, args.set)
    out = _writable_dir(args.out)
    resume = _load_ckpt(args.resume) if args.resume else None
    base = None
    if args.stage == "temporal":
        if args.ckpt is None:
            raise UsageError("--stage temporal needs --ckpt from a completed colour stage")
        base = _load_ckpt(args.ckpt)
        if not base.meta.get("color_done") or not base.has_prefix("color.G."):
            raise UsageError(f"{args.ckpt} does not hold a completed colour stage")
    seqs = _load_sequences(cfg.train_data)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    _run_record(out, "train", args, {"seed": cfg.seed})
    try:
        if args.stage in ("color", "both"):
            color_resume = resume if resume is not None and not resume.meta.get("color_done") else None
            if resume is not None and color_resume is None:
                base = resume
            else:
                base = train_color_stage(cfg, seqs, out, resume=color_resume, stop_at=args.stop_at)
                if not base.meta.get("color_done"):
                    print(f"stopped after {base.meta['color_step']} colour steps")
                    return EXIT_OK
        if args.stage in ("temporal", "both"):
            temporal_resume = resume if resume is not None and resume.has_prefix("opt.temporal.") else None
            train_temporal_stage(cfg, base, seqs, out, resume=temporal_resume, stop_at=args.stop_at)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(f"training finished; checkpoints in {out}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .trainer import TrainConfig, fine_tune

    ckpt = _load_ckpt(args.ckpt)
    if not ckpt.meta.get("color_done"):
        raise UsageError(f"{args.ckpt} is not a completed checkpoint")
    cfg = TrainConfig.from_dict(ckpt.config)
    if args.config is not None or args.set:
        over = _load_config(args.config, args.set).to_dict()
        defaults = TrainConfig().to_dict()
        merged = cfg.to_dict()
        merged.update({k: v for k, v in over.items() if v != defaults[k]})
        cfg = TrainConfig.from_dict(merged)
    seqs = _load_sequences(str(args.seqs), args.split)
    if args.count is not None:
        seqs = seqs[:args.count]
    out = _writable_dir(args.out)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    _run_record(out, "finetune", args, {"seed": cfg.seed})
    try:
        fine_tune(ckpt, seqs, cfg, out)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(f"fine-tuned on {len(seqs)} sequences; checkpoints in {out}")
    return EXIT_OK


def _models(ckpt_path: Path, temporal: bool):
    from .checkpoint import CheckpointError
    from .trainer import models_from_checkpoint

    ckpt = _load_ckpt(ckpt_path)
    try:
        models = models_from_checkpoint(ckpt)
    except (CheckpointError, ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    TG = models.TG if temporal and ckpt.has_prefix("temporal.G.") else None
    return models.G, TG


def cmd_colorize(args) -> int:
    from .dataprep.frames import Frame
    from .dataprep.io import list_frame_images, read_png, write_png
    from .evaluation import colorize_frames, reference_indices

    if not args.lines_dir.is_dir():
        raise UsageError(f"{args.lines_dir} is not a directory")
    files = list_frame_images(args.lines_dir)
    if not files:
        raise UsageError(f"{args.lines_dir} contains no line-art PNGs")
    K = args.K if args.K is not None else len(args.refs)
    if len(args.refs) < K:
        raise UsageError(f"K={K} needs {K} reference images, got {len(args.refs)}")
    missing = [r for r in args.refs if not r.is_file()]
    if missing:
        raise UsageError(f"reference image not found: {missing[0]}")
    try:
        ref_idx = reference_indices(len(files), K)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    frames = [Frame.from_line(read_png(f, 1)) for f in files]
    for i, ref in zip(ref_idx, args.refs):
        color = read_png(ref, 3)
        if color.shape[:2] != frames[i].size:
            raise UsageError(f"reference {ref} is {color.shape[:2]}, line art is {frames[i].size}")
        frames[i].color = color
    G, TG = _models(args.ckpt, not args.no_temporal)
    out = _writable_dir(args.out)
    colored = colorize_frames(G, TG, frames, ref_idx)
    for f, c in zip(files, colored):
        write_png(out / f"color_{f.stem}.png", c)
    from .plotting import plot_frame_strip

    plot_frame_strip(colored, out / "strip.png", [f.stem for f in files])
    _run_record(out, "colorize", args, {"references": ref_idx})
    print(f"coloured {len(colored)} frames into {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import EvalReport, evaluate_sequence, mse, psnr, reference_indices, ssim, write_reports

    seqs = _load_sequences(str(args.dataset), args.split)
    out = _writable_dir(args.out)
    reports = []
    if args.ground_truth:
        for seq in seqs:
            try:
                ref_idx = reference_indices(len(seq), args.K)
            except ValueError as exc:
                raise UsageError(str(exc)) from exc
            rep = EvalReport(seq.source_id, args.K)
            for i, fr in enumerate(seq.frames):
                if i not in ref_idx:
                    rep.frames.append({"frame": i, "mse": mse(fr.color, fr.color), "psnr": psnr(fr.color, fr.color),
                                       "ssim": ssim(fr.color, fr.color)})
            reports.append(rep)
    else:
        if args.ckpt is None:
            raise UsageError("--ckpt is required unless --ground-truth is given")
        G, TG = _models(args.ckpt, not args.no_temporal)
        for seq in seqs:
            try:
                reports.append(evaluate_sequence(G, TG, seq, args.K))
            except ValueError as exc:
                raise UsageError(str(exc)) from exc
    paths = write_reports(reports, out)
    _run_record(out, "eval", args)
    mean = float(np.mean([r.mean_psnr for r in reports]))
    print(f"{len(reports)} sequences, K={args.K}: mean PSNR {mean:.3f} dB -> {paths['frames']}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = {}
    if args.scope in ("op", "all"):
        from .engine.gradcheck import run_op_suite

        results.update(run_op_suite())
    if args.scope in ("net", "all"):
        from .netcheck import run_net_suite

        results.update({k: v["max_rel_error"] for k, v in run_net_suite().items()})
    failed = []
    for name, err in results.items():
        ok = err < args.tol
        print(f"{name:24s} {err:.3e} {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"{len(failed)} check(s) above {args.tol:g}: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="refcolor", description="Reference-based line-art video colourisation.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic animation dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--frames", type=int, default=12)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--style", type=int, default=0, choices=(0, 1))
    s.add_argument("--split", default="train")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("shots", help="cut a frame directory into training shots")
    s.add_argument("--video-frames-dir", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--cut", type=float, default=200.0)
    s.add_argument("--uniform", type=float, default=10.0)
    s.add_argument("--min-length", type=int, default=8)
    s.add_argument("--split", default="train")
    s.set_defaults(func=cmd_shots)

    s = sub.add_parser("distfield", help="distance fields for line-art PNGs")
    s.add_argument("--in", dest="input", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_distfield)

    s = sub.add_parser("train", help="train the colour and/or temporal stage")
    s.add_argument("--config", type=Path)
    s.add_argument("--stage", choices=("color", "temporal", "both"), default="both")
    s.add_argument("--ckpt", type=Path, help="colour-stage checkpoint for --stage temporal")
    s.add_argument("--resume", type=Path, help="continue an interrupted run")
    s.add_argument("--stop-at", type=int, help="stop after this many steps of the current stage")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("finetune", help="fine-tune a trained checkpoint on new sequences")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--seqs", type=Path, required=True, help="dataset manifest")
    s.add_argument("--split")
    s.add_argument("--count", type=int, help="use only the first COUNT sequences")
    s.add_argument("--config", type=Path)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("colorize", help="colour a directory of line art from reference images")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--lines-dir", type=Path, required=True)
    s.add_argument("--refs", type=Path, nargs="+", required=True)
    s.add_argument("--K", type=int)
    s.add_argument("--no-temporal", action="store_true")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_colorize)

    s = sub.add_parser("eval", help="K-reference evaluation report")
    s.add_argument("--ckpt", type=Path)
    s.add_argument("--dataset", type=Path, required=True)
    s.add_argument("--split")
    s.add_argument("--K", type=int, default=2)
    s.add_argument("--no-temporal", action="store_true")
    s.add_argument("--ground-truth", action="store_true", help="score ground truth against itself")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--scope", choices=("op", "net", "all"), default="op")
    s.add_argument("--tol", type=float, default=GRADCHECK_TOL)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    from .trainer import NonFiniteLoss

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _limit_threads()
        return args.func(args)
    except UsageError as exc:
        print(f"refcolor {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLoss as exc:
        print(f"refcolor {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
