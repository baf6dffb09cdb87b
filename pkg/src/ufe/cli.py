"""Command line: gen-data, train, eval, flow-viz, predict.

Exit codes: 0 success, 2 usage, 3 validation, 4 runtime abort.
"""

from __future__ import annotations

import os

if os.environ.get("UFE_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = os.environ["UFE_THREADS"]

import argparse
import json
import logging
import shutil
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 2, 3, 4

log = logging.getLogger("ufe")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


@contextmanager
def dir_lock(path: Path):
    path.mkdir(parents=True, exist_ok=True)
    lock = path / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"{path} is locked by another command (remove {lock} if stale)") from None
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def read_png(path) -> np.ndarray:
    try:
        img = Image.open(path).convert("RGB")
    except (FileNotFoundError, OSError) as e:
        raise CliError(f"cannot read image {path}: {e}") from None
    return (np.asarray(img, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def write_png(path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


# ------------------------------------------------------------ commands
def cmd_gen_data(args) -> int:
    from .config import load_config
    from .data import generate_dataset, write_dataset

    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out)
    if out.exists() and any(p.name != ".lock" for p in out.iterdir()):
        if not args.force:
            raise CliError(f"output directory {out} is not empty (use --force to overwrite)")
    with dir_lock(out):
        if args.force:
            for p in out.iterdir():
                if p.name != ".lock":
                    shutil.rmtree(p) if p.is_dir() else p.unlink()
        ds = generate_dataset(cfg.dataset, seed=seed)
        manifest = write_dataset(ds, out)
        (out / "config.json").write_text(replace(cfg, seed=seed).to_json())
        prev = out / "previews"
        prev.mkdir(exist_ok=True)
        for clip in (ds.split("val") or ds.split("train"))[:3]:
            tiles = []
            for t in range(clip.num_frames):
                top = _to_uint8(clip.frames[t].transpose(1, 2, 0))
                if t in clip.labeled_indices:
                    bottom = np.repeat(clip.mask(t)[:, :, None] * 255, 3, axis=2).astype(np.uint8)
                else:
                    bottom = np.zeros_like(top)
                tiles.append(np.concatenate([top, bottom], axis=0))
            write_png(prev / f"{clip.clip_id}.png", np.concatenate(tiles, axis=1))
    counts = manifest["counts"]
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    print(f"manifest checksum {manifest['checksum']}")
    return 0


def cmd_train(args) -> int:
    from .config import load_config
    from .data import read_dataset
    from .train import TrainingAborted, train

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    overrides = {"mode": args.mode} if args.mode else {}
    tcfg = cfg.train_config(**overrides)
    ds = read_dataset(args.data)
    if ds.config.audio_dim != tcfg.model.audio_dim:
        raise CliError(f"dataset audio_dim {ds.config.audio_dim} != config {tcfg.model.audio_dim}")
    out = Path(args.out)
    with dir_lock(out):
        resolved = replace(cfg, output_dir=str(out), train=replace(cfg.train, mode=tcfg.mode))
        (out / "run_config.json").write_text(resolved.to_json())
        try:
            state, records, report = train(tcfg, ds, out_dir=out)
        except TrainingAborted as e:
            raise CliError(str(e), EXIT_RUNTIME) from None
    print(report.to_json())
    return 0


def _load_model(path):
    from .model import load_params
    from .flow import FarnebackParams

    params, mcfg, meta = load_params(path)
    tc = meta.get("train_config", {})
    use_flow = tc.get("mode", "full") in ("full", "nf-only")
    flow_params = FarnebackParams(**tc["flow"]) if "flow" in tc else FarnebackParams()
    return params, mcfg, use_flow, flow_params


def cmd_eval(args) -> int:
    from .data import read_dataset
    from .metrics import evaluate
    from .model import predict
    from .train import FlowCache

    params, mcfg, use_flow, flow_params = _load_model(args.checkpoint)
    ds = read_dataset(args.data)
    if args.split not in ds.clips:
        raise CliError(f"unknown split {args.split!r}; valid splits: {', '.join(sorted(ds.clips))}")
    clips = ds.split(args.split)
    if not clips or any(len(c.labeled_indices) != c.num_frames for c in clips):
        raise CliError(f"split {args.split!r} does not have ground truth for every frame")
    flows = FlowCache(ds, flow_params, enabled=use_flow)

    def fn(images, _fl, audio, ids):
        fl = np.stack([flows.get(args.split, ci, t) for ci, t in ids])
        return predict(params, images, fl, audio)

    report = evaluate(fn, clips, threshold=args.threshold)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(
        f"{Path(args.checkpoint).stem}_eval_{args.split}.json")
    report.write_json(out)
    if args.csv:
        report.write_csv(args.csv)
    print(report.to_json())
    return 0


def cmd_flow_viz(args) -> int:
    from .flow import FarnebackParams, farneback_flow, flow_stats, flow_to_rgb

    a, b = read_png(args.frame_a), read_png(args.frame_b)
    if a.shape != b.shape:
        raise CliError(f"frame sizes differ: {a.shape[1:]} vs {b.shape[1:]}")
    try:
        fl = farneback_flow(a, b, FarnebackParams())
    except ValueError as e:
        raise CliError(str(e)) from None
    out = Path(args.out)
    write_png(out, flow_to_rgb(fl))
    stats = flow_stats(fl)
    out.with_suffix(".json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    print(json.dumps(stats, sort_keys=True))
    return 0


def _read_audio(path, dim: int) -> np.ndarray:
    from .data import SHAPE_CLASSES, encode_audio_class

    try:
        obj = json.loads(Path(path).read_text())
    except (FileNotFoundError, ValueError) as e:
        raise CliError(f"cannot read audio JSON {path}: {e}") from None
    if isinstance(obj, dict) and "class" in obj:
        classes = obj["class"] if isinstance(obj["class"], list) else [obj["class"]]
        if any(c not in SHAPE_CLASSES for c in classes):
            raise CliError(f"audio class must be one of {SHAPE_CLASSES}")
        return encode_audio_class(classes, dim)
    vec = obj.get("audio") if isinstance(obj, dict) else obj
    arr = np.asarray(vec, dtype=np.float32)
    if arr.shape != (dim,):
        raise CliError(f"audio embedding must have {dim} values, got shape {arr.shape}")
    return arr


def cmd_predict(args) -> int:
    from .flow import farneback_flow, normalize_for_model
    from .model import predict

    params, mcfg, use_flow, flow_params = _load_model(args.checkpoint)
    frame = read_png(args.frame)
    audio = _read_audio(args.audio, mcfg.audio_dim)
    h, w = frame.shape[1:]
    if h % 32 or w % 32:
        raise CliError(f"frame size {h}x{w} must be divisible by 32")
    flow = np.zeros((2, h, w), np.float32)
    if args.neighbor is None:
        print("warning: no --neighbor given; running without motion cues (zero flow)", file=sys.stderr)
    else:
        nb = read_png(args.neighbor)
        if nb.shape != frame.shape:
            raise CliError(f"neighbor size {nb.shape[1:]} differs from frame {frame.shape[1:]}")
        if use_flow:
            flow = normalize_for_model(farneback_flow(frame, nb, flow_params).to_array())
    prob = predict(params, frame[None], flow[None], audio[None])[0]
    out = Path(args.out)
    write_png(out, ((prob >= args.threshold) * 255).astype(np.uint8))
    np.save(out.with_name(out.stem + "_prob.npy"), prob.astype(np.float32))
    write_png(out.with_name(out.stem + "_prob.png"), (prob * 255).round().astype(np.uint8))
    print(json.dumps({"mask": str(out), "foreground_fraction": float((prob >= args.threshold).mean()),
                      "mean_probability": float(prob.mean())}))
    return 0


# ---------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ufe", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="run burn-in + joint training")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=["full", "nf-only", "df-only", "baseline"])
    t.add_argument("--seed", type=int)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", required=True)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--out")
    e.add_argument("--csv")
    e.set_defaults(fn=cmd_eval)

    f = sub.add_parser("flow-viz", help="color-wheel visualization of Farneback flow")
    f.add_argument("--frame-a", required=True)
    f.add_argument("--frame-b", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(fn=cmd_flow_viz)

    r = sub.add_parser("predict", help="segment one frame")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--frame", required=True)
    r.add_argument("--neighbor")
    r.add_argument("--audio", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--threshold", type=float, default=0.5)
    r.set_defaults(fn=cmd_predict)
    return p


def main(argv=None) -> int:
    from .data import ConfigError, DatasetFormatError
    from .model import CheckpointError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ConfigError, DatasetFormatError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
