"""Command line: ``gen``, ``train``, ``render``, ``eval`` and ``diag``.

Exit status is 0 on success, 1 for usage errors (bad flags or arguments),
2 for failures while running (I/O, unreadable files, diverged training).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics as M
from .curriculum import ABLATIONS, NonFiniteLoss, StageLog, TrainConfig, run_curriculum
from .encoding import EncodingConfig
from .field import FieldConfig, FieldLoadError, FieldParams, load_params, save_params
from .render import load_png, render_image, save_depth_png, save_png
from .scenegen import DatasetError, build_synthetic_scene, generate_orbit_dataset, load_dataset, save_dataset

log = logging.getLogger("progressive_nerf")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

FIELD_KEYS = {"width": int, "D_base": int, "D_res": int, "M_pos": int, "M_dir": int}
TRAIN_KEYS = {
    "iters_per_stage": int,
    "batch_size": int,
    "n_samples": int,
    "base_lr": float,
    "lr_final": float,
    "precision": str,
    "background": lambda s: tuple(float(x) for x in s.split(",")),
    "eval_samples": int,
    "seed": int,
    "deterministic": lambda s: s.strip().lower() in ("1", "true", "yes"),
    "ablations": lambda s: tuple(x for x in s.split(",") if x),
}
DEFAULTS = {
    "width": 256,
    "D_base": 4,
    "D_res": 2,
    "M_pos": 11,
    "M_dir": 4,
    "iters_per_stage": 3000,
    "batch_size": 2048,
    "n_samples": 128,
    "base_lr": 5e-4,
    "lr_final": 5e-6,
    "precision": "float64",
    "background": (1.0, 1.0, 1.0),
    "eval_samples": 128,
    "seed": 0,
    "deterministic": False,
    "ablations": (),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        conv = FIELD_KEYS.get(key) or TRAIN_KEYS.get(key)
        if conv is None:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = conv(value)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return out


def format_config(cfg: dict) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        return str(v)

    return "".join(f"{k} = {fmt(cfg[k])}\n" for k in sorted(cfg))


def _ensure_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"output directory {path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)


def cmd_gen(args) -> int:
    if args.lmax < 1:
        raise UsageError("--lmax must be >= 1")
    if args.views_per_scale < 2:
        raise UsageError("--views-per-scale must be >= 2")
    if not 1 <= args.test_per_scale < args.views_per_scale:
        raise UsageError("--test-per-scale must be >= 1 and below --views-per-scale")
    if args.bands < 1:
        raise UsageError("--bands must be >= 1")
    out = Path(args.out)
    _ensure_dir(out, args.force)
    scene = build_synthetic_scene(args.seed, bands=args.bands, box_count=args.boxes)
    ds = generate_orbit_dataset(
        scene, args.lmax, args.views_per_scale, seed=args.seed, d_min=args.d_min, width=args.size, height=args.size,
        test_views=args.test_per_scale,
    )
    save_dataset(ds, out)
    print(f"wrote {len(ds.views)} views to {out}")
    return EXIT_OK


def _stage_evaluator(ds, n_samples: int, background):
    def evaluate(field: FieldParams, stage: int) -> dict:
        final = M.evaluate_views(field, ds, "test", field.depth, n_samples, background)
        rows = []
        for v in ds.split("test"):
            head = min(v.stage, field.depth)
            pred, _ = render_image(field, v.camera, head, n_samples, background)
            pred = np.round(pred * 255) / 255
            rows.append((v.stage, M.psnr(pred, v.image), M.ssim(pred, v.image)))
        return {"final": final, "matched": M.summarize(rows, ds.L_max)}

    return evaluate


def resolve_train_args(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(read_config(args.config))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.deterministic:
        cfg["deterministic"] = True
    if args.ablate:
        names = tuple(a.strip() for a in args.ablate.split(",") if a.strip())
        cfg["ablations"] = names
    bad = [a for a in cfg["ablations"] if a not in ABLATIONS]
    if bad:
        raise UsageError(f"unknown ablation {', '.join(bad)}; valid names: {', '.join(ABLATIONS)}")
    return cfg


def build_configs(cfg: dict, ds) -> tuple[FieldConfig, TrainConfig]:
    enc = EncodingConfig(
        M_pos=cfg["M_pos"], M_dir=cfg["M_dir"], scene_center=tuple(ds.scene_center), scene_radius=ds.scene_radius
    )
    fc = FieldConfig(width=cfg["width"], D_base=cfg["D_base"], D_res=cfg["D_res"], L_max=ds.L_max, encoding=enc)
    tc = TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS if k in cfg})
    return fc, tc


def cmd_train(args) -> int:
    cfg = resolve_train_args(args)
    ds = load_dataset(args.data)
    try:
        fc, tc = build_configs(cfg, ds)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    evaluate = _stage_evaluator(ds, cfg["eval_samples"], tc.background)
    stage_text = []

    def on_stage_end(field: FieldParams, stage: int, slog: StageLog) -> None:
        save_params(field, out / f"stage{stage}.ckpt")
        m = slog.stage_metrics[-1]
        stage_text.append(M.format_table(m["final"], ds.L_max, f"stage {stage} head {field.depth} (final)"))
        stage_text.append(M.format_table(m["matched"], ds.L_max, f"stage {stage} head matched to scale"))
        (out / "stage_metrics.txt").write_text("".join(stage_text))
        log.info("stage %d: %s", stage, json.dumps(m["final"]["psnr"]))

    try:
        field, slog = run_curriculum(ds, fc, tc, evaluate, on_stage_end)
    except NonFiniteLoss as exc:
        snap = exc.snapshot
        save_params(snap["field"], out / "diverged.ckpt")
        (out / "diverged.json").write_text(
            json.dumps({k: v for k, v in snap.items() if k != "field"}, default=str) + "\n"
        )
        raise
    save_params(field, out / "final.ckpt")
    slog.write_jsonl(out / "log.jsonl")
    final = slog.stage_metrics[-1]["final"]
    table = M.format_table(final, ds.L_max, f"split test head {field.depth}")
    (out / "metrics.txt").write_text(table)
    (out / "timing.txt").write_text(
        "".join(f"stage {i + 1}\t{s:.3f}s\n" for i, s in enumerate(slog.stage_seconds))
    )
    print(table, end="")
    return EXIT_OK


def _load_ckpt(path) -> FieldParams:
    return load_params(path)


def _head_for(field: FieldParams, head: int | None) -> int:
    if head is None:
        return field.depth
    if not 1 <= head <= field.depth:
        raise UsageError(f"--head {head} outside the checkpoint's heads 1..{field.depth}")
    return head


def cmd_render(args) -> int:
    field = _load_ckpt(args.ckpt)
    head = _head_for(field, args.head)
    ds = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for v in ds.split(args.split):
        image, depth = render_image(field, v.camera, head, args.samples)
        stem = Path(v.file).stem
        save_png(image, out / f"{stem}.png")
        near = max(1e-3, v.camera.target_distance - ds.scene_radius)
        save_depth_png(depth, near, v.camera.target_distance + ds.scene_radius, out / f"{stem}_depth.png")
    print(f"rendered {len(ds.split(args.split))} views at head {head} to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    if args.pred:
        rows = []
        for v in ds.split(args.split):
            p = Path(args.pred) / Path(v.file).name
            if not p.is_file():
                raise DatasetError(f"missing prediction {p}")
            pred = load_png(p)
            rows.append((v.stage, M.psnr(pred, v.image), M.ssim(pred, v.image)))
        summary = M.summarize(rows, ds.L_max)
        header = f"split {args.split} pred {args.pred}"
    else:
        if not args.ckpt:
            raise UsageError("eval needs --ckpt or --pred")
        field = _load_ckpt(args.ckpt)
        head = _head_for(field, args.head)
        summary = M.evaluate_views(field, ds, args.split, head, args.samples)
        header = f"split {args.split} head {head}"
    table = M.format_table(summary, ds.L_max, header)
    if args.out:
        Path(args.out).write_text(table)
    print(table, end="")
    return EXIT_OK


def diag_report(field: FieldParams, bar: int = 40) -> str:
    lines = []
    for block in M.pe_blocks(field):
        w = M.freq_channel_weights(field, block)
        what = "base block input" if block == 1 else f"residual block {block} skip input"
        lines.append(f"[block {block}] {what}")
        for j, x in enumerate(w):
            lines.append(f"  2^{j:<3d} {x:.4f} {'#' * int(round(x * bar))}")
        lines.append(f"  high-band mass (top third): {M.high_band_mass(w):.4f}")
    return "\n".join(lines) + "\n"


def cmd_diag(args) -> int:
    field = _load_ckpt(args.ckpt)
    text = diag_report(field)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="progressive-nerf", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic multi-scale dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--lmax", type=int, default=3)
    g.add_argument("--views-per-scale", type=int, default=10)
    g.add_argument("--out", required=True)
    g.add_argument("--test-per-scale", type=int, default=1, help="held-out views per scale (the last ones)")
    g.add_argument("--bands", type=int, default=9)
    g.add_argument("--boxes", type=int, default=6)
    g.add_argument("--size", type=int, default=96, help="image width and height in pixels")
    g.add_argument("--d-min", type=float, default=1.5)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="grow-and-train over all stages")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--ablate", default="", help=f"comma list of: {', '.join(ABLATIONS)}")
    t.add_argument("--seed", type=int)
    t.add_argument("--deterministic", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render views at one output head")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--head", type=int)
    r.add_argument("--split", default="test", choices=("train", "test"))
    r.add_argument("--out", required=True)
    r.add_argument("--samples", type=int, default=128)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="per-scale PSNR/SSIM table")
    e.add_argument("--ckpt")
    e.add_argument("--pred", help="directory of pre-rendered images named like the dataset's")
    e.add_argument("--data", required=True)
    e.add_argument("--head", type=int)
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--samples", type=int, default=128)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diag", help="per-frequency weight mass of every PE-consuming block")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--out")
    d.set_defaults(func=cmd_diag)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    threads = args.threads or os.cpu_count() or 1
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, FieldLoadError, NonFiniteLoss, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
