"""``hvp`` command line: gen-data, train, rollout, eval, viz.

Exit codes: 0 success, 2 usage error, 1 runtime failure. Every command writes
its fully expanded run config next to its outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("hvp")

DEFAULT_OUT = "hvp_out"


class CommandError(RuntimeError):
    """Runtime failure reported with exit code 1."""


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _out_root() -> Path:
    return Path(os.environ.get("HVP_OUT_DIR", DEFAULT_OUT))


def _resolve_config(args, overrides: dict, output_dir: Path):
    from .config import RunConfig, load_config_file

    file_doc = load_config_file(args.config) if getattr(args, "config", None) else None
    preset = args.preset
    if preset is None:
        preset = (file_doc or {}).get("preset", "shapes-desk")
    try:
        return RunConfig.resolve(preset, file_doc, overrides, output_dir=str(output_dir))
    except (ValueError, TypeError) as exc:
        raise CommandError(f"invalid configuration: {exc}") from exc


def _add_config_args(p: argparse.ArgumentParser) -> None:
    from .config import PRESETS

    p.add_argument("--preset", choices=sorted(PRESETS), default=None, help="named preset (default shapes-desk)")
    p.add_argument("--config", type=Path, help="JSON run config; flags override its values")


# -- gen-data ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .shapes_world import PALETTE_NAMES, Dataset, write_dataset

    out = args.out or (_out_root() / ("test.bin" if args.test else "data.bin"))
    out = Path(out)
    overrides: dict = {"data": {}, "world": {}}
    if args.n is not None:
        overrides["data"]["test_n" if args.test else "n"] = args.n
    if args.seed is not None:
        overrides["data"]["test_seed" if args.test else "seed"] = args.seed
    if args.length is not None:
        overrides["world"]["sequence_length"] = args.length
    cfg = _resolve_config(args, overrides, out.parent)
    world = cfg.world
    if args.test:
        n, seed = cfg.data["test_n"], cfg.data["test_seed"]
        if args.length is None:
            world = world.replace(sequence_length=cfg.data["test_length"])
    else:
        n, seed = cfg.data["n"], cfg.data["seed"]
    ds = Dataset.generate(world, n, seed=seed, jobs=args.jobs)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, ds)
    summary = {
        "path": out.name,
        "n": n,
        "T": world.sequence_length,
        "image_size": list(world.image_size),
        "palette": {name: list(c) for name, c in zip(PALETTE_NAMES, ds.palette)},
        "seed": seed,
        "split": "test" if args.test else "train",
    }
    out.with_suffix(".summary.json").write_text(json.dumps(summary, indent=2))
    cfg.write(out.parent, f"{out.stem}.run_config.json")
    print(f"wrote {n} sequences of {world.sequence_length} frames to {out}")
    return 0


# -- train -----------------------------------------------------------------------


def cmd_train(args) -> int:
    from .plotting import plot_loss_curves
    from .shapes_world import read_dataset
    from .trainer import TrainingDiverged, train

    data_path = Path(args.data)
    if not data_path.is_file():
        raise CommandError(f"dataset {data_path} not found")
    out = Path(args.out) if args.out else _out_root() / f"run_{args.regime or 'epva'}"
    tr: dict = {}
    for key, val in (("regime", args.regime), ("steps", args.steps), ("seed", args.seed),
                     ("batch_size", args.batch_size), ("lr", args.lr)):
        if val is not None:
            tr[key] = val
    if args.init is not None:
        tr["init_from_checkpoint"] = str(args.init)
    if args.input_noise_dim is not None:
        tr["input_noise_dim"] = args.input_noise_dim
    ds = read_dataset(data_path)
    world_doc = {"image_size": list(ds.world.image_size), "sequence_length": ds.world.sequence_length,
                 "seed": ds.seed}
    cfg = _resolve_config(args, {"training": tr, "world": world_doc}, out)
    tc = cfg.training
    if tc.init_from_checkpoint and not Path(tc.init_from_checkpoint).is_dir():
        raise CommandError(f"--init checkpoint {tc.init_from_checkpoint} not found")
    cfg.write(out)

    def progress(step, rec):
        if step % max(1, tc.steps // 20) == 0 or step == tc.steps:
            log.info("step %d/%d total=%.5f", step, tc.steps, rec["total"])

    try:
        result = train(tc, ds.frames, cfg.net, out, world=cfg.to_json()["world"], progress=progress)
    except TrainingDiverged as exc:
        print(f"error: training diverged; snapshot at {exc.snapshot}", file=sys.stderr)
        return 1
    plot_loss_curves(result.metrics, out / "loss_curves.png", title=tc.regime)
    print(f"checkpoint written to {out} (step {result.step})")
    return 0


# -- rollout ---------------------------------------------------------------------


def _load_ckpt(path):
    from .trainer import CheckpointError, load_checkpoint

    try:
        return load_checkpoint(path)
    except (FileNotFoundError, CheckpointError) as exc:
        raise CommandError(str(exc)) from exc


def _world_of(ckpt):
    from .shapes_world import WorldConfig

    w = ckpt.manifest.get("world") or {}
    size = tuple(w.get("image_size", ckpt.net_spec.image_size))
    return WorldConfig(image_size=size, sequence_length=int(w.get("sequence_length", 24)), seed=int(w.get("seed", 0)))


def cmd_rollout(args) -> int:
    import torch

    from .plotting import save_gif, save_strip
    from .shapes_world import Dataset, read_dataset

    ckpt = _load_ckpt(args.ckpt)
    c = ckpt.training_config.context
    out = Path(args.out) if args.out else _out_root() / "rollout"
    if args.data:
        ds = read_dataset(args.data)
    else:
        ds = Dataset.generate(_world_of(ckpt).replace(sequence_length=max(c, 1)), args.index + 1, seed=args.seed)
    if not 0 <= args.index < len(ds):
        raise CommandError(f"--index {args.index} out of range for {len(ds)} sequences")
    if ds.frames.shape[1] < c:
        raise CommandError(f"context needs {c} frames, dataset has {ds.frames.shape[1]}")
    if tuple(ds.frames.shape[2:4]) != tuple(ckpt.net_spec.image_size):
        raise CommandError(
            f"dataset frames are {ds.frames.shape[2:4]}, checkpoint expects {ckpt.net_spec.image_size}"
        )
    ctx = torch.from_numpy(np.ascontiguousarray(ds.frames[args.index : args.index + 1, :c].transpose(0, 1, 4, 2, 3)))
    gen = torch.Generator().manual_seed(args.noise_seed)
    noise = ckpt.model.noise(1, max(args.horizon, c), args.noise_std, gen)
    frames, masks = [], []
    with torch.no_grad():
        for o in ckpt.model.iter_rollout(ctx, args.horizon, noise):
            frames.append(o.composite[0].permute(1, 2, 0).numpy())
            masks.append(o.mask[0, 0].numpy())
    frames, masks = np.stack(frames), np.stack(masks)
    out.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(out / "rollout.npz", frames=frames, masks=masks)
    save_strip(frames, out / "frames.png")
    save_strip(masks, out / "masks.png")
    save_gif(frames, out / "rollout.gif", fps=args.fps)
    save_gif(masks, out / "mask.gif", fps=args.fps)
    (out / "run_config.json").write_text(json.dumps({
        "command": "rollout",
        "ckpt": str(args.ckpt),
        "data": None if args.data is None else str(args.data),
        "index": args.index,
        "seed": args.seed,
        "horizon": args.horizon,
        "noise_seed": args.noise_seed,
        "noise_std": args.noise_std,
        "fps": args.fps,
        "checkpoint_manifest": {k: ckpt.manifest[k] for k in ("net_spec", "training_config", "step")},
    }, indent=2, sort_keys=True))
    print(f"wrote {len(frames)} frames and {len(masks)} masks to {out}")
    return 0


# -- eval ------------------------------------------------------------------------


def cmd_eval(args) -> int:
    from .evaluation import OUTCOMES, evaluate_checkpoint, evaluate_stream, oracle_stream
    from .plotting import plot_horizon_reports, plot_outcome_bars
    from .shapes_world import Dataset, generate_sequence, read_dataset

    if not args.ckpt and not args.oracle:
        raise CommandError("nothing to evaluate: pass --ckpt and/or --oracle")
    ckpts = [_load_ckpt(p) for p in args.ckpt or []]
    out = Path(args.out) if args.out else _out_root() / "eval"
    ev_over: dict = {}
    if args.horizon is not None:
        ev_over["horizon"] = args.horizon
    if args.window is not None:
        ev_over["window"] = list(args.window)
    if args.noise_seed is not None:
        ev_over["noise_seed"] = args.noise_seed
    cfg = _resolve_config(args, {"eval": ev_over}, out)
    horizon, window = cfg.eval["horizon"], tuple(cfg.eval["window"])
    if not 1 <= window[0] <= window[1] <= horizon:
        raise CommandError(f"window {window} does not fit in horizon {horizon}")
    if args.data:
        ds = read_dataset(args.data)
    else:
        world = _world_of(ckpts[0]) if ckpts else cfg.world
        ds = Dataset.generate(world.replace(sequence_length=cfg.data["test_length"]),
                              cfg.data["test_n"], seed=cfg.data["test_seed"])
    if args.limit:
        ds.specs, ds.frames = ds.specs[: args.limit], ds.frames[: args.limit]
    colors = [s.color for s in ds.specs]
    world = ds.world

    def reference(lo, hi):
        return np.stack([generate_sequence(s, world, horizon + 1)[1:] for s in ds.specs[lo:hi]])

    ref = None if args.no_curves else reference
    if args.jobs:
        import torch

        torch.set_num_threads(args.jobs)
    reports = []
    if args.oracle:
        r = evaluate_stream(oracle_stream(ds.specs, world, horizon), colors, window, horizon,
                            palette=ds.palette, reference=None if ref is None else ref(0, len(ds)), label="oracle")
        reports.append(r)
    for path, ck in zip(args.ckpt or [], ckpts):
        c = ck.training_config.context
        if ds.frames.shape[1] < c:
            raise CommandError(f"test sequences have {ds.frames.shape[1]} frames, context needs {c}")
        if tuple(ds.frames.shape[2:4]) != tuple(ck.net_spec.image_size):
            raise CommandError(f"test frames {ds.frames.shape[2:4]} vs checkpoint {ck.net_spec.image_size}")
        label = Path(path).name or str(path)
        r = evaluate_checkpoint(ck.model, ds.frames[:, :c], colors, horizon, window, reference=ref,
                                batch_size=cfg.eval["batch_size"], noise_seed=cfg.eval["noise_seed"],
                                noise_std=cfg.eval["noise_std"], palette=ds.palette,
                                label=f"{label} ({ck.training_config.regime})")
        reports.append(r)
    out.mkdir(parents=True, exist_ok=True)
    stems = []
    for r in reports:
        stem = "report_" + r.label.split(" ")[0].replace("/", "_")
        r.write(out, stem)
        stems.append(stem)
    header = f"{'model':<32} {'correct color':>14} {'wrong color':>12} {'disappeared':>12}"
    lines = [f"frames {window[0]}-{window[1]} of {horizon}, n={reports[0].n}", header]
    for r in reports:
        lines.append(f"{r.label:<32} " + " ".join(
            f"{100 * r.rates[o]:>{w}.1f}%" for o, w in zip(OUTCOMES, (13, 11, 11))))
    table = "\n".join(lines)
    (out / "summary.txt").write_text(table + "\n")
    plot_horizon_reports(reports, out / "horizon_curves.png")
    plot_outcome_bars(reports, out / "outcomes.png")
    doc = cfg.to_json()
    doc["command"] = "eval"
    doc["checkpoints"] = [str(p) for p in args.ckpt or []]
    doc["test_data"] = None if args.data is None else str(args.data)
    (out / "run_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    print(table)
    return 0


# -- viz -------------------------------------------------------------------------


def cmd_viz(args) -> int:
    from .evaluation import HorizonReport
    from .plotting import plot_horizon_reports, plot_loss_curves, plot_outcome_bars, save_strip
    from .shapes_world import read_dataset
    from .trainer import read_metrics

    if not (args.run or args.report or args.data):
        raise CommandError("nothing to draw: pass --run, --report or --data")
    out = Path(args.out) if args.out else _out_root() / "viz"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for run in args.run or []:
        metrics = read_metrics(run)
        if not metrics:
            raise CommandError(f"{run}: empty metrics log")
        written.append(plot_loss_curves(metrics, out / f"loss_{Path(run).name}.png", title=Path(run).name))
    if args.report:
        reports = [HorizonReport.from_json(json.loads(Path(p).read_text())) for p in args.report]
        written.append(plot_horizon_reports(reports, out / "horizon_curves.png"))
        written.append(plot_outcome_bars(reports, out / "outcomes.png"))
    if args.data:
        ds = read_dataset(args.data)
        k = min(args.sequences, len(ds))
        t = min(args.frames, ds.frames.shape[1])
        grid = ds.frames[:k, :t].reshape(k * t, *ds.frames.shape[2:])
        written.append(save_strip(grid, out / "dataset_samples.png", per_row=t))
    (out / "run_config.json").write_text(json.dumps({
        "command": "viz", "run": [str(r) for r in args.run or []],
        "report": [str(r) for r in args.report or []],
        "data": None if args.data is None else str(args.data),
        "sequences": args.sequences, "frames": args.frames,
    }, indent=2))
    for p in written:
        print(p)
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .trainer import REGIMES

    p = argparse.ArgumentParser(prog="hvp", description="Hierarchical long-term video prediction on bouncing shapes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a bouncing-shapes dataset file")
    _add_config_args(g)
    g.add_argument("--n", type=_positive_int, help="number of sequences")
    g.add_argument("--seed", type=int)
    g.add_argument("--length", type=_positive_int, help="frames per sequence")
    g.add_argument("--test", action="store_true", help="use the held-out split defaults (test_n, test_seed, test_length)")
    g.add_argument("--out", type=Path, help="output file (default $HVP_OUT_DIR/data.bin)")
    g.add_argument("--jobs", type=_positive_int, default=1)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one regime")
    _add_config_args(t)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--regime", choices=REGIMES)
    t.add_argument("--steps", type=_positive_int)
    t.add_argument("--batch-size", type=_positive_int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--input-noise-dim", type=int)
    t.add_argument("--init", type=Path, help="warm-start from a checkpoint directory")
    t.add_argument("--out", type=Path, help="checkpoint directory")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("rollout", help="roll a checkpoint out and write frames, masks and GIFs")
    r.add_argument("--ckpt", type=Path, required=True)
    r.add_argument("--data", type=Path, help="dataset supplying the context frames")
    r.add_argument("--index", type=int, default=0)
    r.add_argument("--seed", type=int, default=777, help="seed for a generated context when --data is absent")
    r.add_argument("--horizon", type=_positive_int, default=260)
    r.add_argument("--noise-seed", type=int, default=0)
    r.add_argument("--noise-std", type=float, default=1.0)
    r.add_argument("--fps", type=float, default=10.0)
    r.add_argument("--out", type=Path)
    r.set_defaults(func=cmd_rollout)

    e = sub.add_parser("eval", help="score long-horizon rollouts (presence / color)")
    _add_config_args(e)
    e.add_argument("--ckpt", type=Path, action="append", help="checkpoint directory (repeatable)")
    e.add_argument("--oracle", action="store_true", help="also score the ground-truth generator")
    e.add_argument("--data", type=Path, help="held-out dataset (default: generated from the config)")
    e.add_argument("--horizon", type=_positive_int)
    e.add_argument("--window", type=_positive_int, nargs=2, metavar=("FIRST", "LAST"))
    e.add_argument("--noise-seed", type=int)
    e.add_argument("--limit", type=_positive_int, help="only the first N test sequences")
    e.add_argument("--no-curves", action="store_true", help="skip per-frame L2/SSIM against ground truth")
    e.add_argument("--jobs", type=_positive_int)
    e.add_argument("--out", type=Path)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz", help="render figures from runs, reports or datasets")
    v.add_argument("--run", type=Path, action="append", help="run directory with metrics.jsonl")
    v.add_argument("--report", type=Path, action="append", help="report JSON from eval")
    v.add_argument("--data", type=Path)
    v.add_argument("--sequences", type=_positive_int, default=4)
    v.add_argument("--frames", type=_positive_int, default=16)
    v.add_argument("--out", type=Path)
    v.set_defaults(func=cmd_viz)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
