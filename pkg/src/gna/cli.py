"""Command-line entry point: ``gna <command> --config PATH [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 usage, 2 validation, 3 runtime.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from . import bench as Bm
from . import bounds as Bd
from . import data as D
from . import evaluation as E
from . import model as Mo
from . import plots
from . import training as T
from .config import RunConfig, load_config
from .errors import ContractError, FormatError, GnaError, IoError, ShapeError, ValidationError

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3
COMMANDS = ("gen-data", "train", "eval", "bench-attn", "verify-bound", "plot")
MANIFEST = "manifest.csv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gna", description="Gaussian neighborhood attention toolkit")
    p.add_argument("--version", action="version", version=f"gna {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("inputs", nargs="*", help="CSV files for 'plot' (defaults to eval.plot_inputs)")
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    p.add_argument("--out", default="out", help="output directory")
    return p


def workers() -> int:
    raw = os.environ.get("GNA_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValidationError(f"GNA_THREADS must be an integer, got {raw!r}") from None


def apply_seed(cfg: RunConfig, seed: int | None) -> int:
    if seed is not None:
        cfg.train.seed = seed
        cfg.data.synth.seed = seed
        cfg.model.gna.seed = seed
    return cfg.train.seed if seed is None else seed


def header(command: str, seed: int, extra: str = "") -> str:
    return f"gna {__version__} {command} seed={seed}" + (f" {extra}" if extra else "")


# ---------------------------------------------------------------------------
# commands


def _render_video(args):
    cfg, index = args
    return D.synth_scene(cfg, D.video_seed(cfg.seed, index))


def cmd_gen_data(cfg: RunConfig, out: Path, seed: int) -> int:
    synth = cfg.data.synth
    seed = synth.seed
    jobs = [(synth, i) for i in range(cfg.data.count)]
    n = workers()
    if n > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            videos = list(pool.map(_render_video, jobs))
    else:
        videos = [_render_video(j) for j in jobs]
    rows = []
    for i, v in enumerate(videos):
        name = f"video_{i:04d}"
        D.save_video(out / name, v, header("gen-data", seed, f"video={name}"))
        rows.append({"video": name, "frames": len(v), "heads": D.head_count(v.annotations),
                     "seed": D.video_seed(synth.seed, i)})
    with open(out / MANIFEST, "w", newline="") as fp:
        fp.write(f"# {header('gen-data', seed)}\n")
        w = csv.DictWriter(fp, fieldnames=("video", "frames", "heads", "seed"), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    total = sum(r["heads"] for r in rows)
    print(f"wrote {len(rows)} videos ({total} annotated heads) to {out}")
    return EXIT_OK


def read_manifest(path) -> list[dict]:
    _, rows = plots.read_csv(path)
    return rows


def _clips_from(cfg: RunConfig, directory: str, what: str) -> list[D.Clip]:
    if not directory:
        raise ValidationError(f"{what}: no data_dir configured")
    videos = D.load_corpus(cfg.resolve(directory))
    if not videos:
        raise ValidationError(f"{what}: no videos under {directory}")
    return D.corpus_clips(videos, cfg.model.clip_length, cfg.data.clip_stride)


def cmd_train(cfg: RunConfig, out: Path, seed: int) -> int:
    clips = _clips_from(cfg, cfg.train_dir, "train")
    ckpt, log = out / "model.ckpt", out / "train_log.csv"
    _, recs = T.train_loop(cfg.model, cfg.train, clips, ckpt, log,
                           header=header("train", seed, f"variant={cfg.model.variant}"),
                           on_epoch=lambda r: print(f"epoch {r.epoch}: loss {r.mean_loss:.5f} "
                                                    f"({r.seconds:.1f}s)", flush=True))
    print(f"trained {len(recs)} epochs on {len(clips)} clips; checkpoint {ckpt}")
    return EXIT_OK


def evaluate_clips(params, model_cfg: Mo.ModelConfig, clips, ev, seed: int) -> E.MetricReport:
    maps = T.predict(params, model_cfg, clips, seed=seed)
    dets = [E.find_peaks(m, ev.peak_threshold, ev.peak_window) for m in maps]
    gts = [[(h.x, h.y) for h in c.target_heads] for c in clips]
    return E.evaluate(dets, gts, ev.sigmas, ev.mode)


def cmd_eval(cfg: RunConfig, out: Path, seed: int) -> int:
    if not cfg.eval.checkpoint:
        raise ValidationError("eval: no checkpoint configured")
    params, model_cfg, _ = Mo.load_checkpoint(cfg.resolve(cfg.eval.checkpoint))
    cfg.model = model_cfg
    clips = _clips_from(cfg, cfg.eval.data_dir, "eval")
    rep = evaluate_clips(params, model_cfg, clips, cfg.eval, seed)
    with open(out / "metrics.csv", "w", newline="") as fp:
        rep.write_csv(fp, header("eval", seed, f"variant={model_cfg.variant} clips={len(clips)}"))
    for s in rep.mAP:
        print(f"sigma={s:g}: mAP {rep.mAP[s]:.4f} mAR {rep.mAR[s]:.4f}")
    print(f"MAE {rep.mae:.3f} MSE {rep.mse:.3f}")
    return EXIT_OK


def cmd_bench_attn(cfg: RunConfig, out: Path, seed: int) -> int:
    ev = cfg.eval
    rows = Bm.bench_attention(ev.bench_grids, ev.bench_channels, ev.bench_repeats, seed, cfg.model.gna)
    with open(out / "bench_attn.csv", "w", newline="") as fp:
        Bm.write_rows(rows, fp, Bm.BENCH_COLUMNS, header("bench-attn", seed))
    for r in rows:
        print(f"{r['kernel']:>8} {r['grid']:>6}: {r['seconds'] * 1e3:9.3f} ms "
              f"({r['per_query_seconds'] * 1e6:.2f} us/query) err {r['error_vs_full']:.3g}")
    return EXIT_OK


def cmd_verify_bound(cfg: RunConfig, out: Path, seed: int) -> int:
    rows = list(Bd.verify_bound(cfg.eval.bound_trials, seed))
    with open(out / "bound.csv", "w", newline="") as fp:
        Bd.write_csv(rows, fp, header("verify-bound", seed))
    bad = sum(r["violated"] for r in rows)
    print(f"{len(rows)} trials, {bad} violations")
    return EXIT_OK if bad == 0 else EXIT_RUNTIME


def cmd_plot(cfg: RunConfig, out: Path, seed: int, inputs: list[str]) -> int:
    paths = [Path(p) for p in inputs] or [cfg.resolve(p) for p in cfg.eval.plot_inputs]
    if not paths:
        raise ValidationError("plot: no CSV inputs given")
    for p in paths:
        svg = plots.chart_for(p, header("plot", seed, f"source={p.name}"))
        target = out / (p.stem + ".svg")
        target.write_text(svg)
        print(f"wrote {target}")
    return EXIT_OK


def run(argv: list[str]) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config)
    seed = apply_seed(cfg, args.seed)
    out = D.ensure_dir(args.out)
    if args.inputs and args.command != "plot":
        raise UsageError(f"{args.command} takes no positional inputs")
    if args.command == "plot":
        return cmd_plot(cfg, out, seed, args.inputs)
    handler = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
               "bench-attn": cmd_bench_attn, "verify-bound": cmd_verify_bound}[args.command]
    return handler(cfg, out, seed)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        return run(argv)
    except UsageError as exc:
        print(f"gna: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, FormatError, ContractError, ShapeError) as exc:
        print(f"gna: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (IoError, GnaError, OSError, RuntimeError) as exc:
        print(f"gna: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
