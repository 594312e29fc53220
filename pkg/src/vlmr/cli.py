"""Command-line entry point.

Subcommands wire the library into reproducible experiments:

    gen-data   write a synthetic planted-alignment dataset
    train      contrastive training; writes checkpoint + history.csv
    eval       metric grid; writes metrics.csv
    infer      ranked predictions + attention/selection dumps for samples
    gradcheck  finite-difference verification of the full loss graph
    report     render PNG figures next to a run's CSV outputs

Every subcommand is deterministic given (config, seed), and all outputs
land under the chosen output directory. Flags override config-file values.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .autodiff import Graph, finite_diff_check
from .data import Dataset, DataError, SyntheticSpec, generate_synthetic
from .evaluation import evaluate, infer_sample, write_metrics_csv
from .model import TrainingConfig, bind_params, init_params, run_pipeline
from .proposals import generate_segment_groups
from .training import (Checkpoint, CheckpointError, TrainingError,
                       check_compatible, load_checkpoint, save_checkpoint,
                       train, write_history_csv)

CONFIG_FLAGS = {
    "margin": float, "learning_rate": float, "epochs": int, "batch_size": int,
    "negatives": int, "seed": int, "optimizer": str, "cascade_iterations": int,
    "stride": int, "d_model": int, "d_attn": int, "d_hidden": int,
}


def _parse_windows(text: str) -> tuple[int, ...]:
    try:
        windows = tuple(int(tok) for tok in text.split(",") if tok.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad window list {text!r}")
    if not windows:
        raise argparse.ArgumentTypeError("window list is empty")
    return windows


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON config file; flags override it")
    parser.add_argument("--margin", type=float)
    parser.add_argument("--lr", dest="learning_rate", type=float)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--negatives", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--optimizer", choices=("adam", "sgd"))
    parser.add_argument("--cascade-iters", dest="cascade_iterations", type=int)
    parser.add_argument("--stride", type=int)
    parser.add_argument("--windows", type=_parse_windows,
                        help="comma-separated window sizes, e.g. 64,96,128")
    parser.add_argument("--d", dest="d_model", type=int)
    parser.add_argument("--d-attn", dest="d_attn", type=int)
    parser.add_argument("--no-surrogates", action="store_true",
                        help="score every proposal instead of per-group surrogates")


def _build_config(args) -> TrainingConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(json.loads(Path(args.config).read_text()))
    for name in CONFIG_FLAGS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    if getattr(args, "windows", None) is not None:
        values["window_sizes"] = list(args.windows)
    if getattr(args, "no_surrogates", False):
        values["use_surrogates"] = False
    return TrainingConfig.from_dict(values)


def _write_effective_config(config: TrainingConfig, out_dir: Path) -> None:
    (out_dir / "effective_config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def _cmd_gen_data(args) -> int:
    spec = SyntheticSpec(videos=args.videos, test_videos=args.test_videos,
                         frames=args.frames, d_raw=args.d_raw,
                         token_range=(args.min_tokens, args.max_tokens),
                         concept_dim=args.concept_dim if args.concept_dim else args.d_raw,
                         noise=args.noise,
                         planted_len_range=(args.min_moment, args.max_moment),
                         seed=args.seed)
    manifest = generate_synthetic(spec, args.out)
    print(f"wrote {manifest}")
    return 0


def _cmd_train(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = _build_config(args)
    dataset = Dataset.open(args.manifest)

    def progress(stats):
        if not args.quiet:
            print(f"epoch {stats.epoch:4d}  loss {stats.loss:.4f}  "
                  f"pos {stats.mean_pos_sim:.4f}  neg {stats.mean_neg_sim:.4f}")

    ckpt = train(dataset, config, on_epoch=progress)
    save_checkpoint(ckpt, out_dir / "checkpoint.bin")
    write_history_csv(ckpt.history, out_dir / "history.csv")
    _write_effective_config(config, out_dir)
    print(f"wrote {out_dir / 'checkpoint.bin'}")
    return 0


def _load_for_inference(args) -> tuple[Dataset, Checkpoint, TrainingConfig]:
    dataset = Dataset.open(args.manifest)
    ckpt = load_checkpoint(args.checkpoint)
    config = ckpt.config
    overrides = _build_config(args)
    if getattr(args, "config", None) or any(
            getattr(args, name, None) is not None for name in ("d_model", "d_attn")):
        check_compatible(ckpt, overrides)
    if getattr(args, "windows", None) is not None:
        config = TrainingConfig.from_dict({**config.to_dict(),
                                           "window_sizes": list(args.windows)})
    if getattr(args, "stride", None) is not None:
        config = TrainingConfig.from_dict({**config.to_dict(), "stride": args.stride})
    if getattr(args, "no_surrogates", False):
        config = TrainingConfig.from_dict({**config.to_dict(), "use_surrogates": False})
    return dataset, ckpt, config


def _cmd_eval(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset, ckpt, config = _load_for_inference(args)
    rows = evaluate(dataset, ckpt.params, config, split=args.split,
                    baseline_trials=args.baseline_trials,
                    baseline_seed=config.seed)
    write_metrics_csv(rows, out_dir / "metrics.csv")
    _write_effective_config(config, out_dir)
    for r in rows:
        print(f"{r.metric} n={r.n} iou={r.iou_threshold:g}: {r.value:.4f}")
    print(f"wrote {out_dir / 'metrics.csv'}")
    return 0


def _cmd_infer(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset, ckpt, config = _load_for_inference(args)

    pairs = dataset.pairs(args.split)
    if args.samples:
        wanted = set(args.samples)
        pairs = [p for p in pairs if p.query_id in wanted or p.video_id in wanted]
        if not pairs:
            print(f"no pairs match {sorted(wanted)}", file=sys.stderr)
            return 1

    pred_lines = ["video_id,query_id,rank,start,end,score"]
    for p in pairs:
        result = infer_sample(dataset, ckpt.params, config, p.video_id, p.query_id)
        for rank, (iv, score) in enumerate(result.ranked.entries, start=1):
            pred_lines.append(
                f"{p.video_id},{p.query_id},{rank},{iv.start},{iv.end},{score!r}")

        stem = f"{p.video_id}_{p.query_id}"
        att_lines = ["stage,index,weight"]
        for stage, weights in result.stage_weights:
            for i, w in enumerate(weights):
                att_lines.append(f"{stage},{i},{float(w)!r}")
        for i, v in enumerate(result.vla_scores):
            att_lines.append(f"vla,{i},{float(v)!r}")
        (out_dir / f"attention_{stem}.csv").write_text("\n".join(att_lines) + "\n")

        if result.selection:
            sel_lines = ["group,scale,start,end,similarity"]
            for group, scale, iv, sim in result.selection:
                sel_lines.append(f"{group},{scale},{iv.start},{iv.end},{sim!r}")
            (out_dir / f"selection_{stem}.csv").write_text("\n".join(sel_lines) + "\n")

    (out_dir / "predictions.csv").write_text("\n".join(pred_lines) + "\n")
    _write_effective_config(config, out_dir)
    print(f"wrote {out_dir / 'predictions.csv'} for {len(pairs)} pairs")
    return 0


def _cmd_gradcheck(args) -> int:
    config = _build_config(args)
    # Desk-scale verification graph: dims small enough for exhaustive
    # central differences on every parameter component.
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    d_emb = d_raw = args.check_dim
    overrides = {"d_model": args.check_dim, "d_attn": args.check_dim,
                 "d_hidden": args.check_dim}
    if args.windows is None:
        overrides["window_sizes"] = [8, 16, 24]
        overrides["stride"] = config.stride if args.stride is not None else 8
    config = TrainingConfig.from_dict({**config.to_dict(), **overrides})

    video_len = config.stride * (args.groups - 1) + min(config.window_sizes)
    grid = generate_segment_groups(video_len, config.stride, config.window_sizes)

    for attempt in range(args.max_redraws + 1):
        params = init_params(config, d_emb, d_raw, rng)
        frames = rng.standard_normal((video_len, d_raw))
        tokens_pos = rng.standard_normal((args.tokens, d_emb))
        tokens_neg = rng.standard_normal((args.tokens, d_emb))

        graph = Graph()
        leaves = bind_params(graph, params)
        from .encoders import pool_proposals
        pooled = pool_proposals(frames, grid)
        pos = run_pipeline(graph, leaves, pooled, grid, tokens_pos, config)
        neg = run_pipeline(graph, leaves, pooled, grid, tokens_neg, config,
                           grid_features=pos.grid_features)
        margin = graph.constant(np.array([config.margin]))
        loss = graph.relu(graph.add(graph.sub(margin, pos.similarity), neg.similarity))

        report = finite_diff_check(graph, loss, tolerance=args.tol)
        if report.tie_adjacent and attempt < args.max_redraws:
            print(f"redraw {attempt + 1}: surrogate selection tie-adjacent")
            continue
        for line in report.lines():
            print(line)
        print(f"max relative error {report.max_rel_error:.3e} "
              f"(tolerance {args.tol:g})")
        return 0 if report.passed else 1
    return 1


def _cmd_report(args) -> int:
    from .report import render_run  # defer matplotlib import to the report path

    written = render_run(args.run)
    if not written:
        print(f"no recognized CSVs under {args.run}", file=sys.stderr)
        return 1
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vlmr",
        description="Weakly-supervised video moment retrieval on feature files.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--videos", type=int, default=250)
    p.add_argument("--test-videos", type=int, default=50)
    p.add_argument("--frames", type=int, default=240)
    p.add_argument("--d-raw", type=int, default=32)
    p.add_argument("--concept-dim", type=int, default=0,
                   help="defaults to d-raw")
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--min-moment", type=int, default=64)
    p.add_argument("--max-moment", type=int, default=128)
    p.add_argument("--min-tokens", type=int, default=5)
    p.add_argument("--max-tokens", type=int, default=10)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="contrastive training run")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--quiet", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="compute the metric grid")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--split", default="test")
    p.add_argument("--baseline-trials", type=int, default=0,
                   help="also report a Monte-Carlo random baseline")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="ranked predictions + attention dumps")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--split", default="test")
    p.add_argument("--samples", nargs="*", default=None,
                   help="restrict to these video or query ids")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss graph")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--check-dim", type=int, default=8)
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--tokens", type=int, default=5)
    p.add_argument("--max-redraws", type=int, default=3)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("report", help="render figures for a run directory")
    p.add_argument("--run", required=True, type=Path)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, TrainingError, CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
