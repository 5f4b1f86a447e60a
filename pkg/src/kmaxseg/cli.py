"""Command-line entry points: generate synthetic data, train, evaluate,
run the ablation grid, and render plots from run artifacts.

Exit codes: 0 success, 2 argument/config error, 3 I/O error, 4 format error,
5 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .data import PhantomConfig, generate_phantom, load_volume, save_volume
from .errors import ConfigError, FormatError, NumericError

EXIT_ARGUMENT = 2
EXIT_IO = 3
EXIT_FORMAT = 4
EXIT_NUMERIC = 5


def _parse_shape(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError(f"shape must be D,H,W with 3 entries, got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"shape entries must be integers, got {text!r}") from None


def _load_config(path: str):
    from .trainer import TrainConfig

    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(
            f"config {p} is not valid JSON: line {exc.lineno} column {exc.colno}: "
            f"{exc.msg}"
        ) from exc
    return TrainConfig.from_dict(raw)


def _cmd_generate(args) -> int:
    if args.classes not in (2, 3):
        raise ConfigError(f"classes must be 2 or 3, got {args.classes}")
    if args.count < 1:
        raise ConfigError(f"count must be >= 1, got {args.count}")
    shape = _parse_shape(args.shape)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = PhantomConfig(noise_sigma=args.noise_sigma, mean_jitter=args.mean_jitter)
    stems = []
    for i in range(args.count):
        vol, mask = generate_phantom([args.seed, i], shape, args.classes,
                                     config=cfg)
        stem = f"vol{i:03d}"
        save_volume(out / f"{stem}_img", vol)
        save_volume(out / f"{stem}_seg", mask)
        stems.append(stem)
    manifest = {
        "volumes": stems,
        "count": args.count,
        "shape": list(shape),
        "classes": args.classes,
        "seed": args.seed,
        "noise_sigma": args.noise_sigma,
        "mean_jitter": args.mean_jitter,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {args.count} volume/mask pairs to {out}")
    return 0


def _cmd_train(args) -> int:
    from .trainer import fit

    config = _load_config(args.config)
    if args.out is not None:
        config.out_dir = args.out
    manifest = fit(config, resume=args.resume)
    agg = manifest.get("aggregate")
    if agg:
        print(f"finished {manifest['steps_completed']} steps; "
              f"val dice {agg['dice']:.4f}")
    else:
        print(f"finished {manifest['steps_completed']} steps")
    print(f"artifacts in {config.out_dir}")
    return 0


def _cmd_eval(args) -> int:
    from .model import build_model
    from .trainer import TrainConfig, evaluate, load_checkpoint, load_data_dir

    blob = load_checkpoint(args.checkpoint)
    config = TrainConfig.from_dict(blob["config"])
    model = build_model(config.model)
    model.load_state_dict(blob["model_state"])

    data_dir = Path(args.data)
    items = load_data_dir(data_dir)
    if not items:
        raise ConfigError(f"no volumes listed in {data_dir}/manifest.json")

    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    pred_dir = None
    if args.pred_dir:
        pred_dir = Path(args.pred_dir)
        pred_dir.mkdir(parents=True, exist_ok=True)
    report = evaluate(model, items, config, pred_dir=pred_dir)
    report.write_csv(out / "eval_metrics.csv")
    report.write_json(out / "eval_metrics.json")
    (out / "eval_manifest.json").write_text(json.dumps({
        "checkpoint": str(args.checkpoint),
        "data_dir": str(data_dir),
        "config_hash": blob["config_hash"],
        "num_volumes": len(items),
    }, indent=2) + "\n")
    agg = report.aggregate()
    print(f"evaluated {len(items)} volumes: dice {agg['dice']:.4f}, "
          f"jaccard {agg['jaccard']:.4f}, hd95 {agg['hd95']:.3f}mm, "
          f"asd {agg['asd']:.3f}mm")
    print(f"report written to {out}")
    return 0


def _cmd_ablate(args) -> int:
    from .trainer import run_ablation

    config = _load_config(args.config)
    if args.out is not None:
        config.out_dir = args.out
    csv_path = run_ablation(config)
    print(f"ablation grid written to {csv_path}")
    with csv_path.open(newline="") as f:
        for line in f:
            print("  " + line.rstrip())
    return 0


def _cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = Path(args.run)
    loss_csv = run / "loss.csv"
    metrics_csv = run / "metrics.csv"
    if not loss_csv.exists():
        raise FileNotFoundError(f"no loss.csv in {run}")

    steps, series = [], {}
    with loss_csv.open(newline="") as f:
        reader = csv.DictReader(f)
        names = [n for n in reader.fieldnames if n != "step"]
        series = {n: [] for n in names}
        for row in reader:
            steps.append(int(row["step"]))
            for n in names:
                series[n].append(float(row[n]))

    per_metric = {}
    if metrics_csv.exists():
        from .metrics import MetricsReport
        report = MetricsReport.read_csv(metrics_csv)
        for key in ("dice", "jaccard", "hd95", "asd"):
            per_metric[key] = [(f"{r.volume_id}/c{r.class_id}", getattr(r, key))
                               for r in report.records]

    ncols = 1 + (2 if per_metric else 0)
    fig, axes = plt.subplots(1, ncols, figsize=(6 * ncols, 4.5))
    axes = [axes] if ncols == 1 else list(axes)
    ax = axes[0]
    for n in ("l_ce", "l_dice", "l_segc", "l_qdc", "l_total"):
        if n in series and steps:
            ax.plot(steps, series[n], label=n, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training losses")
    ax.legend(fontsize=8)
    if per_metric:
        for ax, keys in zip(axes[1:], (("dice", "jaccard"), ("hd95", "asd"))):
            width = 0.4
            for off, key in zip((-width / 2, width / 2), keys):
                labels = [lbl for lbl, _ in per_metric[key]]
                values = [v for _, v in per_metric[key]]
                xs = [i + off for i in range(len(values))]
                ax.bar(xs, values, width=width, label=key)
            ax.set_xticks(range(len(labels)))
            ax.set_xticklabels(labels, rotation=90, fontsize=6)
            ax.set_title(" / ".join(keys))
            ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(args.out, dpi=110)
    plt.close(fig)
    print(f"plot written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kmaxseg",
        description="Semi-supervised volumetric segmentation experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize volume/mask pairs")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--shape", default="32,32,32")
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise-sigma", type=float, default=0.1)
    g.add_argument("--mean-jitter", type=float, default=0.0)
    g.set_defaults(func=_cmd_generate)

    t = sub.add_parser("train", help="run one training experiment")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default=None, help="override the config's out_dir")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a data directory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default=None)
    e.add_argument("--pred-dir", default=None, help="export predicted masks here")
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("ablate", help="train the 4-row consistency toggle grid")
    a.add_argument("--config", required=True)
    a.add_argument("--out", default=None, help="override the config's out_dir")
    a.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("plot", help="render plots from a finished run")
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGUMENT
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, PermissionError, IsADirectoryError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
